"""Pulse-accurate simulation of tagged systolic transport between layers.

Each layer's nodes sit on a bidirectional chain. In forward propagation every
source activation is latched onto the chain and shifts one element per pulse
in both directions; with the crossover link closing the chain into a ring,
each element ingests one upward and one downward frame per pulse, so a stage
finishes in ceil(N_src / 2) pulses (N_src without the crossover).
Backpropagation reverses the flow: one frame per previous-layer node travels
through the emitting layer, accumulating weight * delta at each node whose
pairing record names the frame's destination.

Frame values may be scalars or arrays with one entry per sample; a batch is
streamed as parallel lanes sharing the same schedule.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Mapping, Sequence

import numpy as np

from .analyzer import layer_stats, one_to_one_plan, simulation_plan
from .fabric import ConvDescriptor, IdentityRecord, TENSOR_ELEMENT, assign_identities, geometry_for, synthesize
from .model import NetworkModel, same_padding
from .numerics import copy_params, cross_entropy_loss, softmax

BROADCAST = -1
REFERENCE_PULSES = {"F": 231, "B": 18, "U": 213}
F_CONVENTION_NOTE = (
    "F counts one forward chain transfer per layer pair (sum of ceil(N_src/2)). "
    "The reference figure states 231 for the 400-25-10 network without a breakdown; "
    "231 equals this F count plus the B count (213 + 18), and also 200 + 25 + 5 + 1, "
    "so the published number does not pin down a unique convention."
)


class SimulationFault(RuntimeError):
    """Tag corruption or a schedule inconsistency detected during simulation."""


class UnsupportedLayer(ValueError):
    pass


class State(str, enum.Enum):
    F = "F"
    B = "B"
    U = "U"


@dataclass(frozen=True)
class Tag:
    source_node: int
    destination: int
    layer: int
    state: State = State.F
    prune_flag: bool = False
    latch_bit: bool = False
    transfer_complete_bit: bool = False


@dataclass(frozen=True)
class DataFrame:
    tag: Tag
    value: float | np.ndarray


@dataclass(frozen=True)
class Triplet:
    node: int
    source_element: int
    destination_element: int
    up: int | None
    down: int | None
    crossover: int | None = None


def build_triplets(n: int, crossover: bool = True) -> list[Triplet]:
    """Node, source element s and destination element d for each chain position."""
    out = []
    for p in range(n):
        up = p + 1 if p + 1 < n else None
        down = p - 1 if p > 0 else None
        cross = None
        if crossover and n > 1:
            if p == n - 1:
                cross = 0
            elif p == 0:
                cross = n - 1
        out.append(Triplet(p, p, p, up, down, cross))
    return out


def stage_pulses(n: int, crossover: bool = True) -> int:
    if n <= 0:
        return 0
    return math.ceil(n / 2) if crossover else n


@lru_cache(maxsize=64)
def chain_visits(n: int, crossover: bool = True) -> tuple[tuple[tuple[int, str, int], ...], ...]:
    """For each chain position, the (pulse, direction, frame) visits in order.

    Frame k starts latched at position k. The upward stream delivers frame
    p - t to position p at pulse t, the downward stream frame p + 1 + t; the
    crossover wraps indices around the ring. Upward frames are processed first
    within a pulse.
    """
    out = []
    if crossover:
        n_up, n_down = math.ceil(n / 2), n // 2
        for p in range(n):
            visits = []
            for t in range(n_up):
                visits.append((t, "up", (p - t) % n))
                if t < n_down:
                    visits.append((t, "down", (p + 1 + t) % n))
            out.append(tuple(visits))
    else:
        for p in range(n):
            visits = []
            for t in range(n):
                if p - t >= 0:
                    visits.append((t, "up", p - t))
                if p + 1 + t < n:
                    visits.append((t, "down", p + 1 + t))
            out.append(tuple(visits))
    return tuple(out)


def tap_position(j: int, n_src: int, n_dst: int) -> int:
    return j * n_src // n_dst


@dataclass(frozen=True)
class Arrival:
    pulse: int
    direction: str
    frame: DataFrame


def in_flight(n: int, crossover: bool = True) -> list[int]:
    """Frames occupying chain elements at each pulse of a forward stage."""
    counts = [0] * stage_pulses(n, crossover)
    for visits in chain_visits(n, crossover):
        for t, _, _ in visits:
            counts[t] += 1
    return counts


def transfer_forward(
    frames: Sequence[DataFrame], n_dst: int, crossover: bool = True
) -> tuple[list[list[Arrival]], int]:
    """Stream source frames past ``n_dst`` destination taps.

    Returns the per-destination arrival lists and the stage pulse count.
    """
    n_src = len(frames)
    visits = chain_visits(n_src, crossover)
    schedule = []
    for j in range(n_dst):
        pos = tap_position(j, n_src, n_dst)
        schedule.append([Arrival(t, d, frames[k]) for t, d, k in visits[pos]])
    return schedule, stage_pulses(n_src, crossover)


def weighted_sum_streaming(
    arrivals: Iterable[Arrival | DataFrame],
    weights: Mapping[int, float],
    source_layer: int | None = None,
    n_sources: int | None = None,
) -> tuple[float | np.ndarray, dict]:
    """Accumulate weight * activation in arrival order.

    ``weights`` holds the node's local weights keyed by source id. Frames from
    valid sources the node does not need (``0 <= id < n_sources``) are read and
    dropped; any other unknown id is a fault. Returns the sum and the
    source -> weight pairing record kept for backpropagation.
    """
    acc: float | np.ndarray = 0.0
    pairing: dict = {}
    for item in arrivals:
        frame = item.frame if isinstance(item, Arrival) else item
        tag = frame.tag
        if source_layer is not None and tag.layer != source_layer:
            raise SimulationFault(f"frame from layer {tag.layer} reached a node expecting layer {source_layer}")
        src = tag.source_node
        w = weights.get(src)
        if w is None:
            if n_sources is not None and 0 <= src < n_sources:
                continue
            raise SimulationFault(f"frame from unknown source id {src}")
        pairing[src] = w
        if tag.prune_flag:
            continue
        acc = acc + w * frame.value
    return acc, pairing


def transfer_backward(
    deltas: Sequence[float | np.ndarray],
    pairings: Sequence[Mapping[int, float | np.ndarray]],
    n_src: int,
    crossover: bool = True,
    layer: int = 0,
) -> tuple[list[float | np.ndarray], int]:
    """Accumulate sum_j w_ji * delta_j for each previous-layer node i.

    ``deltas[j]`` and ``pairings[j]`` belong to emitting node j. Each
    destination's sum travels as an upward and a downward half-frame that
    together visit every emitting node once; the destination adds both halves.
    """
    n_emit = len(deltas)
    if len(pairings) != n_emit:
        raise ValueError("one pairing record per emitting node is required")
    pulses = stage_pulses(n_emit, crossover)
    sums: list = []
    for i in range(n_src):
        q0 = tap_position(i, n_emit, n_src) if n_src >= n_emit else i % n_emit
        halves = []
        for direction in ("up", "down"):
            acc: float | np.ndarray = 0.0
            for q in _lane_path(q0, n_emit, crossover, direction):
                if pairings[q] is None:
                    raise SimulationFault(f"emitting node {q} has no forward pairing record")
                w = pairings[q].get(i)
                if w is not None:
                    acc = acc + w * deltas[q]
            halves.append(DataFrame(Tag(q0, i, layer, State.B, transfer_complete_bit=True), acc))
        total: float | np.ndarray = 0.0
        for frame in halves:
            if frame.tag.destination != i:
                raise SimulationFault(f"node {i} received a frame addressed to {frame.tag.destination}")
            total = total + frame.value
        sums.append(total)
    return sums, pulses


def _lane_path(q0: int, n: int, crossover: bool, direction: str) -> list[int]:
    if n == 0:
        return []
    if crossover:
        if direction == "up":
            return [(q0 + t) % n for t in range(math.ceil(n / 2))]
        return [(q0 - 1 - t) % n for t in range(n // 2)]
    if direction == "up":
        return list(range(q0, n))
    return list(range(q0 - 1, -1, -1))


def inter_field_transfer(
    frames: Iterable[DataFrame], scope: Iterable[int] | range, activation: str = "Identity"
) -> dict[int, tuple[float | np.ndarray, float | np.ndarray]]:
    """Sum tensor-array column partials per tagged pixel, apply the pixel's
    nonlinearity and store. Returns {pixel node: (pre-activation, output)}."""
    scope = scope if isinstance(scope, (range, set, frozenset)) else set(scope)
    sums: dict = {}
    for frame in frames:
        dst = frame.tag.destination
        if dst not in scope:
            raise SimulationFault(f"tensor frame addressed to pixel {dst} outside the worker's scope")
        sums[dst] = sums.get(dst, 0.0) + frame.value
    out = {}
    for dst, z in sums.items():
        if activation == "ReLU":
            a = np.maximum(z, 0.0)
        elif activation == "Identity":
            a = z
        else:
            raise ValueError(f"pixel nonlinearity {activation!r} is layer-wide; apply it on the field")
        out[dst] = (z, a)
    return out


# -- state machine -----------------------------------------------------------------


@dataclass(frozen=True)
class StageRecord:
    state: str
    src_layer: int
    dst_layer: int
    pulses: int


@dataclass
class PulseReport:
    pulses_F: int = 0
    pulses_B: int = 0
    pulses_U: int = 0
    stages: list[StageRecord] = field(default_factory=list)
    trace: list[tuple[int, str, int]] = field(default_factory=list)
    control: list[tuple[int, int, str]] = field(default_factory=list)

    def add(self, state: str, src: int, dst: int, pulses: int, occupancy: Sequence[int] = ()) -> None:
        start = self.total
        self.stages.append(StageRecord(state, src, dst, pulses))
        setattr(self, f"pulses_{state}", getattr(self, f"pulses_{state}") + pulses)
        label = f"{state}:{src}->{dst}"
        for t in range(pulses):
            self.trace.append((start + t, label, occupancy[t] if t < len(occupancy) else 0))

    def signal(self, layer: int, name: str) -> None:
        self.control.append((self.total, layer, name))

    @property
    def total(self) -> int:
        return self.pulses_F + self.pulses_B + self.pulses_U

    def merge(self, other: "PulseReport") -> None:
        offset = self.total
        self.stages.extend(other.stages)
        self.trace.extend((p + offset, s, n) for p, s, n in other.trace)
        self.control.extend((p + offset, l, s) for p, l, s in other.control)
        self.pulses_F += other.pulses_F
        self.pulses_B += other.pulses_B
        self.pulses_U += other.pulses_U

    def compare_to_reference(self) -> dict:
        return {
            "F": (self.pulses_F, REFERENCE_PULSES["F"]),
            "B": (self.pulses_B, REFERENCE_PULSES["B"]),
            "U": (self.pulses_U, REFERENCE_PULSES["U"]),
        }


class _Node:
    __slots__ = ("id", "slots", "elements", "window", "pairing", "z", "a", "delta", "mask", "pruned")

    def __init__(self, node_id: int):
        self.id = node_id
        self.slots: dict = {}
        self.elements: dict = {}
        self.window: set = set()
        self.pairing: dict = {}
        self.z = self.a = self.delta = None
        self.mask = None
        self.pruned = False


@dataclass
class _Layer:
    index: int
    kind: str
    desc: ConvDescriptor | None
    nodes: list[_Node]
    activation: str


def _conv_geometry(desc: ConvDescriptor):
    h, w, c = desc.in_shape
    top = same_padding(h, desc.kh, desc.stride)[0] if desc.padding == "same" else 0
    left = same_padding(w, desc.kw, desc.stride)[0] if desc.padding == "same" else 0
    return h, w, c, top, left


def _build_node(node_id: int, desc: ConvDescriptor) -> _Node:
    node = _Node(node_id)
    h, w, c, top, left = _conv_geometry(desc)
    _, wo, cout = desc.out_shape
    pix, co = divmod(node_id, cout)
    oy, ox = divmod(pix, wo)
    for dy in range(desc.kh):
        y = oy * desc.stride - top + dy
        if not 0 <= y < h:
            continue
        for dx in range(desc.kw):
            x = ox * desc.stride - left + dx
            if not 0 <= x < w:
                continue
            if desc.op == "max":
                node.window.add((y * w + x) * c + co)
                continue
            for ci in range(c):
                src = (y * w + x) * c + ci
                node.slots[src] = (dy, dx, ci, co)
                node.elements[src] = (ci, dy // TENSOR_ELEMENT, dx // TENSOR_ELEMENT)
    return node


@dataclass
class StepResult:
    loss: float
    outputs: np.ndarray
    backward_sums: list
    grads: list
    report: PulseReport


class SystolicSimulator:
    """Executes a network from worker identity records with tagged systolic transport.

    ``params`` uses the layout of :func:`fprog.numerics.init_params`; FC weights
    are indexed ``[source, node]`` and conv filters ``[dy, dx, c_in, c_out]``.
    The simulator keeps its own copy and updates it in the U state.
    """

    def __init__(
        self,
        model: NetworkModel,
        params: list,
        records: Sequence[IdentityRecord] | None = None,
        crossover: bool = True,
        node_masks: Sequence[np.ndarray | None] | None = None,
    ):
        self.model = model
        self.params = copy_params(params)
        self.crossover = crossover
        if records is None:
            records = default_records(model)
        self.layers = self._build(records)
        self.node_masks = node_masks
        self.last_report: PulseReport | None = None

    def _build(self, records: Sequence[IdentityRecord]) -> list[_Layer]:
        by_layer: dict[int, list[IdentityRecord]] = {}
        for r in records:
            by_layer.setdefault(r.layer, []).append(r)
        stats = layer_stats(self.model)
        layers = []
        for i, spec in enumerate(self.model.layers):
            recs = by_layer.get(i, [])
            ids = sorted(n for r in recs for n in r.nodes)
            if ids != list(range(stats[i].activation_count)):
                raise SimulationFault(f"identity records do not cover layer {i} exactly once")
            if spec.kind == "Input":
                layers.append(_Layer(i, "Input", None, [_Node(n) for n in ids], "Identity"))
                continue
            desc = recs[0].descriptor
            if desc is None:
                raise UnsupportedLayer(f"layer {i} ({spec.kind}) has no systolic realization")
            nodes = [_build_node(n, desc) for n in ids]
            layers.append(_Layer(i, spec.kind, desc, nodes, spec.activation))
        return layers

    # -- F -----------------------------------------------------------------------

    def _emit(self, layer: _Layer, state: State) -> list[DataFrame]:
        return [
            DataFrame(Tag(n.id, BROADCAST, layer.index, state, prune_flag=n.pruned, latch_bit=True), n.a)
            for n in layer.nodes
        ]

    def _apply_mask(self, layer: _Layer, masks) -> None:
        if masks is None or masks[layer.index] is None:
            for n in layer.nodes:
                n.mask = None
                n.pruned = False
            return
        flat = np.asarray(masks[layer.index])
        flat = flat.reshape(flat.shape[0], -1) if flat.ndim == 4 else flat.reshape(1, -1)
        for n in layer.nodes:
            m = flat[:, n.id] if flat.shape[0] > 1 else flat[0, n.id]
            n.mask = m
            n.pruned = bool(np.all(m == 0))
            n.a = n.a * m

    def _forward_layer(self, layer: _Layer, prev: _Layer, report: PulseReport) -> None:
        frames = self._emit(prev, State.F)
        report.signal(prev.index, "latch")
        schedule, pulses = transfer_forward(frames, len(layer.nodes), self.crossover)
        report.add("F", prev.index, layer.index, pulses, in_flight(len(frames), self.crossover))
        report.signal(prev.index, "transfer_complete")
        desc = layer.desc
        n_src = len(prev.nodes)
        if desc.op == "max":
            for node, arrivals in zip(layer.nodes, schedule):
                best = arg = None
                for arr in arrivals:
                    tag = arr.frame.tag
                    if tag.layer != prev.index or not 0 <= tag.source_node < n_src:
                        raise SimulationFault(f"bad frame {tag} at pool node {node.id}")
                    if tag.source_node not in node.window:
                        continue
                    v = np.asarray(arr.frame.value, dtype=np.float64)
                    src = tag.source_node
                    if best is None:
                        best, arg = v.copy(), np.full(v.shape, src)
                    else:
                        better = (v > best) | ((v == best) & (src < arg))
                        best = np.where(better, v, best)
                        arg = np.where(better, src, arg)
                node.pairing = {s: (arg == s).astype(np.float64) for s in sorted(node.window)}
                node.z = node.a = best
            return
        params = self.params[layer.index]
        w_arr, bias = params["w"], params["b"]
        fc = layer.kind in ("FullyConnected", "Output")
        pixel_act = "Identity" if layer.activation == "Softmax" else layer.activation
        for node, arrivals in zip(layer.nodes, schedule):
            if fc:
                weights = {i: w_arr[i, node.id] for i in range(n_src)}
                partial, node.pairing = weighted_sum_streaming(arrivals, weights, prev.index, n_src)
                col = [DataFrame(Tag(0, node.id, layer.index), partial)]
                co = node.id
            else:
                weights = {s: w_arr[slot] for s, slot in node.slots.items()}
                partials: dict = {}
                pairing: dict = {}
                for arr in arrivals:
                    tag = arr.frame.tag
                    if tag.layer != prev.index:
                        raise SimulationFault(f"frame from layer {tag.layer} at conv node {node.id}")
                    src = tag.source_node
                    w = weights.get(src)
                    if w is None:
                        if 0 <= src < n_src:
                            continue
                        raise SimulationFault(f"frame from unknown source id {src}")
                    pairing[src] = w
                    if tag.prune_flag:
                        continue
                    key = node.elements[src]
                    partials[key] = partials.get(key, 0.0) + w * arr.frame.value
                node.pairing = pairing
                col = [DataFrame(Tag(k, node.id, layer.index), v) for k, v in enumerate(partials[key] for key in sorted(partials))]
                co = node.id % desc.out_channels
            col.append(DataFrame(Tag(-1, node.id, layer.index), bias[co]))
            node.z, node.a = inter_field_transfer(col, range(node.id, node.id + 1), pixel_act)[node.id]
        if layer.activation == "Softmax":
            z = np.stack([np.broadcast_to(n.z, np.shape(layer.nodes[0].z)) for n in layer.nodes], axis=-1)
            p = softmax(z)
            for k, n in enumerate(layer.nodes):
                n.a = p[..., k]

    def forward(self, x: np.ndarray, masks=None, report: PulseReport | None = None) -> np.ndarray:
        """Forward pass over a batch (N, H, W, C); returns (N, n_out) outputs."""
        report = report if report is not None else PulseReport()
        masks = masks if masks is not None else self.node_masks
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        flat = x.reshape(x.shape[0], -1)
        inp = self.layers[0]
        for n in inp.nodes:
            n.a = flat[:, n.id].copy()
        self._apply_mask(inp, masks)
        for prev, layer in zip(self.layers, self.layers[1:]):
            self._forward_layer(layer, prev, report)
            if layer is not self.layers[-1]:
                self._apply_mask(layer, masks)
        self.last_report = report
        return np.stack([n.a for n in self.layers[-1].nodes], axis=-1)

    # -- B -----------------------------------------------------------------------

    def backward(self, y: np.ndarray, report: PulseReport | None = None) -> list:
        """Backpropagate mean cross-entropy; returns captured sums per layer."""
        report = report if report is not None else PulseReport()
        out = self.layers[-1]
        y = np.asarray(y, dtype=np.float64)
        batch = y.shape[0]
        for k, n in enumerate(out.nodes):
            n.delta = (n.a - y[:, k]) / batch
        sums_per_layer: list = [None] * len(self.layers)
        for idx in range(len(self.layers) - 1, 0, -1):
            layer, prev = self.layers[idx], self.layers[idx - 1]
            sums, pulses = transfer_backward(
                [n.delta for n in layer.nodes],
                [n.pairing for n in layer.nodes],
                len(prev.nodes),
                self.crossover,
                layer.index,
            )
            report.add("B", layer.index, prev.index, pulses, [2 * len(prev.nodes)] * pulses)
            report.signal(layer.index, "transfer_complete")
            sums_per_layer[prev.index] = np.stack([np.broadcast_to(s, (batch,)) for s in sums], axis=-1)
            if prev.kind == "Input":
                continue
            for n, s in zip(prev.nodes, sums):
                d = s if n.mask is None else s * n.mask
                if prev.activation == "ReLU":
                    d = d * (np.asarray(n.z) > 0)
                n.delta = d
        return sums_per_layer

    # -- U -----------------------------------------------------------------------

    def update(self, lr: float, report: PulseReport | None = None) -> list:
        """Re-stream activations to every weight owner, form gradients and step."""
        report = report if report is not None else PulseReport()
        grads: list = [None] * len(self.layers)
        for prev, layer in zip(self.layers, self.layers[1:]):
            if layer.desc.op != "mac":
                continue
            frames = self._emit(prev, State.U)
            schedule, pulses = transfer_forward(frames, len(layer.nodes), self.crossover)
            report.add("U", prev.index, layer.index, pulses, in_flight(len(frames), self.crossover))
            p = self.params[layer.index]
            gw = np.zeros_like(p["w"])
            gb = np.zeros_like(p["b"])
            fc = layer.kind in ("FullyConnected", "Output")
            for node, arrivals in zip(layer.nodes, schedule):
                delta = node.delta
                for arr in arrivals:
                    src = arr.frame.tag.source_node
                    if src not in node.pairing:
                        continue
                    slot = (src, node.id) if fc else node.slots[src]
                    gw[slot] += np.sum(delta * arr.frame.value)
                gb[node.id if fc else node.id % layer.desc.out_channels] += np.sum(delta)
            grads[layer.index] = {"w": gw, "b": gb}
        for i, g in enumerate(grads):
            if g is not None:
                self.params[i]["w"] = self.params[i]["w"] - lr * g["w"]
                self.params[i]["b"] = self.params[i]["b"] - lr * g["b"]
        return grads

    def train_step(self, x: np.ndarray, y: np.ndarray, lr: float, masks=None) -> StepResult:
        report = PulseReport()
        out = self.forward(x, masks, report)
        loss = cross_entropy_loss(out, y) if self.model.layers[-1].activation == "Softmax" else float(
            0.5 * np.sum((out - y) ** 2) / out.shape[0]
        )
        sums = self.backward(y, report)
        grads = self.update(lr, report)
        self.last_report = report
        return StepResult(loss, out, sums, grads, report)


def default_records(model: NetworkModel, workers: int | None = None) -> list[IdentityRecord]:
    """Identity records for a 1-node:1-worker layout (or a folded one with ``workers``)."""
    stats = layer_stats(model)
    plan = one_to_one_plan(stats) if workers is None else simulation_plan(stats, workers)
    layout = synthesize(plan, geometry_for(plan, 16), model.layers)
    return assign_identities(layout)


def run_state_machine(
    model: NetworkModel,
    params: list,
    x: np.ndarray,
    y: np.ndarray,
    records: Sequence[IdentityRecord] | None = None,
    crossover: bool = True,
    masks=None,
) -> tuple[list, PulseReport, SystolicSimulator]:
    """Train over one batch following the model's batch mode.

    GD takes one step on the whole batch, miniBatchGD steps through chunks of
    ``batch_size`` and SGD steps sample by sample. Returns the per-layer weight
    deltas, the accumulated pulse report and the simulator.
    """
    sim = SystolicSimulator(model, params, records, crossover)
    h = model.hyper
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    if n == 0:
        return [None] * len(model.layers), PulseReport(), sim
    size = {"GD": n, "miniBatchGD": h.batch_size, "SGD": 1}[h.batch_mode]
    total = PulseReport()
    for start in range(0, n, size):
        step = sim.train_step(x[start : start + size], y[start : start + size], h.learning_rate, masks)
        total.merge(step.report)
    deltas = []
    for p0, p1 in zip(params, sim.params):
        if p0 is None or "w" not in (p0 or {}):
            deltas.append(None)
        else:
            deltas.append({"w": p1["w"] - p0["w"], "b": p1["b"] - p0["b"]})
    return deltas, total, sim
