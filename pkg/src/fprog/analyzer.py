"""Per-layer statistics and equal-delay worker allocation."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .model import LayerSpec, NetworkModel, Shape, shape_infer, infer_layer


class AllocationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerStats:
    label: str
    kind: str
    activation: str
    shape: Shape
    in_shape: Shape
    activation_count: int
    parameter_count: int
    computational_load: int
    # H*W for spatial layers; node count for FullyConnected/Output (table convention)
    pixel_count: int
    kernel: tuple[int, int] = (1, 1)
    in_channels: int = 0
    note: str | None = None


def round_half_away(x: float) -> int:
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def _conv_counts(f: int, cin: int, out_shape: Shape) -> tuple[int, int]:
    ho, wo, cout = out_shape
    load = ho * wo * cout * f * f * cin
    params = (f * f * cin + 1) * cout
    return load, params


def _inception_counts(layer: LayerSpec, in_shape: Shape) -> tuple[int, int, int]:
    load = params = 0
    kmax = 1
    for chain in layer.branches:
        s = in_shape
        for b in chain:
            out = infer_layer(b, s)
            if b.kind == "Conv":
                l_, p_ = _conv_counts(b.filter_size, s[2], out)
                load += l_
                params += p_
                kmax = max(kmax, b.filter_size)
            s = out
    return load, params, kmax


def layer_stats(model: NetworkModel, standard_params: bool = False) -> list[LayerStats]:
    """Activation count, learnable parameters and forward MAC load per layer.

    With ``standard_params`` False (the default) fully connected layers report
    ``n_in*n_out + 1`` parameters, matching the reference allocation table; with
    True they report the usual ``(n_in + 1)*n_out``.
    """
    shapes = shape_infer(model)
    stats = []
    prev: Shape = tuple(model.input_shape)
    for i, (layer, shape) in enumerate(zip(model.layers, shapes)):
        h, w, c = shape
        count = h * w * c
        load = params = 0
        kernel = (1, 1)
        cin = prev[2]
        pixels = h * w
        if layer.kind == "Conv":
            load, params = _conv_counts(layer.filter_size, cin, shape)
            kernel = (layer.filter_size, layer.filter_size)
        elif layer.kind in ("FullyConnected", "Output"):
            n_in = prev[0] * prev[1] * prev[2]
            load = n_in * c
            params = (n_in + 1) * c if standard_params else n_in * c + 1
            kernel = (prev[0], prev[1])
            pixels = c
        elif layer.kind == "InceptionModule":
            load, params, k = _inception_counts(layer, prev)
            kernel = (k, k)
        elif layer.kind == "Input":
            cin = c
        stats.append(
            LayerStats(
                label=layer.label(i),
                kind=layer.kind,
                activation=layer.activation,
                shape=shape,
                in_shape=prev if layer.kind != "Input" else shape,
                activation_count=count,
                parameter_count=params,
                computational_load=load,
                pixel_count=pixels,
                kernel=kernel,
                in_channels=cin,
                note=layer.note,
            )
        )
        prev = shape
    return stats


@dataclass(frozen=True)
class LayerAllocation:
    workers: int
    exact_share: float
    nodes_per_worker: int | None
    pixels_per_worker: float | None
    area_percent: float


@dataclass(frozen=True)
class AllocationPlan:
    layers: tuple[LayerAllocation, ...]
    total_workers: int
    stats: tuple[LayerStats, ...]

    @property
    def assigned_workers(self) -> int:
        return sum(a.workers for a in self.layers)

    @property
    def idle_workers(self) -> int:
        return self.total_workers - self.assigned_workers

    @property
    def total_load(self) -> int:
        return sum(s.computational_load for s in self.stats)


def allocate_workers(stats: Sequence[LayerStats], total_workers: int) -> AllocationPlan:
    """Split ``total_workers`` across layers in proportion to computational load.

    Worker counts are the exact shares rounded half away from zero; ratio columns
    use the unrounded share. Rounding residue stays unassigned (idle workers).
    """
    total_load = sum(s.computational_load for s in stats)
    if total_load <= 0:
        raise AllocationError("model has no computational load to allocate")
    busy = [s for s in stats if s.computational_load > 0]
    if total_workers < len(busy):
        raise AllocationError(
            f"{total_workers} workers cannot cover {len(busy)} layers with nonzero load; "
            "raise total_workers"
        )
    out = []
    for s in stats:
        load = s.computational_load
        area = 100.0 * load / total_load
        if load == 0:
            out.append(LayerAllocation(0, 0.0, None, None, area))
            continue
        share = total_workers * load / total_load
        workers = round_half_away(share)
        if workers == 0:
            raise AllocationError(
                f"layer '{s.label}' rounds to zero workers (exact share {share:.3f}); raise total_workers"
            )
        out.append(
            LayerAllocation(
                workers=workers,
                exact_share=share,
                nodes_per_worker=round_half_away(s.activation_count / share),
                pixels_per_worker=s.pixel_count / share,
                area_percent=area,
            )
        )
    return AllocationPlan(tuple(out), total_workers, tuple(stats))


def one_to_one_plan(stats: Sequence[LayerStats]) -> AllocationPlan:
    """1-node:1-worker mapping for every layer, including Input and MaxPool."""
    total_load = sum(s.computational_load for s in stats) or 1
    layers = tuple(
        LayerAllocation(
            workers=s.activation_count,
            exact_share=float(s.activation_count),
            nodes_per_worker=1,
            pixels_per_worker=s.pixel_count / s.activation_count,
            area_percent=100.0 * s.computational_load / total_load,
        )
        for s in stats
    )
    return AllocationPlan(layers, sum(a.workers for a in layers), tuple(stats))


def simulation_plan(stats: Sequence[LayerStats], total_workers: int) -> AllocationPlan:
    """Load-proportional plan where zero-load layers still get one host worker.

    MaxPool and Input nodes have no MAC load, but a simulation needs somewhere to
    hold them; each such layer is hosted by a single worker.
    """
    base = allocate_workers(stats, total_workers)
    layers = []
    for s, a in zip(stats, base.layers):
        if a.workers == 0:
            a = LayerAllocation(1, 1.0, s.activation_count, float(s.pixel_count), a.area_percent)
        layers.append(a)
    return AllocationPlan(tuple(layers), total_workers, tuple(stats))


@dataclass(frozen=True)
class DelayProxy:
    per_layer: tuple[float | None, ...]
    target: float

    @property
    def spread(self) -> float:
        """max/min ratio across layers with nonzero load."""
        vals = [v for v in self.per_layer if v is not None]
        return max(vals) / min(vals) if vals else 1.0


def delay_proxy(plan: AllocationPlan, stats: Sequence[LayerStats] | None = None) -> DelayProxy:
    stats = plan.stats if stats is None else stats
    per_layer = tuple(
        s.computational_load / a.workers if s.computational_load and a.workers else None
        for s, a in zip(stats, plan.layers)
    )
    total_load = sum(s.computational_load for s in stats)
    return DelayProxy(per_layer, total_load / plan.total_workers)


# -- table rendering -----------------------------------------------------------

TABLE_COLUMNS = (
    "Layer",
    "Activation Size",
    "Act Function",
    "Activation Count",
    "Parameters to learn",
    "Computational Load",
    "# workers",
    "die area (%)",
    "N (nodes/worker)",
    "# of pixels/worker",
)


def _size(s: LayerStats) -> str:
    if s.kind in ("FullyConnected", "Output"):
        return str(s.shape[2])
    return "({},{},{})".format(*s.shape)


def _act(s: LayerStats) -> str:
    if s.kind == "Input":
        return ""
    if s.kind == "MaxPool":
        return "-"
    return s.activation


def table_rows(plan: AllocationPlan, thousands: bool = False) -> list[list[str]]:
    """Rows in reference-table column order, plus a trailing total row."""

    def num(v: int) -> str:
        return f"{v:,}" if thousands else str(v)

    rows = []
    for i, (s, a) in enumerate(zip(plan.stats, plan.layers)):
        label = s.label if s.kind == "Input" else f"{i} {s.label}"
        if s.note:
            label += " *"
        busy = a.workers > 0
        rows.append(
            [
                label,
                _size(s),
                _act(s),
                num(s.activation_count),
                num(s.parameter_count),
                num(s.computational_load) if s.computational_load else "",
                num(a.workers) if busy else "",
                f"{a.area_percent:.2f}" if busy else "",
                num(a.nodes_per_worker) if busy else "",
                f"{a.pixels_per_worker:.2f}" if busy else "",
            ]
        )
    rows.append(
        [
            "total",
            "",
            "",
            num(sum(s.activation_count for s in plan.stats)),
            num(sum(s.parameter_count for s in plan.stats)),
            num(plan.total_load),
            num(plan.total_workers),
            f"{sum(a.area_percent for a in plan.layers):.2f}",
            "",
            "",
        ]
    )
    return rows


def footnotes(plan: AllocationPlan) -> list[str]:
    notes = [f"* {s.label}: {s.note}" for s in plan.stats if s.note]
    if plan.idle_workers:
        notes.append(
            f"{plan.idle_workers} of {plan.total_workers} workers stay idle after rounding "
            f"({plan.assigned_workers} assigned)."
        )
    return notes


def format_table(plan: AllocationPlan) -> str:
    rows = [list(TABLE_COLUMNS)] + table_rows(plan, thousands=True)
    widths = [max(len(r[c]) for r in rows) for c in range(len(TABLE_COLUMNS))]
    lines = []
    for r, row in enumerate(rows):
        cells = [row[0].ljust(widths[0])] + [cell.rjust(widths[c]) for c, cell in enumerate(row) if c]
        lines.append("  ".join(cells).rstrip())
        if r == 0:
            lines.append("  ".join("-" * w for w in widths))
    lines.extend(footnotes(plan))
    return "\n".join(lines)
