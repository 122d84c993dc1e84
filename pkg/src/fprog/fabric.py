"""Placement of an allocation plan onto alternating tensor/pixel array fields."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

from .analyzer import AllocationPlan, LayerStats
from .model import LayerSpec, Shape, infer_layer

TENSOR_ELEMENT = 5  # 5x5x1 multiply-accumulate unit


class CapacityError(RuntimeError):
    pass


@dataclass(frozen=True)
class Geometry:
    tensor_field_capacity: int
    pixel_field_capacity: int
    field_count: int
    crossovers: int = 1
    tensor_columns: int = 32
    pixel_columns: int = 32

    @classmethod
    def from_dict(cls, d: dict) -> "Geometry":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        g = cls(**known)
        for name in ("tensor_field_capacity", "pixel_field_capacity", "field_count"):
            if getattr(g, name) < 1:
                raise ValueError(f"{name} must be positive")
        if g.crossovers < 0:
            raise ValueError("crossovers must be >= 0")
        return g

    @classmethod
    def load(cls, path) -> "Geometry":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True)
class TensorElement:
    id: tuple[int, int, int]  # (field, row, column)
    capacity: tuple[int, int, int] = (TENSOR_ELEMENT, TENSOR_ELEMENT, 1)
    assigned_worker: int | None = None


@dataclass(frozen=True)
class PixelElement:
    id: tuple[int, int]  # (field, position)
    nonlinearity: str = "Identity"
    assigned_worker: int | None = None


@dataclass(frozen=True)
class Segment:
    """A contiguous run of elements within one field."""

    field: int
    start: int
    count: int


@dataclass(frozen=True)
class ConvDescriptor:
    """Convolution-form view of a layer: ``op`` is ``"mac"`` or ``"max"``."""

    op: str
    kh: int
    kw: int
    stride: int
    padding: str
    in_shape: Shape
    out_shape: Shape
    activation: str

    @property
    def out_channels(self) -> int:
        return self.out_shape[2]


def lower_layer(layer: LayerSpec, in_shape: Shape) -> ConvDescriptor:
    """Express Conv, MaxPool, FullyConnected and Output layers as convolutions."""
    out = infer_layer(layer, in_shape)
    if layer.kind == "Conv":
        return ConvDescriptor("mac", layer.filter_size, layer.filter_size, layer.stride, layer.padding, in_shape, out, layer.activation)
    if layer.kind == "MaxPool":
        return ConvDescriptor("max", layer.filter_size, layer.filter_size, layer.stride, layer.padding, in_shape, out, "Identity")
    if layer.kind in ("FullyConnected", "Output"):
        return ConvDescriptor("mac", in_shape[0], in_shape[1], 1, "valid", in_shape, out, layer.activation)
    raise ValueError(f"cannot lower layer kind {layer.kind}")


def tensor_demand(stats: LayerStats) -> int:
    """Tensor elements one worker needs to hold a single filter of its layer."""
    if stats.computational_load == 0:
        return 0
    kh, kw = stats.kernel
    return math.ceil(kh / TENSOR_ELEMENT) * math.ceil(kw / TENSOR_ELEMENT) * stats.in_channels


@dataclass(frozen=True)
class WorkerConfig:
    worker_id: int
    layer: int
    node_start: int
    node_stop: int
    channels: int
    tensor_segments: tuple[Segment, ...]
    pixel_segments: tuple[Segment, ...]

    @property
    def node_count(self) -> int:
        return self.node_stop - self.node_start

    @property
    def tensor_count(self) -> int:
        return sum(s.count for s in self.tensor_segments)

    @property
    def pixel_count(self) -> int:
        return sum(s.count for s in self.pixel_segments)

    @property
    def merged(self) -> bool:
        return len({s.field for s in self.tensor_segments}) > 1 or len({s.field for s in self.pixel_segments}) > 1

    @property
    def pixel_assignment(self) -> list[tuple[int, range]]:
        """(pixel index, channel range) pieces; a partial range is a fractional pixel."""
        return pixel_pieces(self.node_start, self.node_stop, self.channels)

    @property
    def filters(self) -> Sequence[int]:
        if self.node_count >= self.channels:
            return range(self.channels)
        chans = {n % self.channels for n in range(self.node_start, self.node_stop)}
        return sorted(chans)


def pixel_pieces(start: int, stop: int, channels: int) -> list[tuple[int, range]]:
    pieces = []
    n = start
    while n < stop:
        pixel, c0 = divmod(n, channels)
        c1 = min(channels, c0 + (stop - n))
        pieces.append((pixel, range(c0, c1)))
        n += c1 - c0
    return pieces


@dataclass(frozen=True)
class FieldUsage:
    kind: str  # "tensor" or "pixel"
    index: int
    capacity: int
    assigned: int

    @property
    def idle(self) -> int:
        return self.capacity - self.assigned

    @property
    def utilization(self) -> float:
        return 100.0 * self.assigned / self.capacity


@dataclass(frozen=True)
class LinkCount:
    src_layer: int
    dst_layer: int
    chain_links: int
    crossover_links: int
    tap_links: int

    @property
    def total(self) -> int:
        return self.chain_links + self.crossover_links + self.tap_links


@dataclass
class FabricLayout:
    geometry: Geometry
    workers: list[WorkerConfig]
    tensor_fields: list[FieldUsage]
    pixel_fields: list[FieldUsage]
    links: list[LinkCount]
    stats: tuple[LayerStats, ...]
    nominal_nodes_per_worker: tuple[int | None, ...]
    descriptors: tuple[ConvDescriptor | None, ...] = ()
    unplaced_workers: int = 0

    @property
    def fields(self) -> list[FieldUsage]:
        """Alternating tensor, pixel, tensor, pixel, ... sequence."""
        out = []
        for t, p in zip(self.tensor_fields, self.pixel_fields):
            out.extend((t, p))
        return out

    def merged_workers(self) -> list[WorkerConfig]:
        return [w for w in self.workers if w.merged]

    def layer_workers(self, layer: int) -> list[WorkerConfig]:
        return [w for w in self.workers if w.layer == layer]

    def tensor_elements(self, worker: WorkerConfig) -> Iterator[TensorElement]:
        cols = self.geometry.tensor_columns
        for seg in worker.tensor_segments:
            for k in range(seg.start, seg.start + seg.count):
                yield TensorElement((seg.field, k // cols, k % cols), assigned_worker=worker.worker_id)

    def pixel_elements(self, worker: WorkerConfig) -> Iterator[PixelElement]:
        act = self.stats[worker.layer].activation
        for seg in worker.pixel_segments:
            for k in range(seg.start, seg.start + seg.count):
                yield PixelElement((seg.field, k), act, worker.worker_id)


class _Allocator:
    """Sequential first-fit over one kind of field: a request that fits in one
    field goes to the current field, or to the next one when the remainder is
    too small; a request larger than a field spans consecutive fields."""

    def __init__(self, capacity: int, count: int, kind: str):
        self.capacity = capacity
        self.count = count
        self.kind = kind
        self.used = [0] * count
        self.cur = 0

    def take(self, demand: int) -> tuple[Segment, ...] | None:
        if demand == 0:
            return ()
        cur = self.cur
        if cur < self.count and demand <= self.capacity and self.capacity - self.used[cur] < demand:
            cur += 1
        segs = []
        left = demand
        f = cur
        while left > 0:
            if f >= self.count:
                return None
            free = self.capacity - self.used[f]
            take = min(free, left)
            if take:
                segs.append(Segment(f, self.used[f], take))
            left -= take
            f += 1
        for s in segs:
            self.used[s.field] += s.count
        last = segs[-1].field
        self.cur = last if self.used[last] < self.capacity else last + 1
        return tuple(segs)

    def usage(self) -> list[FieldUsage]:
        return [FieldUsage(self.kind, i, self.capacity, u) for i, u in enumerate(self.used)]


def chain_links(n_src: int, n_dst: int, crossovers: int = 1) -> LinkCount:
    """Links for a bidirectional systolic chain over n_src source elements
    tapped by n_dst destination elements."""
    chain = 2 * max(n_src - 1, 0)
    return LinkCount(-1, -1, chain, crossovers if n_src > 1 else 0, n_dst)


def synthesize(plan: AllocationPlan, geometry: Geometry, layers: Sequence[LayerSpec] | None = None) -> FabricLayout:
    """Place every worker of ``plan`` onto the fabric, in network order."""
    stats = plan.stats
    tensors = _Allocator(geometry.tensor_field_capacity, geometry.field_count, "tensor")
    pixels = _Allocator(geometry.pixel_field_capacity, geometry.field_count, "pixel")
    workers: list[WorkerConfig] = []
    wid = 0
    unplaced = 0
    for li, (s, alloc) in enumerate(zip(stats, plan.layers)):
        n = s.activation_count
        count = min(alloc.workers, n)
        unplaced += alloc.workers - count
        t_need = tensor_demand(s)
        channels = s.shape[2]
        for k in range(count):
            start, stop = k * n // count, (k + 1) * n // count
            p_need = len({p for p, _ in pixel_pieces(start, stop, channels)})
            tseg = tensors.take(t_need)
            if tseg is None:
                raise CapacityError(
                    f"worker {wid} (layer {li} '{s.label}') needs {t_need} tensor elements; tensor fields exhausted"
                )
            pseg = pixels.take(p_need)
            if pseg is None:
                raise CapacityError(
                    f"worker {wid} (layer {li} '{s.label}') needs {p_need} pixel elements; pixel fields exhausted"
                )
            workers.append(WorkerConfig(wid, li, start, stop, channels, tseg, pseg))
            wid += 1

    links = []
    bearing = [i for i, a in enumerate(plan.layers) if a.workers > 0]
    for a, b in zip(bearing, bearing[1:]):
        lc = chain_links(plan.layers[a].workers, plan.layers[b].workers, geometry.crossovers)
        links.append(LinkCount(a, b, lc.chain_links, lc.crossover_links, lc.tap_links))

    descriptors: tuple = ()
    if layers is not None:
        descriptors = tuple(
            lower_layer(layer, s.in_shape) if layer.kind in ("Conv", "MaxPool", "FullyConnected", "Output") else None
            for layer, s in zip(layers, stats)
        )
    return FabricLayout(
        geometry=geometry,
        workers=workers,
        tensor_fields=tensors.usage(),
        pixel_fields=pixels.usage(),
        links=links,
        stats=stats,
        nominal_nodes_per_worker=tuple(a.nodes_per_worker for a in plan.layers),
        descriptors=descriptors,
        unplaced_workers=unplaced,
    )


@dataclass(frozen=True)
class UpstreamScope:
    """Region of the previous layer a worker reads: rows x cols x channels."""

    layer: int
    rows: range
    cols: range
    channels: range

    @property
    def size(self) -> int:
        return len(self.rows) * len(self.cols) * len(self.channels)


@dataclass(frozen=True)
class IdentityRecord:
    worker_id: int
    layer: int
    kind: str
    node_start: int
    node_stop: int
    nodes_per_worker: int | None
    filters: Sequence[int]
    upstream: UpstreamScope | None
    descriptor: ConvDescriptor | None = None

    @property
    def nodes(self) -> range:
        return range(self.node_start, self.node_stop)


def _upstream(w: WorkerConfig, s: LayerStats, desc: ConvDescriptor | None, layer: int) -> UpstreamScope | None:
    if s.kind == "Input" or layer == 0:
        return None
    h_in, w_in, c_in = s.in_shape
    full = UpstreamScope(layer - 1, range(h_in), range(w_in), range(c_in))
    if desc is None or s.kind in ("FullyConnected", "Output") or s.kind not in ("Conv", "MaxPool"):
        return full
    _, wo, c = s.shape
    p0, p1 = w.node_start // c, (w.node_stop - 1) // c
    rows_out = range(p0 // wo, p1 // wo + 1)
    cols_out = range(0, wo) if len(rows_out) > 1 else range(p0 % wo, p1 % wo + 1)
    from .model import same_padding

    top = same_padding(h_in, desc.kh, desc.stride)[0] if desc.padding == "same" else 0
    left = same_padding(w_in, desc.kw, desc.stride)[0] if desc.padding == "same" else 0
    r0 = max(rows_out.start * desc.stride - top, 0)
    r1 = min((rows_out.stop - 1) * desc.stride - top + desc.kh, h_in)
    c0 = max(cols_out.start * desc.stride - left, 0)
    c1 = min((cols_out.stop - 1) * desc.stride - left + desc.kw, w_in)
    chans = range(c_in) if desc.op == "mac" else range(min(w.filters), max(w.filters) + 1)
    return UpstreamScope(layer - 1, range(r0, r1), range(c0, c1), chans)


def assign_identities(layout: FabricLayout) -> list[IdentityRecord]:
    """One identity record per placed worker: what it computes and what it reads."""
    records = []
    for w in layout.workers:
        s = layout.stats[w.layer]
        desc = layout.descriptors[w.layer] if layout.descriptors else None
        records.append(
            IdentityRecord(
                worker_id=w.worker_id,
                layer=w.layer,
                kind=s.kind,
                node_start=w.node_start,
                node_stop=w.node_stop,
                nodes_per_worker=layout.nominal_nodes_per_worker[w.layer],
                filters=w.filters if s.kind != "Input" else (),
                upstream=_upstream(w, s, desc, w.layer),
                descriptor=desc,
            )
        )
    return records


def geometry_for(plan: AllocationPlan, fields: int, slack: float = 1.25) -> Geometry:
    """A geometry with ``fields`` field pairs roomy enough for ``plan``.

    Next-fit placement can strand less than one request at the end of each
    field, so each capacity gets the largest single request on top of its
    share of the total.
    """
    t_max = max((tensor_demand(s) for s in plan.stats), default=1) or 1
    t_total = sum(tensor_demand(s) * a.workers for s, a in zip(plan.stats, plan.layers))
    p_total = sum(min(a.workers, s.activation_count) + s.pixel_count for s, a in zip(plan.stats, plan.layers))
    p_max = max((math.ceil(s.activation_count / a.workers) for s, a in zip(plan.stats, plan.layers) if a.workers), default=1)
    t_cap = math.ceil(slack * t_total / fields) + t_max
    p_cap = math.ceil(slack * p_total / fields) + p_max
    return Geometry(t_cap, p_cap, fields)


def layout_report(layout: FabricLayout) -> tuple[list[str], list[list[str]]]:
    """Per-field utilization rows for text/CSV output."""
    header = ["field", "kind", "capacity", "assigned", "idle", "utilization_pct"]
    rows = [
        [str(f.index), f.kind, str(f.capacity), str(f.assigned), str(f.idle), f"{f.utilization:.2f}"]
        for f in layout.fields
    ]
    return header, rows
