"""Analytical latency model: pipelined fabric execution vs store/fetch execution.

Both sides use the same worker counts and the same per-layer compute time.
The store/fetch baseline pays a memory read and write around every layer;
the fabric pays only the part of each inter-layer transfer that cannot hide
behind the receiving layer's computation. Samples stream through either
machine as a pipeline, so S samples over stage times T take
``sum(T) + (S - 1) * max(T)``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

from .analyzer import LayerStats, allocate_workers, layer_stats
from .model import NetworkModel

MEMORY_KINDS = ("on_die_buffer", "external_dram")


class PerfScopeError(ValueError):
    pass


@dataclass(frozen=True)
class PerfParams:
    dt_readmem: float = 1.0
    dt_writemem: float = 1.0
    dt_procW: float = 1.0
    N_w: int | None = None
    N_SOC: int = 100_000
    N_total: int = 100_000
    memory_kind: str = "on_die_buffer"
    bus_conflict_factor: float = 1.0
    bus_conflicts: bool = False
    # write of layer i and read of layer i+1 counted once
    merge_transfers: bool = False
    # time per systolic pulse of inter-layer transfer on the fabric
    dt_transfer: float = 0.0
    transfer_override: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("dt_readmem", "dt_writemem", "dt_procW", "dt_transfer"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.bus_conflict_factor < 1:
            raise ValueError("bus_conflict_factor must be >= 1")
        if self.memory_kind not in MEMORY_KINDS:
            raise ValueError(f"memory_kind must be one of {MEMORY_KINDS}")
        if self.N_w is not None and self.N_w > self.N_SOC:
            raise ValueError("N_w must not exceed N_SOC")
        if self.N_SOC > self.N_total:
            raise ValueError("N_SOC must not exceed N_total")

    @property
    def conflict(self) -> float:
        return self.bus_conflict_factor if self.bus_conflicts else 1.0


PRESETS = {
    # buffer next to the compute: memory access as slow as one layer's compute
    "on_die_buffer": PerfParams(1.0, 1.0, 1.0, memory_kind="on_die_buffer"),
    # off-chip DRAM round trips at 30x compute, with bus conflicts on store/activate
    "external_dram": PerfParams(
        30.0, 30.0, 1.0, memory_kind="external_dram", bus_conflict_factor=1.2, bus_conflicts=True
    ),
}


def load_params(path=None, preset: str | None = None, **overrides) -> PerfParams:
    """Params from a JSON file (optionally naming a ``preset`` to start from)."""
    data: dict = {}
    if path is not None:
        with open(path) as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ValueError("params file must hold a JSON object")
    preset = data.pop("preset", preset) or "on_die_buffer"
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    data.update(overrides)
    if data.get("transfer_override") is not None:
        data["transfer_override"] = tuple(float(v) for v in data["transfer_override"])
    known = set(PerfParams.__dataclass_fields__)
    extra = set(data) - known
    if extra:
        raise ValueError(f"unknown perf parameters: {sorted(extra)}")
    return replace(PRESETS[preset], **data)


@dataclass(frozen=True)
class StageTime:
    label: str
    workers: int
    proc: float
    baseline: float
    transfer: float
    pipelined: float


@dataclass
class PerfEstimate:
    baseline_time: float
    pipelined_time: float
    speedup: float
    stages: list[StageTime] = field(default_factory=list)
    samples: int = 1
    compute_time: float = 0.0

    def as_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [asdict(s) for s in self.stages]
        return d


def pipeline_time(stage_times: Sequence[float], samples: int) -> float:
    if samples < 1:
        raise ValueError("samples must be >= 1")
    if not stage_times:
        return 0.0
    return float(sum(stage_times) + (samples - 1) * max(stage_times))


def _check_scope(params: PerfParams) -> None:
    if params.N_total > params.N_SOC:
        raise PerfScopeError(
            f"N_total={params.N_total} exceeds N_SOC={params.N_SOC}: requires partitioning - out of scope"
        )


def stage_breakdown(model_or_stats: NetworkModel | Sequence[LayerStats], params: PerfParams) -> list[StageTime]:
    """Per-stage times for every layer with nonzero load.

    Workers come from the equal-delay allocation of ``N_total``; each stage's
    compute time is ``dt_procW`` scaled by its load per worker relative to the
    balanced target, so a perfectly balanced plan gives exactly ``dt_procW``.
    """
    _check_scope(params)
    stats = layer_stats(model_or_stats) if isinstance(model_or_stats, NetworkModel) else list(model_or_stats)
    plan = allocate_workers(stats, params.N_total)
    target = plan.total_load / params.N_total
    busy = [(s, a) for s, a in zip(stats, plan.layers) if s.computational_load > 0]
    if params.transfer_override is not None and len(params.transfer_override) != len(busy):
        raise ValueError(f"transfer_override needs {len(busy)} entries, got {len(params.transfer_override)}")
    c = params.conflict
    out = []
    prev_nodes = None
    for k, (s, a) in enumerate(busy):
        proc = params.dt_procW * (s.computational_load / a.workers) / target
        if params.merge_transfers:
            base = c * params.dt_readmem + proc + (c * params.dt_writemem if k == len(busy) - 1 else 0.0)
        else:
            base = c * params.dt_readmem + proc + c * params.dt_writemem
        if params.transfer_override is not None:
            transfer = params.transfer_override[k]
        else:
            n_src = prev_nodes if prev_nodes is not None else s.in_shape[0] * s.in_shape[1] * s.in_shape[2]
            transfer = params.dt_transfer * math.ceil(n_src / 2)
        # hiding condition: transfer overlaps the receiving stage's computation
        piped = proc + max(0.0, transfer - proc)
        out.append(StageTime(s.label, a.workers, proc, base, transfer, piped))
        prev_nodes = s.activation_count
    return out


def estimate_baseline(model, params: PerfParams, samples: int = 1) -> float:
    return pipeline_time([s.baseline for s in stage_breakdown(model, params)], samples)


def estimate_pipelined(model, params: PerfParams, samples: int = 1) -> float:
    return pipeline_time([s.pipelined for s in stage_breakdown(model, params)], samples)


def estimate_from_stages(stages: list[StageTime], samples: int) -> PerfEstimate:
    base = pipeline_time([s.baseline for s in stages], samples)
    piped = pipeline_time([s.pipelined for s in stages], samples)
    if piped <= 0:
        raise ZeroDivisionError("pipelined time is zero")
    compute = samples * sum(s.proc for s in stages)
    return PerfEstimate(base, piped, base / piped, stages, samples, compute)


def speedup(model, params: PerfParams, samples: int = 1) -> PerfEstimate:
    return estimate_from_stages(stage_breakdown(model, params), samples)


def parse_sweep(text: str) -> tuple[str, list[float]]:
    """``name=a:b:step`` (inclusive of b) -> (name, values)."""
    try:
        name, rng = text.split("=", 1)
        a, b, step = (float(v) for v in rng.split(":"))
    except ValueError as exc:
        raise ValueError(f"sweep must look like name=a:b:step, got {text!r}") from exc
    if step <= 0 or b < a:
        raise ValueError("sweep needs step > 0 and b >= a")
    n = int(math.floor((b - a) / step + 1e-9)) + 1
    return name.strip(), [a + i * step for i in range(n)]


def sweep(model, params: PerfParams, samples: int, name: str, values: Sequence[float]) -> list[PerfEstimate]:
    if name not in PerfParams.__dataclass_fields__:
        raise ValueError(f"cannot sweep unknown parameter {name!r}")
    return [speedup(model, replace(params, **{name: v}), samples) for v in values]
