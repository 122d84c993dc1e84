"""Command-line entry point: analyze, synth, simulate, perf, enhance-demo, train-demo."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import analyzer, enhancement, fabric, perfmodel
from .idx import DatasetError, load_digits_idx
from .model import ModelError, load_model
from .numerics import (
    copy_params,
    cross_entropy_loss,
    dense_backward,
    dense_forward,
    gd_update,
    init_params,
    max_rel_error,
    one_hot,
    predict,
)
from .report import RunManifest, aligned, csv_text, text_report
from .systolic import F_CONVENTION_NOTE, REFERENCE_PULSES, SimulationFault, SystolicSimulator, UnsupportedLayer

log = logging.getLogger("fprog")

EXIT_OK, EXIT_INVALID, EXIT_FAULT = 0, 1, 2
BUNDLED = {"vgg16": "vgg16.json", "mlp": "mlp_400_25_10.json", "mlp_400_25_10": "mlp_400_25_10.json"}
GEOMETRIES = {"vgg16": "geometry_vgg16.json", "small": "geometry_small.json"}


def data_path(name: str) -> Path:
    return Path(str(resources.files("fprog") / "data" / name))


def resolve(path: str | None, bundled: dict) -> Path | None:
    """A file path, or the name of a bundled data file."""
    if path is None:
        return None
    if path in bundled and not Path(path).exists():
        return data_path(bundled[path])
    return Path(path)


def _is_empty_model(path: Path) -> bool:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return False
    return isinstance(doc, dict) and doc.get("layers") == []


def _config(args: argparse.Namespace) -> dict:
    skip = {"func", "csv", "manifest_out", "trace"}
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items()) if k not in skip}


def _emit(args, title: str, body: str, header, rows, manifest: RunManifest, notes=()) -> None:
    print(text_report(title, body, manifest), end="")
    if args.csv:
        text = csv_text(header, rows, manifest)
        text += "".join(f"# {n}\n" for n in notes)
        if args.csv == "-":
            sys.stdout.write(text)
        else:
            Path(args.csv).write_text(text)
    if args.manifest_out:
        Path(args.manifest_out).write_text(manifest.to_json())


# -- analyze -------------------------------------------------------------------------


def cmd_analyze(args) -> int:
    path = resolve(args.model, BUNDLED)
    manifest = RunManifest.build("analyze", _config(args), args.seed, [path])
    if _is_empty_model(path):
        _emit(args, "Allocation", aligned(analyzer.TABLE_COLUMNS, []), analyzer.TABLE_COLUMNS, [], manifest)
        return EXIT_OK
    model = load_model(path, strict=not args.lax)
    stats = analyzer.layer_stats(model, standard_params=args.standard_params)
    plan = analyzer.allocate_workers(stats, args.workers)
    proxy = analyzer.delay_proxy(plan)
    body = analyzer.format_table(plan) + f"\n\ndelay proxy spread (max/min load per worker): {proxy.spread:.4f}"
    rows = analyzer.table_rows(plan, thousands=False)
    _emit(args, f"Allocation: {model.name or path.name}", body, analyzer.TABLE_COLUMNS, rows, manifest,
          analyzer.footnotes(plan))
    return EXIT_OK


# -- synth ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    path = resolve(args.model, BUNDLED)
    geo_path = resolve(args.geometry, GEOMETRIES)
    manifest = RunManifest.build("synth", _config(args), args.seed, [path, geo_path])
    model = load_model(path, strict=not args.lax)
    stats = analyzer.layer_stats(model)
    plan = analyzer.allocate_workers(stats, args.workers) if args.workers else analyzer.one_to_one_plan(stats)
    geometry = fabric.Geometry.load(geo_path) if geo_path else fabric.geometry_for(plan, 16)
    layout = fabric.synthesize(plan, geometry, model.layers)
    header, rows = fabric.layout_report(layout)
    merged = layout.merged_workers()
    idle_t = sum(f.idle for f in layout.tensor_fields)
    idle_p = sum(f.idle for f in layout.pixel_fields)
    lines = [
        aligned(header, rows),
        "",
        f"workers placed: {len(layout.workers)}  unplaced: {layout.unplaced_workers}",
        f"idle tensor elements: {idle_t}  idle pixel elements: {idle_p}",
        f"merged workers (spanning fields): {len(merged)}",
    ]
    lines += [f"  worker {w.worker_id} layer {w.layer} tensor {w.tensor_segments} pixel {w.pixel_segments}"
              for w in merged[: args.list_merged]]
    links = [(l.src_layer, l.dst_layer, l.total) for l in layout.links]
    lines += ["", "links per layer pair: " + ", ".join(f"{a}->{b}: {n}" for a, b, n in links)]
    _emit(args, "Fabric layout", "\n".join(lines), header, rows, manifest)
    return EXIT_OK


# -- simulate ------------------------------------------------------------------------


def _records(model, workers: int | None):
    stats = analyzer.layer_stats(model)
    plan = analyzer.one_to_one_plan(stats) if not workers else analyzer.simulation_plan(stats, workers)
    layout = fabric.synthesize(plan, fabric.geometry_for(plan, 16), model.layers)
    return fabric.assign_identities(layout)


def cmd_simulate(args) -> int:
    path = resolve(args.model, BUNDLED)
    manifest = RunManifest.build("simulate", _config(args), args.seed, [path])
    model = load_model(path, strict=not args.lax)
    rng = np.random.default_rng(args.seed)
    params = init_params(model, args.seed)
    x = rng.random((args.batch, *model.input_shape))
    n_out = analyzer.layer_stats(model)[-1].activation_count
    y = one_hot(rng.integers(0, n_out, args.batch), n_out)
    sim = SystolicSimulator(model, params, _records(model, args.workers), crossover=not args.no_crossover)
    res = sim.train_step(x, y, model.hyper.learning_rate)
    cache = dense_forward(model, params, x)
    ref = dense_backward(model, params, cache, y)
    dev_out = max_rel_error(res.outputs, cache.outputs[-1].reshape(args.batch, -1))
    new = gd_update(params, ref.grads, model.hyper.learning_rate)
    dev_w = max(
        (max_rel_error(a["w"], b["w"]) for a, b in zip(sim.params, new) if a is not None and "w" in a),
        default=0.0,
    )
    rep = res.report
    lines = [
        f"pulses F={rep.pulses_F} B={rep.pulses_B} U={rep.pulses_U} total={rep.total}",
        f"reference F={REFERENCE_PULSES['F']} B={REFERENCE_PULSES['B']} U={REFERENCE_PULSES['U']} (400-25-10 network)",
        F_CONVENTION_NOTE,
        f"crossover: {'off' if args.no_crossover else 'on'}",
        f"max relative deviation vs dense: outputs {dev_out:.3e}, updated weights {dev_w:.3e}",
    ]
    header = ["state", "src_layer", "dst_layer", "pulses"]
    rows = [[s.state, s.src_layer, s.dst_layer, s.pulses] for s in rep.stages]
    if args.trace:
        Path(args.trace).write_text(csv_text(["pulse", "stage", "frames_in_flight"], rep.trace, manifest))
    _emit(args, "Systolic simulation", "\n".join(lines) + "\n\n" + aligned(header, rows), header, rows, manifest)
    return EXIT_OK


# -- perf ----------------------------------------------------------------------------


def cmd_perf(args) -> int:
    path = resolve(args.model, BUNDLED)
    manifest = RunManifest.build("perf", _config(args), args.seed, [path, args.params])
    model = load_model(path, strict=not args.lax)
    params = perfmodel.load_params(args.params, preset=args.preset)
    est = perfmodel.speedup(model, params, args.samples)
    header = ["parameter", "value", "baseline_time", "pipelined_time", "speedup"]
    if args.sweep:
        name, values = perfmodel.parse_sweep(args.sweep)
        ests = perfmodel.sweep(model, params, args.samples, name, values)
        rows = [[name, f"{v:g}", f"{e.baseline_time:.6g}", f"{e.pipelined_time:.6g}", f"{e.speedup:.6g}"]
                for v, e in zip(values, ests)]
    else:
        rows = [["-", "-", f"{est.baseline_time:.6g}", f"{est.pipelined_time:.6g}", f"{est.speedup:.6g}"]]
    stage_rows = [[s.label, s.workers, f"{s.proc:.4f}", f"{s.baseline:.4f}", f"{s.transfer:.4f}",
                   f"{s.pipelined:.4f}"] for s in est.stages]
    lines = [
        f"memory: {params.memory_kind}  read={params.dt_readmem:g} write={params.dt_writemem:g} "
        f"proc={params.dt_procW:g} bus factor={params.conflict:g}  samples={args.samples}",
        f"baseline {est.baseline_time:.6g}  pipelined {est.pipelined_time:.6g}  speedup {est.speedup:.4f}",
        "preset latencies are artifact-defined calibrations, not measured values",
        "",
        aligned(["stage", "workers", "proc", "baseline", "transfer", "pipelined"], stage_rows),
    ]
    if args.sweep:
        lines += ["", aligned(header, rows)]
    _emit(args, "Speed-up estimate", "\n".join(lines), header, rows, manifest)
    return EXIT_OK


# -- enhance-demo --------------------------------------------------------------------


def _fixture(name: str, mask: int, seed: int):
    if name == "two-blob":
        a, propagate, aligned_cell, isolated = enhancement.two_blob_fixture(size=3 * mask, mask_size=mask)
        return a, propagate, aligned_cell
    if name == "random":
        rng = np.random.default_rng(seed)
        a = rng.random((4 * mask + 1, 4 * mask + 1, 4))
        w = rng.standard_normal((4, 3))
        return a, (lambda x: np.maximum(x @ w, 0.0)), None
    raise ValueError(f"unknown fixture {name!r}; choose two-blob or random")


def cmd_enhance(args) -> int:
    manifest = RunManifest.build("enhance-demo", _config(args), args.seed)
    a, propagate, cell = _fixture(args.fixture, args.mask, args.seed)
    link = enhancement.FeedbackLink(0, 1, args.iterations)
    res = enhancement.single_loop_feedback(link, a, propagate, args.mask, method=args.method)
    before = res.shallow_original.coefficients
    after = res.shallow_combined.coefficients
    header = ["row", "col", "coefficient_before", "coefficient_after"]
    rows = [[r, c, f"{before[r, c]:.12g}", f"{after[r, c]:.12g}"] for r in range(before.shape[0])
            for c in range(before.shape[1])]
    enhanced_before = enhancement.apply(a, res.shallow_original)
    enhanced_after = enhancement.apply(a, res.shallow_combined)
    lines = [
        f"fixture {args.fixture}, mask {args.mask}, iterations {args.iterations}, sweep pulses {res.pulses}",
        f"activation mean/max before: {enhanced_before.mean():.6g}/{enhanced_before.max():.6g}",
        f"activation mean/max after:  {enhanced_after.mean():.6g}/{enhanced_after.max():.6g}",
    ]
    if cell is not None:
        lines.append(f"aligned cell {cell}: {before[cell]:.6g} -> {after[cell]:.6g}")
    lines += ["", "before:", np.array2string(before, precision=4), "after:", np.array2string(after, precision=4)]
    _emit(args, "Enhancement demo", "\n".join(lines), header, rows, manifest)
    return EXIT_OK


# -- train-demo ----------------------------------------------------------------------


def train_demo(model, x: np.ndarray, labels: np.ndarray, epochs: int, seed: int = 0, check: bool = True,
               records=None) -> dict:
    """Train through the systolic simulator, cross-checking each step against the dense reference.

    Returns per-epoch losses and accuracies (entry 0 is before training) and
    per-step rows ``(epoch, step, batch loss, F, B, U, max relative deviation)``.
    """
    n_out = analyzer.layer_stats(model)[-1].activation_count
    y = one_hot(labels, n_out)
    params = init_params(model, seed)
    sim = SystolicSimulator(model, params, records)
    h = model.hyper
    size = {"GD": len(x), "miniBatchGD": h.batch_size, "SGD": 1}[h.batch_mode]
    rng = np.random.default_rng(seed)

    def evaluate(p):
        out = predict(model, p, x)
        return cross_entropy_loss(out, y), float(np.mean(out.argmax(axis=1) == labels))

    loss, acc = evaluate(sim.params)
    losses, accs, steps = [loss], [acc], []
    worst = 0.0
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(x))
        for k, start in enumerate(range(0, len(x), size)):
            idx = order[start : start + size]
            before = copy_params(sim.params)
            res = sim.train_step(x[idx], y[idx], h.learning_rate)
            dev = 0.0
            if check:
                cache = dense_forward(model, before, x[idx])
                ref = dense_backward(model, before, cache, y[idx])
                after = gd_update(before, ref.grads, h.learning_rate)
                dev = max_rel_error(res.outputs, cache.outputs[-1].reshape(len(idx), -1))
                for s, g in zip(res.backward_sums, ref.activation_grads):
                    if s is not None and g is not None:
                        dev = max(dev, max_rel_error(s, g.reshape(len(idx), -1)))
                for p_sim, p_ref in zip(sim.params, after):
                    if p_sim is not None and "w" in p_sim:
                        dev = max(dev, max_rel_error(p_sim["w"], p_ref["w"]), max_rel_error(p_sim["b"], p_ref["b"]))
                worst = max(worst, dev)
            r = res.report
            steps.append((epoch, k, res.loss, r.pulses_F, r.pulses_B, r.pulses_U, dev))
        loss, acc = evaluate(sim.params)
        losses.append(loss)
        accs.append(acc)
        log.info("epoch %d loss %.6f accuracy %.4f", epoch, loss, acc)
    return {"losses": losses, "accuracy": accs, "steps": steps, "max_deviation": worst, "params": sim.params}


def cmd_train(args) -> int:
    path = resolve(args.model, BUNDLED)
    if args.data is None:
        raise DatasetError("--data is required (a directory with train-images/train-labels IDX files)")
    manifest = RunManifest.build("train-demo", _config(args), args.seed, [path])
    model = load_model(path, strict=not args.lax)
    x, labels = load_digits_idx(args.data, limit=args.samples, size=model.input_shape[0])
    if x.shape[1:] != tuple(model.input_shape):
        raise DatasetError(f"dataset images {x.shape[1:]} do not fit model input {model.input_shape}")
    result = train_demo(model, x, labels, args.epochs, args.seed, check=not args.no_check)
    header = ["epoch", "step", "batch_loss", "pulses_F", "pulses_B", "pulses_U", "max_rel_deviation"]
    rows = [[e, k, f"{l:.12g}", f, b, u, f"{d:.3e}"] for e, k, l, f, b, u, d in result["steps"]]
    lines = [f"samples {len(x)}, epochs {args.epochs}, batch mode {model.hyper.batch_mode}"]
    lines += [f"epoch {i}: loss {l:.6f} accuracy {a:.4f}" for i, (l, a) in
              enumerate(zip(result["losses"], result["accuracy"]))]
    if result["steps"]:
        _, _, _, f, b, u, _ = result["steps"][0]
        lines.append(f"pulses per step: F={f} B={b} U={u}")
        lines.append(f"max relative deviation systolic vs dense: {result['max_deviation']:.3e}")
    _emit(args, "Training demo", "\n".join(lines), header, rows, manifest)
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def _globals(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p.add_argument("--seed", type=int, default=d(0), help="random seed")
    p.add_argument("--csv", default=d(None), metavar="PATH", help="also write CSV ('-' for stdout)")
    p.add_argument("--manifest-out", default=d(None), metavar="PATH", help="write the run manifest as JSON")
    p.add_argument("--lax", action="store_true", default=d(False), help="ignore unknown model-file keys")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fprog", description=__doc__)
    _globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        _globals(p, suppress=True)
        p.set_defaults(func=func)
        return p

    p = add("analyze", cmd_analyze, "per-layer statistics and worker allocation table")
    p.add_argument("--model", default="vgg16")
    p.add_argument("--workers", type=int, default=100_000)
    p.add_argument("--standard-params", action="store_true")

    p = add("synth", cmd_synth, "place workers onto tensor/pixel fields")
    p.add_argument("--model", default="vgg16")
    p.add_argument("--workers", type=int, default=None, help="omit for a 1-node:1-worker layout")
    p.add_argument("--geometry", default=None, help="geometry JSON file or bundled name (vgg16, small)")
    p.add_argument("--list-merged", type=int, default=20, help="merged workers to list")

    p = add("simulate", cmd_simulate, "one F/B/U training step through the systolic simulator")
    p.add_argument("--model", default="mlp")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--no-crossover", action="store_true")
    p.add_argument("--trace", default=None, metavar="PATH")

    p = add("perf", cmd_perf, "speed-up of pipelined execution over store/fetch execution")
    p.add_argument("--model", default="vgg16")
    p.add_argument("--params", default=None)
    p.add_argument("--preset", choices=sorted(perfmodel.PRESETS), default=None)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--sweep", default=None, metavar="NAME=A:B:STEP")

    p = add("enhance-demo", cmd_enhance, "coefficient grids before/after a feedback loop")
    p.add_argument("--fixture", default="two-blob")
    p.add_argument("--mask", type=int, default=3)
    p.add_argument("--iterations", type=int, default=1)
    p.add_argument("--method", choices=("softmax", "linear"), default="softmax")

    p = add("train-demo", cmd_train, "train the digit MLP through the simulator")
    p.add_argument("--model", default="mlp")
    p.add_argument("--data", default=None, help="directory holding IDX train images/labels")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--no-check", action="store_true", help="skip the dense cross-check")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("FPROG_LOG", "WARNING").upper(), format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except SimulationFault as exc:
        print(f"simulation fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except (ModelError, DatasetError, UnsupportedLayer, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
