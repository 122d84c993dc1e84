"""Speed-up of pipelined execution over store/fetch execution as memory latency grows."""

import argparse
from dataclasses import replace

import numpy as np

from fprog.cli import data_path
from fprog.model import load_model
from fprog.perfmodel import PRESETS, speedup, sweep
from fprog.report import write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default=str(data_path("vgg16.json")))
    ap.add_argument("--samples", type=int, default=10_000)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    model = load_model(args.model)
    for name, p in PRESETS.items():
        print(f"{name:14s} speedup {speedup(model, p, args.samples).speedup:8.3f}")

    latencies = np.linspace(0, 60, 13)
    rows = []
    for conflicts in (False, True):
        base = replace(PRESETS["external_dram"], bus_conflicts=conflicts)
        ests = sweep(model, base, args.samples, "dt_readmem", latencies)
        for v, e in zip(latencies, ests):
            rows.append([f"{v:g}", int(conflicts), f"{e.baseline_time:.6g}", f"{e.pipelined_time:.6g}", f"{e.speedup:.4f}"])
    print("\ndt_readmem  conflicts  speedup")
    for r in rows:
        print(f"{r[0]:>10}  {r[1]:>9}  {r[4]:>8}")
    if args.csv:
        write_csv(args.csv, ["dt_readmem", "bus_conflicts", "baseline_time", "pipelined_time", "speedup"], rows)


if __name__ == "__main__":
    main()
