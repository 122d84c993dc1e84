"""Pulse counts of one training step on the 400-25-10 network, and stage pulses vs layer width."""

import argparse

import numpy as np

from fprog.cli import data_path
from fprog.model import load_model
from fprog.numerics import init_params, one_hot
from fprog.systolic import F_CONVENTION_NOTE, REFERENCE_PULSES, run_state_machine, stage_pulses


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    model = load_model(data_path("mlp_400_25_10.json"))
    rng = np.random.default_rng(args.seed)
    x = rng.random((1, *model.input_shape))
    y = one_hot([int(rng.integers(10))], 10)
    for crossover in (True, False):
        _, rep, _ = run_state_machine(model, init_params(model, args.seed), x, y, crossover=crossover)
        print(f"crossover={crossover!s:5}  F={rep.pulses_F:4d}  B={rep.pulses_B:3d}  U={rep.pulses_U:4d}")
        for s in rep.stages:
            print(f"    {s.state} {s.src_layer}->{s.dst_layer}: {s.pulses}")
    print(f"reference: {REFERENCE_PULSES}")
    print(F_CONVENTION_NOTE)
    print("\nwidth  ring+crossover  linear chain")
    for n in (1, 2, 10, 25, 64, 256, 400, 1024):
        print(f"{n:5d}  {stage_pulses(n):14d}  {stage_pulses(n, False):12d}")


if __name__ == "__main__":
    main()
