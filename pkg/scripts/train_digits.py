"""Train the 400-25-10 network through the systolic simulator on IDX digits.

Creates the digit files first when the data directory has none.
"""

import argparse
import time
from pathlib import Path

from fprog.cli import data_path, train_demo
from fprog.idx import TRAIN_IMAGES, load_digits_idx, make_digits_idx
from fprog.model import load_model


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--data", default="digits_idx")
    ap.add_argument("--samples", type=int, default=1000)
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    d = Path(args.data)
    if not (d / TRAIN_IMAGES).exists() and not (d / (TRAIN_IMAGES + ".gz")).exists():
        make_digits_idx(d)
    model = load_model(data_path("mlp_400_25_10.json"))
    x, labels = load_digits_idx(d, limit=args.samples)
    t0 = time.perf_counter()
    res = train_demo(model, x, labels, args.epochs, args.seed)
    for i, (loss, acc) in enumerate(zip(res["losses"], res["accuracy"])):
        print(f"epoch {i}: loss {loss:.4f}  accuracy {acc:.3f}")
    print(f"steps {len(res['steps'])}, max systolic/dense deviation {res['max_deviation']:.2e}, "
          f"{time.perf_counter() - t0:.1f} s")


if __name__ == "__main__":
    main()
