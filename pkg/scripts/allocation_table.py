"""Print the VGG-16 equal-delay worker allocation and its delay-proxy spread."""

import argparse

from fprog.analyzer import TABLE_COLUMNS, allocate_workers, delay_proxy, format_table, layer_stats, table_rows
from fprog.cli import data_path
from fprog.model import load_model
from fprog.report import write_csv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", default=str(data_path("vgg16.json")))
    ap.add_argument("--workers", type=int, default=100_000)
    ap.add_argument("--csv", default=None)
    args = ap.parse_args()

    model = load_model(args.model)
    plan = allocate_workers(layer_stats(model), args.workers)
    print(format_table(plan))
    proxy = delay_proxy(plan)
    print(f"\nload per worker, max/min over loaded layers: {proxy.spread:.4f}")
    if args.csv:
        write_csv(args.csv, TABLE_COLUMNS, table_rows(plan))


if __name__ == "__main__":
    main()
