"""Write the scikit-learn digits, rescaled to 20x20, as IDX train files."""

import argparse

from fprog.idx import make_digits_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    args = ap.parse_args()
    images, labels = make_digits_idx(args.out_dir)
    print(images)
    print(labels)


if __name__ == "__main__":
    main()
