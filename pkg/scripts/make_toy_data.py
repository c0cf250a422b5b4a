"""Write the procedural toy dataset (images/ + masks/) used by the smoke experiments."""

import argparse

from nanosynth.toy import make_toy_pairs, write_dataset


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--density", type=float, default=1.0, help="scales the particle count range")
    args = ap.parse_args()
    root = write_dataset(make_toy_pairs(args.n, args.size, args.seed, args.density), args.out_dir)
    print(f"{args.n} pairs written to {root}")


if __name__ == "__main__":
    main()
