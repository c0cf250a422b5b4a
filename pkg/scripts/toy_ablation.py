"""Run the three default segmentation-loss configurations on toy data and print the comparison table.

Row ordering at this scale says nothing about the full-size experiment; this only exercises the harness.
"""

import argparse
import sys
from pathlib import Path

from nanosynth.cli import main as cli
from nanosynth.toy import make_toy_pairs, write_dataset

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("out_dir")
    ap.add_argument("--epochs", type=int, default=5)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    out = Path(args.out_dir)
    data = write_dataset(make_toy_pairs(16, 64, seed=0), out / "data")
    return cli(["ablate", "--config", str(HERE / "toy.yaml"), "--data-root", str(data), "--out-dir",
                str(out / "ablation"), "--epochs", str(args.epochs), "--seed", str(args.seed)])


if __name__ == "__main__":
    sys.exit(main())
