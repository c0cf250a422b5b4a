"""Train from scratch on toy pairs for a few hundred steps and report loss and SSIM trends per seed."""

import argparse
import json
import statistics

import torch

from nanosynth.toy import cycle_smoke


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=200)
    ap.add_argument("--pairs", type=int, default=16)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--json", help="also dump the per-step totals here")
    args = ap.parse_args()
    torch.set_num_threads(args.threads)

    runs = []
    for seed in args.seeds:
        r = cycle_smoke(seed=seed, steps=args.steps, n_pairs=args.pairs, size=args.size, log_every=50)
        runs.append(r)
        print(f"seed {seed}: generator_total {r['generator_total'][0]:.3f} -> {r['generator_total'][-1]:.3f}  "
              f"ssim {r['ssim_before']:.3f} -> {r['ssim_after']:.3f}  finite={r['finite']}")
    first = statistics.median(r["generator_total"][0] for r in runs)
    last = statistics.median(r["generator_total"][-1] for r in runs)
    print(f"median generator_total: step 1 {first:.3f}, step {args.steps} {last:.3f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(runs, fh)


if __name__ == "__main__":
    main()
