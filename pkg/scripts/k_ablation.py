#!/usr/bin/env python3
"""Desk-scale refinement-depth ablation: quality at K = 1..3 from one
checkpoint, plus the per-image contraction of successive predictions."""

import argparse

from topodelin.experiments import (k_trend, run_trend_training, trend_dataset)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--quiet", action="store_true")
    args = parser.parse_args()
    verbose = None if args.quiet else print
    tr, te = trend_dataset()
    runs = []
    for seed in args.seeds:
        run = run_trend_training(tr, te, mu=0.1, seed=seed, verbose=verbose)
        runs.append(run)
        print(f"seed {seed}: quality " +
              " ".join(f"K{k}={run.quality_by_k[k]:.4f}" for k in (1, 2, 3)) +
              f"  contraction {run.contraction_fraction:.2f}")
    summary = k_trend(runs)
    print(f"median quality: K1 {summary['median_quality_k1']:.4f} -> "
          f"K3 {summary['median_quality_k3']:.4f}")
    print(f"min fraction of test images with shrinking prediction change: "
          f"{summary['min_contraction_fraction']:.2f}")


if __name__ == "__main__":
    main()
