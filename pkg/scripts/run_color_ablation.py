#!/usr/bin/env python3
"""Colour-space ablation: train the seven flow/colour configurations on one
synthetic dataset and leave a learning-curve CSV per configuration.

Usage: python3 scripts/run_color_ablation.py [workdir] [--steps N] [--seed S]
"""

import argparse
import sys
from pathlib import Path

from dflow.cli import main as dflow


def run(argv):
    print("$ dflow " + " ".join(argv), file=sys.stderr)
    rc = dflow(argv)
    if rc != 0:
        sys.exit(rc)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("workdir", nargs="?", default="color_ablation")
    ap.add_argument("--steps", type=int, default=300)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()

    work = Path(args.workdir)
    dataset = work / "dataset"
    seed = str(args.seed)

    run(["synth", "--out", str(dataset), "--seed", seed])
    run(["ablate", "--dataset", str(dataset), "--out", str(work / "curves"),
         "--seed", seed, "--steps", str(args.steps)])
    print(f"\nlearning curves under {(work / 'curves').resolve()}")


if __name__ == "__main__":
    main()
