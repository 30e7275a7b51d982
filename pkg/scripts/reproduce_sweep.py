"""Linear beta-VAE sweep on N=128, k=2 with the monotonicity checks.

    python3 scripts/reproduce_sweep.py --out runs/sweep
"""
import argparse
import sys

from disentangle.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seed", default="0")
    a = ap.parse_args()
    sys.exit(main(["sweep", "--preset", "paper-fig3", "--seed", a.seed, "--out", a.out]))
