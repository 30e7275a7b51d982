"""Desk-scale deep beta-VAE runs on the localisation dataset.

    python3 scripts/desk_deep.py --out runs/desk --jobs 4
"""
import argparse
import sys

from disentangle.cli import main

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--jobs", default="1")
    ap.add_argument("--realizations", default="5")
    a = ap.parse_args()
    sys.exit(main(["train-deep", "--preset", "desk", "--realizations", a.realizations,
                   "--jobs", a.jobs, "--out", a.out]))
