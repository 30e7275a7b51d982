"""Distribution of closed-form vs Monte-Carlo z-scores over many random instances.

Under an unbiased oracle the signed z-scores should look standard normal.
"""
import argparse

import numpy as np

from disentangle import rng
from disentangle.checks import random_params
from disentangle.generative import MixingModel
from disentangle.metrics import mc_oracle_bundle, metric_bundle

ap = argparse.ArgumentParser()
ap.add_argument("--instances", type=int, default=40)
ap.add_argument("--n-x", type=int, default=50_000)
args = ap.parse_args()

names = ("elbo", "recon", "ci_loss", "mie", "tie")
z = {n: [] for n in names}
g = rng.stream(0, "zscores")
for i in range(args.instances):
    N = int(g.integers(1, 9))
    k = int(g.integers(1, min(N, 3) + 1))
    m = MixingModel.random(N, k, int(g.integers(2**31)))
    p = random_params(N, k, g)
    beta = float(np.exp(rng.normal(g, 1)[0]))
    closed = metric_bundle(p, m, beta)
    est, se = mc_oracle_bundle(p, m, beta, n_x=args.n_x, seed=i)
    for n in names:
        z[n].append((getattr(est, n) - getattr(closed, n)) / getattr(se, n))
for n in names:
    v = np.array(z[n])
    print(f"{n:8s} mean {v.mean():+.3f}  std {v.std(ddof=1):.3f}  max|z| {np.abs(v).max():.2f}")
