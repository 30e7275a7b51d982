"""MIE against beta when the decoder is pinned to the true mixing matrix."""
import argparse

import numpy as np

from disentangle.generative import MixingModel
from disentangle.linear_bvae import SolverConfig
from disentangle.sweep import fixed_decoder_sweep, log_grid

ap = argparse.ArgumentParser()
ap.add_argument("--count", type=int, default=17)
args = ap.parse_args()

grid = log_grid(0.25, 4.0, args.count)
for label, m in (("scalar", MixingModel(np.array([[1.0]]))), ("N=8 k=2", MixingModel.paper(8, 2)),
                 ("N=128 k=2", MixingModel.paper(128, 2))):
    recs = fixed_decoder_sweep(m, m.A, grid, SolverConfig(restarts=4))
    mie = np.array([r.bundle.mie for r in recs])
    print(f"{label}: MIE argmin beta = {grid[np.argmin(mie)]:.4g}")
    for r in recs:
        print(f"  beta={r.beta:8.4f}  mie={r.bundle.mie:.6g}  tie={r.bundle.tie:.6g}")
