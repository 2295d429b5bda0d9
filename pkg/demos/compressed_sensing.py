"""Recover images from Gaussian measurements with projected gradient descent.

Runs the plain data-fit solver (iflow) on clean measurements, then compares it
with the likelihood-regularised one (iflow-l) at 30 dB measurement noise.

    python3 demos/compressed_sensing.py --ckpt demos/out/desk.ckpt --m 32
"""

import argparse

import numpy as np

from trumpet import data as D
from trumpet import inverse as I
from trumpet import model as M
from trumpet.checkpoint import load_model
from trumpet.substrate import rng_key


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", default="demos/out/desk.ckpt")
    ap.add_argument("--m", type=int, default=32, help="number of measurements")
    ap.add_argument("--n", type=int, default=10, help="number of test images")
    args = ap.parse_args()
    model = load_model(args.ckpt)
    # held-out points of the training manifold (the seed fixes the embedding)
    test = D.train_test_split(D.synth_manifold(4, 64, 4096, seed=0), 0.9, 0)[1]
    truth = np.asarray(M.project(model, test.samples[:args.n]))

    for snr in (None, 30.0):
        # the likelihood weight is tied to the noise level, so iflow-l only runs with noise
        scores = {"iflow": []} if snr is None else {"iflow": [], "iflow-l": []}
        for i, x in enumerate(truth):
            op = I.gaussian_op(model.data_shape, args.m, seed=100 + i)
            y = I.op_apply(op, x)
            sigma = None
            if snr is not None:
                y, sigma = I.add_noise(y, snr, rng_key(i, 12))
            for method in scores:
                cfg = I.SolveConfig(eta=0.05, iters=300)
                if method == "iflow-l":
                    rho = I.choose_rho(model, op, y, cfg, noise_sigma=sigma)
                    cfg = I.SolveConfig(eta=0.05, rho=rho, iters=300, use_likelihood=True)
                try:
                    res = I.iflow_solve(model, op, y, cfg)
                    scores[method].append(I.snr_db(x, res.x))
                except I.SolverDivergence:
                    scores[method].append(-np.inf)
        label = "noiseless" if snr is None else f"{snr:.0f} dB noise"
        for method, s in scores.items():
            s = np.array(s)
            print(f"{label:>12}  {method:8s} median {np.median(s):6.2f} dB   >=20 dB on {np.mean(s >= 20):.0%}")


if __name__ == "__main__":
    main()
