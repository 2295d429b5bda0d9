"""Posterior sampling for an inpainting problem and the effect of beta.

A small flow in latent space is trained so that pushing its samples through
the generator explains the measurement; beta scales the entropy term, so
larger beta spreads the samples out.

    python3 demos/posterior_uq.py --ckpt demos/out/desk.ckpt
"""

import argparse
from pathlib import Path

import numpy as np

from trumpet import data as D
from trumpet import inverse as I
from trumpet import model as M
from trumpet import uq as U
from trumpet.checkpoint import load_model
from trumpet.images import save_grid, save_png
from trumpet.substrate import rng_key


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--ckpt", default="demos/out/desk.ckpt")
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--out", default="demos/out")
    args = ap.parse_args()
    model = load_model(args.ckpt)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    test = D.train_test_split(D.synth_manifold(4, 64, 4096, seed=0), 0.9, 0)[1]
    x = np.asarray(M.project(model, test.samples[:1]))[0]
    op = I.block_mask_op(model.data_shape, 4, top=2, left=2)
    y, sigma = I.add_noise(I.op_apply(op, x), 10.0, rng_key(0, 5))
    save_png(out / "uq_truth.png", x)

    for beta in (0.0, 0.5, 1.0, 2.0):
        cfg = U.UqConfig(beta=beta, sigma=sigma, steps=args.steps)
        flow = U.train_posterior(model, op, y, cfg, rng_key(0, 20))
        samples = U.sample_posterior(model, flow, 256, rng_key(0, 21))
        mean, dev = U.pixelwise_stats(samples)
        spec = U.spectral_uncertainty(samples)
        print(f"beta={beta:<4} mean pixel std {np.sqrt(dev).mean():.4f}   "
              f"snr of mean {I.snr_db(x, mean):6.2f} dB   spectral spread {spec.mean():.4f}")
        save_grid(out / f"uq_samples_beta{beta}.png", samples[:16], cols=4)


if __name__ == "__main__":
    main()
