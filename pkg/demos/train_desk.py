"""Train a small injective flow on a synthetic 4-d manifold in 8x8 images.

Phase one fits g so that g(g^+(x)) reconstructs the data; phase two fits the
bijective flow h to the preimages by maximum likelihood. The checkpoint is
reused by the other demos.

    python3 demos/train_desk.py --mse-epochs 40 --out demos/out/desk.ckpt
"""

import argparse
import time
from pathlib import Path

import numpy as np

from trumpet import data as D
from trumpet import model as M
from trumpet import training as TR
from trumpet.checkpoint import save_model
from trumpet.substrate import rng_key


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mse-epochs", type=int, default=40)
    ap.add_argument("--ml-epochs", type=int, default=20)
    ap.add_argument("--noise", type=float, default=0.1)
    ap.add_argument("--out", default="demos/out/desk.ckpt")
    args = ap.parse_args()

    # noisy training data keeps the projection close to orthogonal,
    # which the inverse-problem demo relies on
    train, _ = D.train_test_split(D.synth_manifold(4, 64, 4096, seed=0, noise=args.noise), 0.9, 0)
    clean_test = D.train_test_split(D.synth_manifold(4, 64, 4096, seed=0), 0.9, 0)[1]
    cfg = TR.TrainConfig(lr=3e-3, batch_size=64, mse_epochs=args.mse_epochs,
                         ml_epochs=args.ml_epochs, patience=args.mse_epochs, lr_decay="cosine")

    model = M.build(M.desk_train_spec(), rng_key(0))
    t0 = time.perf_counter()
    rows = []
    model = TR.train_mse_phase(model, train.samples, cfg, rows)
    print(f"mse phase: {len(rows)} epochs, {time.perf_counter() - t0:.0f}s")
    for row in rows[:: max(1, len(rows) // 8)]:
        print(f"  epoch {row['epoch']:4d}  loss {row['loss']:.5f}")
    print(f"clean test reconstruction error {TR.reconstruction_error(model, clean_test.samples):.4f}")

    rows = []
    model = TR.train_ml_phase(model, train.samples, cfg, rows)
    print(f"ml phase: nll {rows[0]['loss']:.3f} -> {rows[-1]['loss']:.3f}")

    nll = np.asarray(M.nll_bound(model, clean_test.samples[:256]))
    print(f"mean nll bound on test points {nll.mean():.3f}")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(out, model, seed=0)
    print(f"saved {out}")


if __name__ == "__main__":
    main()
