"""``trumpet`` command line: train, sample, invert, uq, verify.

Exit codes: 0 ok, 1 property failure, 2 usage or config error, 3 I/O or
format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("trumpet")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers


def _load_ckpt(path):
    from trumpet.checkpoint import CheckpointError, load_model

    try:
        return load_model(path)
    except CheckpointError as exc:
        raise CliError(EXIT_IO, f"bad checkpoint {path}: {exc}") from None


def _pad_to(samples: np.ndarray, shape) -> np.ndarray:
    h, w, c = shape
    n, sh, sw, sc = samples.shape
    if (sh, sw, sc) == (h, w, c):
        return samples
    if sc != c or sh > h or sw > w:
        raise CliError(EXIT_IO, f"data shape {samples.shape[1:]} does not fit model shape {shape}")
    top, left = (h - sh) // 2, (w - sw) // 2
    out = np.full((n, h, w, c), -1.0, samples.dtype)
    out[:, top:top + sh, left:left + sw] = samples
    return out


def _load_data(source: str, cfg):
    """Dataset from ``synth`` (the ``[data]`` recipe), a saved container or an IDX file."""
    from trumpet import data as D
    from trumpet.checkpoint import MAGIC, CheckpointError

    shape = cfg.model.data_shape
    if source == "synth":
        dc = cfg.data
        try:
            return D.synth_manifold(dc.intrinsic_dim, int(np.prod(shape)), dc.n, seed=dc.seed,
                                    noise=dc.noise, shape=shape, curvature=dc.curvature)
        except ValueError as exc:
            raise CliError(EXIT_IO, f"cannot synthesise data: {exc}") from None
    path = Path(source)
    try:
        head = path.read_bytes()[:len(MAGIC)]
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read data {source}: {exc.strerror}") from None
    try:
        if head == MAGIC:
            ds = D.load_dataset(path)
        else:
            ds = D.normalize_pm1(D.load_idx(path))
    except (CheckpointError, D.IdxFormatError, ValueError) as exc:
        raise CliError(EXIT_IO, f"bad data file {source}: {exc}") from None
    return replace(ds, samples=_pad_to(ds.samples.astype(np.float32), shape))


def _input_image(source: str, model, seed: int) -> np.ndarray:
    """Ground-truth image: a PNG path, or ``sample`` for a draw from the model."""
    import jax

    from trumpet.images import load_png
    from trumpet.model import generate
    from trumpet.substrate import rng_key

    if source == "sample":
        z = jax.random.normal(rng_key(seed, 11), (model.latent_dim,), np.float32)
        return np.asarray(generate(model, z))
    try:
        img = load_png(source)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read image {source}: {exc}") from None
    if img.shape != model.data_shape:
        raise CliError(EXIT_IO, f"image shape {img.shape} != model data shape {model.data_shape}")
    return img


def _operator(text: str, shape):
    from trumpet.inverse import parse_op

    try:
        return parse_op(text, shape)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None


def _measure(op, x, noise_db, seed):
    from trumpet.inverse import add_noise, op_apply
    from trumpet.substrate import rng_key

    y = np.asarray(op_apply(op, x))
    if noise_db is None:
        return y, None
    noisy, sigma = add_noise(y, noise_db, rng_key(seed, 12))
    return np.asarray(noisy), sigma


def _out_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create {out}: {exc.strerror}") from None
    return out


def _unit_map(a):
    a = np.asarray(a, np.float64)
    top = float(a.max())
    return a / top if top > 0 else a


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    import jax

    from trumpet.checkpoint import save_model
    from trumpet.config import ConfigError, load_config
    from trumpet.data import train_test_split
    from trumpet.model import build
    from trumpet.substrate import rng_key
    from trumpet.training import reconstruction_error, train_ml_phase, train_mse_phase, write_log

    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        raise CliError(EXIT_USAGE, f"config error: {exc}") from None
    if args.seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=args.seed), data=replace(cfg.data, seed=args.seed))
    ds = _load_data(args.data, cfg)
    train, test = train_test_split(ds, cfg.data.train_fraction, cfg.data.seed)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_name("train_log.csv")
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
        log_path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory: {exc}") from None
    model = build(cfg.model, rng_key(cfg.train.seed))
    rows = []

    def snapshot(phase):
        every = cfg.train.checkpoint_every

        def cb(epoch, m):
            if every and (epoch + 1) % every == 0:
                save_model(out.with_name(f"{out.name}.{phase}{epoch + 1}"), m, cfg.train.seed)
        return cb

    model = train_mse_phase(model, train.samples, cfg.train, rows, snapshot("mse"))
    model = train_ml_phase(model, train.samples, cfg.train, rows, snapshot("ml"))
    leaves = [np.asarray(a) for a in jax.tree_util.tree_leaves(model)]
    if not all(np.all(np.isfinite(a)) for a in leaves):
        write_log(rows, log_path)
        raise CliError(EXIT_NUMERIC, f"training produced non-finite parameters; see {log_path}")
    try:
        save_model(out, model, cfg.train.seed)
        write_log(rows, log_path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write outputs: {exc}") from None
    err = reconstruction_error(model, test.samples)
    print(f"wrote {out} and {log_path}; test reconstruction error {err:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    import jax

    from trumpet.images import save_grid, write_matrix_csv
    from trumpet.model import generate
    from trumpet.substrate import rng_key

    if args.n < 1 or args.temperature < 0:
        raise CliError(EXIT_USAGE, "need --n >= 1 and --temperature >= 0")
    model = _load_ckpt(args.ckpt)
    out = _out_dir(args.out)
    z = jax.random.normal(rng_key(args.seed or 0, 5), (args.n, model.latent_dim), np.float32)
    x = np.asarray(generate(model, z, args.temperature))
    save_grid(out / "samples.png", x)
    write_matrix_csv(out / "latents.csv", np.asarray(z) * np.float32(args.temperature),
                     [f"z{i}" for i in range(model.latent_dim)])
    print(f"wrote {len(x)} samples to {out / 'samples.png'}")
    return EXIT_OK


def cmd_invert(args) -> int:
    from trumpet.images import save_png, write_matrix_csv
    from trumpet.inverse import SolveConfig, SolverDivergence, choose_rho, iflow_solve, snr_db

    model = _load_ckpt(args.ckpt)
    op = _operator(args.op, model.data_shape)
    seed = args.seed or 0
    x = _input_image(args.input, model, seed)
    y, sigma = _measure(op, x, args.noise_db, seed)
    use_l = args.method == "iflow-l"
    try:
        base = SolveConfig(args.eta, 0.0, args.iters, use_l)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    rho = 0.0
    if use_l:
        rho = args.rho if args.rho is not None else choose_rho(model, op, y, base, sigma)
    try:
        res = iflow_solve(model, op, y, replace(base, rho=rho))
    except SolverDivergence as exc:
        raise CliError(EXIT_NUMERIC, f"{exc}; last losses {exc.trace[-3:].tolist()}") from None
    out = _out_dir(args.out)
    snr = snr_db(x, res.x)
    save_png(out / "xhat.png", res.x)
    save_png(out / "truth.png", x)
    write_matrix_csv(out / "xhat.csv", res.x.reshape(1, -1))
    write_matrix_csv(out / "trace.csv", np.column_stack([np.arange(len(res.trace)), res.trace]),
                     ["iteration", "loss"])
    print(f"snr_db {snr:.4f}  method {args.method}  rho {rho:g}  iterations {res.iterations}")
    return EXIT_OK


def cmd_uq(args) -> int:
    from trumpet.images import save_grid, save_png, write_matrix_csv
    from trumpet.substrate import rng_key
    from trumpet.uq import UqConfig, pixelwise_stats, sample_posterior, spectral_uncertainty, train_posterior

    if args.samples < 2:
        raise CliError(EXIT_USAGE, "--samples must be at least 2 for pixelwise statistics")
    if args.p not in (1, 2):
        raise CliError(EXIT_USAGE, "--p must be 1 or 2")
    try:
        cfg = UqConfig(beta=args.beta, sigma=args.sigma, steps=args.steps, lr=args.lr)
    except ValueError as exc:
        raise CliError(EXIT_USAGE, str(exc)) from None
    model = _load_ckpt(args.ckpt)
    op = _operator(args.op, model.data_shape)
    seed = args.seed or 0
    x = _input_image(args.input, model, seed)
    y, _ = _measure(op, x, args.noise_db, seed)
    flow = train_posterior(model, op, y, cfg, rng_key(seed, 20))
    samples = sample_posterior(model, flow, args.samples, rng_key(seed, 21))
    if not np.all(np.isfinite(samples)):
        raise CliError(EXIT_NUMERIC, "posterior samples are not finite")
    mean, dev = pixelwise_stats(samples, args.p)
    _, var = pixelwise_stats(samples, 2)
    spectral = spectral_uncertainty(samples)
    out = _out_dir(args.out)
    save_png(out / "mean.png", mean)
    save_png(out / "deviation.png", _unit_map(dev), 0.0, 1.0)
    save_png(out / "spectral.png", _unit_map(np.fft.fftshift(spectral, axes=(0, 1))), 0.0, 1.0)
    save_grid(out / "samples.png", samples[:64])
    for name, arr in (("mean", mean), ("deviation", dev), ("spectral", spectral)):
        write_matrix_csv(out / f"{name}.csv", arr.reshape(arr.shape[0], -1))
    print(f"mean_pixel_std {float(np.mean(np.sqrt(var))):.6g}  beta {args.beta:g}  samples {args.samples}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from trumpet.verify import SUITES, format_table, inject_rank_deficiency, random_model, run_suites

    seed = args.seed or 0
    if args.random_model == (args.ckpt is not None):
        raise CliError(EXIT_USAGE, "give exactly one of --ckpt or --random-model")
    model = random_model(seed) if args.random_model else _load_ckpt(args.ckpt)
    if args.inject_rank_deficient:
        model = inject_rank_deficiency(model)
    suites = SUITES if args.suite == "all" else (args.suite,)
    rows = run_suites(model, suites, seed)
    print(format_table(rows))
    failed = [r for r in rows if r.counted and not r.passed]
    print(f"{len(rows) - len(failed)}/{len(rows)} checks passed" if not failed
          else f"{len(failed)} check(s) failed")
    return EXIT_PROPERTY if failed else EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="global RNG seed")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="trumpet", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="global RNG seed")
    parser.add_argument("-v", "--verbose", action="store_true", default=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="two-phase training")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default="synth", help="'synth', an IDX file or a saved dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="training CSV (default: train_log.csv next to --out)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", parents=[common], help="draw samples")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    def problem(p):
        p.add_argument("--ckpt", required=True)
        p.add_argument("--op", required=True, help="e.g. gaussian:m=32,seed=7 or superres:f=4")
        p.add_argument("--input", default="sample", help="PNG path or 'sample' (a draw from the model)")
        p.add_argument("--noise-db", type=float, default=None)
        p.add_argument("--out", required=True)

    p = sub.add_parser("invert", parents=[common], help="MAP reconstruction")
    problem(p)
    p.add_argument("--method", choices=("iflow", "iflow-l"), default="iflow")
    p.add_argument("--eta", type=float, default=0.05)
    p.add_argument("--rho", type=float, default=None)
    p.add_argument("--iters", type=int, default=300)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("uq", parents=[common], help="posterior sampling and uncertainty maps")
    problem(p)
    p.add_argument("--beta", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=256)
    p.add_argument("--p", type=int, default=2)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_uq)

    p = sub.add_parser("verify", parents=[common], help="property suites")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--random-model", action="store_true")
    p.add_argument("--suite", choices=("layers", "logdet", "bounds", "errors", "grads", "all"), default="all")
    p.add_argument("--inject-rank-deficient", action="store_true",
                   help="zero a column of the first injective kernel before checking")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from trumpet.substrate import NumericalError

    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except NumericalError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
