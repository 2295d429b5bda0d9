"""Compressive measurement operators and the projected-gradient MAP solver.

The solver alternates a projection onto the model range with one explicit
gradient step on ``1/2 ||y - A x||^2 + rho * nll_bound(P(x))``; with
``use_likelihood`` off the prior term is dropped (plain range-constrained
least squares).
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from trumpet.model import TrumpetModel, nll_bound_batch, project_batch
from trumpet.substrate import NumericalError, rng_key

__all__ = [
    "ForwardOp",
    "SolveConfig",
    "SolveResult",
    "SolverDivergence",
    "gaussian_op",
    "rand_mask_op",
    "superres_op",
    "block_mask_op",
    "parse_op",
    "op_apply",
    "op_adjoint",
    "op_init",
    "add_noise",
    "map_loss",
    "iflow_solve",
    "choose_rho",
    "snr_db",
    "write_results",
    "RESULT_COLUMNS",
]

SNR_CAP_DB = 120.0
DIVERGENCE_LOSS = 1e6
RESULT_COLUMNS = ("operator", "params", "method", "instance", "snr_db", "iterations", "wall_ms")
RHO_GRID = (0.0, 1e-4, 1e-3, 1e-2)


class SolverDivergence(NumericalError):
    """Loss exceeded the divergence threshold; ``trace`` holds the losses so far."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class ForwardOp:
    """A realised linear measurement operator on ``H x W x C`` images.

    ``matrix``/``pinv`` are used by ``gaussian``, ``mask`` by the two mask
    variants; unused arrays are empty.
    """

    matrix: jax.Array
    pinv: jax.Array
    mask: jax.Array
    kind: str = field(metadata={"static": True})
    shape: tuple = field(metadata={"static": True})
    params: tuple = field(metadata={"static": True}, default=())

    @property
    def label(self) -> str:
        return {"rand_mask": "randmask", "block_mask": "blockmask"}.get(self.kind, self.kind)

    @property
    def param_text(self) -> str:
        return ",".join(f"{k}={v}" for k, v in self.params)

    def param(self, name):
        return dict(self.params)[name]

    @property
    def measurement_shape(self) -> tuple:
        if self.kind == "gaussian":
            return (self.matrix.shape[0],)
        if self.kind == "superres":
            f = self.param("f")
            h, w, c = self.shape
            return (h // f, w // f, c)
        return tuple(self.shape)


_EMPTY = np.zeros((0,), np.float32)


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"image shape must be (H, W, C), got {shape}")
    return shape


def gaussian_op(shape, m: int, seed: int = 0, tikhonov: float = 1e-6) -> ForwardOp:
    """``m x D`` matrix with iid ``N(0, 1/m)`` entries."""
    shape = _check_shape(shape)
    dim = int(np.prod(shape))
    if not 1 <= m:
        raise ValueError("m must be positive")
    a = np.asarray(jax.random.normal(rng_key(seed, 7), (m, dim), jnp.float64)) / math.sqrt(m)
    # A^T (A A^T + lam I)^-1 == (A^T A + lam I)^-1 A^T
    pinv = a.T @ np.linalg.inv(a @ a.T + tikhonov * np.eye(m)) if m <= dim else \
        np.linalg.solve(a.T @ a + tikhonov * np.eye(dim), a.T)
    return ForwardOp(jnp.asarray(a, jnp.float32), jnp.asarray(pinv, jnp.float32), _EMPTY,
                     "gaussian", shape, (("m", m), ("seed", seed)))


def rand_mask_op(shape, p: float = 0.15, seed: int = 0) -> ForwardOp:
    """Each pixel zeroed independently with probability ``p`` (all channels together)."""
    shape = _check_shape(shape)
    if not 0.0 <= p < 1.0:
        raise ValueError("mask probability p must lie in [0, 1)")
    drop = np.asarray(jax.random.uniform(rng_key(seed, 8), shape[:2], jnp.float64)) < p
    mask = np.broadcast_to((~drop)[..., None], shape).astype(np.float32)
    return ForwardOp(_EMPTY, _EMPTY, jnp.asarray(mask), "rand_mask", shape, (("p", p), ("seed", seed)))


def superres_op(shape, factor: int = 4) -> ForwardOp:
    """``factor x factor`` average pooling per channel."""
    shape = _check_shape(shape)
    if factor < 1 or shape[0] % factor or shape[1] % factor:
        raise ValueError(f"factor {factor} must divide the spatial dims {shape[:2]}")
    return ForwardOp(_EMPTY, _EMPTY, _EMPTY, "superres", shape, (("f", factor),))


def block_mask_op(shape, s: int, top: int = 0, left: int = 0) -> ForwardOp:
    """Zero an ``s x s`` square whose top-left corner is ``(top, left)``."""
    shape = _check_shape(shape)
    if s < 1 or top < 0 or left < 0 or top + s > shape[0] or left + s > shape[1]:
        raise ValueError(f"block {s}x{s} at ({top}, {left}) does not fit in {shape[:2]}")
    mask = np.ones(shape, np.float32)
    mask[top:top + s, left:left + s, :] = 0.0
    return ForwardOp(_EMPTY, _EMPTY, jnp.asarray(mask), "block_mask", shape,
                     (("s", s), ("x", left), ("y", top)))


_OP_KEYS = {
    "gaussian": ({"m"}, {"seed"}),
    "randmask": ({"p"}, {"seed"}),
    "superres": ({"f"}, set()),
    "blockmask": ({"s"}, {"x", "y"}),
}


def parse_op(text: str, shape) -> ForwardOp:
    """Build an operator from ``name:key=value,...``.

    Examples: ``gaussian:m=32,seed=7``, ``randmask:p=0.15``, ``superres:f=4``,
    ``blockmask:s=8,x=4,y=4``.
    """
    name, _, rest = text.strip().partition(":")
    name = name.strip().lower()
    if name not in _OP_KEYS:
        raise ValueError(f"unknown operator {name!r}; expected one of {sorted(_OP_KEYS)}")
    kv = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, eq, val = item.partition("=")
        if not eq:
            raise ValueError(f"operator argument {item!r} is not key=value")
        kv[key.strip()] = val.strip()
    required, optional = _OP_KEYS[name]
    missing = required - kv.keys()
    unknown = kv.keys() - required - optional
    if missing or unknown:
        raise ValueError(f"operator {name}: missing {sorted(missing)}, unknown {sorted(unknown)}")
    try:
        if name == "gaussian":
            return gaussian_op(shape, int(kv["m"]), int(kv.get("seed", 0)))
        if name == "randmask":
            return rand_mask_op(shape, float(kv["p"]), int(kv.get("seed", 0)))
        if name == "superres":
            return superres_op(shape, int(kv["f"]))
        return block_mask_op(shape, int(kv["s"]), int(kv.get("y", 0)), int(kv.get("x", 0)))
    except ValueError as exc:
        raise ValueError(f"operator {text!r}: {exc}") from None


# --------------------------------------------------------------------------
# apply / adjoint / init on single images or batches


def _pool(x, f):
    n, h, w, c = x.shape
    return x.reshape(n, h // f, f, w // f, f, c).mean(axis=(2, 4))


def _upsample(y, f):
    return jnp.repeat(jnp.repeat(y, f, axis=1), f, axis=2)


def _batched(fn, x, ndim):
    x = jnp.asarray(x)
    single = x.ndim == ndim
    out = fn(x[None] if single else x)
    return out[0] if single else out


def op_apply(op: ForwardOp, x):
    """``y = A x``."""
    def fn(xb):
        if xb.shape[1:] != op.shape:
            raise ValueError(f"expected image shape {op.shape}, got {xb.shape[1:]}")
        if op.kind == "gaussian":
            return xb.reshape(xb.shape[0], -1) @ op.matrix.T.astype(xb.dtype)
        if op.kind == "superres":
            return _pool(xb, op.param("f"))
        return xb * op.mask.astype(xb.dtype)
    return _batched(fn, x, 3)


def op_adjoint(op: ForwardOp, y):
    """``A^T y``."""
    mshape = op.measurement_shape

    def fn(yb):
        if yb.shape[1:] != mshape:
            raise ValueError(f"expected measurement shape {mshape}, got {yb.shape[1:]}")
        if op.kind == "gaussian":
            return (yb @ op.matrix.astype(yb.dtype)).reshape((yb.shape[0],) + op.shape)
        if op.kind == "superres":
            f = op.param("f")
            return _upsample(yb, f) / (f * f)
        return yb * op.mask.astype(yb.dtype)
    return _batched(fn, y, len(mshape))


def op_init(op: ForwardOp, y):
    """Least-norm style start ``x0 = A^+ y``.

    Gaussian: Tikhonov pseudoinverse. Masks: zero-filled ``y``. Super-resolution:
    nearest-neighbour upsampling (adjoint times ``f^2``).
    """
    mshape = op.measurement_shape

    def fn(yb):
        if yb.shape[1:] != mshape:
            raise ValueError(f"expected measurement shape {mshape}, got {yb.shape[1:]}")
        if op.kind == "gaussian":
            return (yb @ op.pinv.T.astype(yb.dtype)).reshape((yb.shape[0],) + op.shape)
        if op.kind == "superres":
            return _upsample(yb, op.param("f"))
        return yb * op.mask.astype(yb.dtype)
    return _batched(fn, y, len(mshape))


def add_noise(y, snr: float, key):
    """Add white Gaussian noise at ``snr`` dB relative to ``||y||``.

    Returns:
        ``(noisy, sigma)`` with ``sigma`` the per-entry noise std.
    """
    y = jnp.asarray(y)
    e = jax.random.normal(key, y.shape, y.dtype)
    target = float(jnp.linalg.norm(y)) * 10.0 ** (-snr / 20.0)
    e = e * (target / float(jnp.linalg.norm(e)))
    return y + e, target / math.sqrt(y.size)


# --------------------------------------------------------------------------
# objective and solver


@dataclass(frozen=True)
class SolveConfig:
    """``eta`` step size, ``rho`` prior weight, ``iters`` iterations."""

    eta: float = 0.05
    rho: float = 0.0
    iters: int = 300
    use_likelihood: bool = False

    def __post_init__(self):
        if not self.eta > 0 or self.iters < 1 or self.rho < 0:
            raise ValueError("need eta > 0, iters >= 1 and rho >= 0")

    @property
    def method(self) -> str:
        return "iflow-l" if self.use_likelihood else "iflow"


def _loss(model, op, y, x, rho):
    r = (y - op_apply(op, x)).ravel()
    data = 0.5 * jnp.sum(r * r)
    prior = nll_bound_batch(model, project_batch(model, x[None]))[0]
    return data + rho * prior


def map_loss(model: TrumpetModel, op: ForwardOp, y, x, rho: float) -> float:
    """``1/2 ||y - A x||^2 + rho * nll_bound(P(x))`` for a single image."""
    x = jnp.asarray(x, jnp.float32)
    y = jnp.asarray(y, jnp.float32)
    if rho == 0:
        r = (y - op_apply(op, x)).ravel()
        return float(0.5 * jnp.sum(r * r))
    return float(_loss(model, op, y, x, rho))


def _data_loss(model, op, y, x, rho):
    del model, rho
    r = (y - op_apply(op, x)).ravel()
    return 0.5 * jnp.sum(r * r)


def _make_solver(with_prior: bool, iters: int):
    loss_fn = _loss if with_prior else _data_loss
    value_grad = jax.value_and_grad(loss_fn, argnums=3)

    def run(model, op, y, x0, eta, rho):
        def body(x, _):
            v = project_batch(model, x[None])[0]
            loss, grad = value_grad(model, op, y, v, rho)
            return v - eta * grad, loss
        x, trace = jax.lax.scan(body, x0, None, length=iters)
        return project_batch(model, x[None])[0], trace

    return jax.jit(run)


_SOLVERS: dict = {}


@dataclass(frozen=True)
class SolveResult:
    x: np.ndarray
    trace: np.ndarray
    iterations: int
    wall_ms: float


def iflow_solve(model: TrumpetModel, op: ForwardOp, y, cfg: SolveConfig = SolveConfig()) -> SolveResult:
    """Projected gradient descent from ``x0 = A^+ y``.

    Each iteration projects ``v = P(x)`` and steps ``x <- v - eta grad L(v)``;
    the result is the final projection. ``trace[t]`` is ``L(v_t)``.

    Raises:
        SolverDivergence: the loss exceeded ``1e6`` or became non-finite.
    """
    y = jnp.asarray(y, jnp.float32)
    if y.shape != op.measurement_shape:
        raise ValueError(f"measurement shape {y.shape} != operator output {op.measurement_shape}")
    key = (cfg.use_likelihood and cfg.rho > 0, cfg.iters)
    if key not in _SOLVERS:
        _SOLVERS[key] = _make_solver(*key)
    t0 = time.perf_counter()
    x0 = op_init(op, y)
    x, trace = _SOLVERS[key](model, op, y, x0, jnp.float32(cfg.eta), jnp.float32(cfg.rho))
    x = np.asarray(x)
    trace = np.asarray(trace, np.float64)
    wall_ms = (time.perf_counter() - t0) * 1e3
    bad = np.flatnonzero(~np.isfinite(trace) | (trace > DIVERGENCE_LOSS))
    if bad.size or not np.all(np.isfinite(x)):
        stop = int(bad[0]) + 1 if bad.size else len(trace)
        raise SolverDivergence(f"solver diverged at iteration {stop}", trace[:stop])
    return SolveResult(x, trace, cfg.iters, wall_ms)


def choose_rho(model, op, y, cfg: SolveConfig, noise_sigma: float | None = None, grid=RHO_GRID) -> float:
    """Prior weight: ``noise_sigma^2`` when the noise level is known, otherwise
    the grid value whose solution attains the smallest objective."""
    if noise_sigma is not None:
        return float(noise_sigma) ** 2
    best, best_loss = grid[0], math.inf
    for rho in grid:
        res = iflow_solve(model, op, y, SolveConfig(cfg.eta, rho, cfg.iters, rho > 0))
        loss = map_loss(model, op, y, res.x, rho)
        if loss < best_loss:
            best, best_loss = rho, loss
    return float(best)


def snr_db(reference, estimate) -> float:
    """``20 log10(||ref|| / ||ref - est||)``, capped at 120 dB."""
    ref = np.asarray(reference, np.float64)
    est = np.asarray(estimate, np.float64)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {est.shape}")
    num = np.linalg.norm(ref)
    if num == 0:
        raise ValueError("reference has zero norm")
    err = np.linalg.norm(ref - est)
    if err == 0:
        return SNR_CAP_DB
    return float(min(SNR_CAP_DB, 20.0 * np.log10(num / err)))


def write_results(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in RESULT_COLUMNS})
