"""Executable property suites for a model: layer contracts, log-det
estimators, likelihood-bound bookkeeping, noise/error laws and training
gradients. Each check returns a row ``(suite, name, passed, detail)``.

Rows with ``counted=False`` are diagnostics: they are printed but do not
affect the exit status.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from trumpet import layers as L
from trumpet import logdet as LD
from trumpet.model import (
    TrumpetModel,
    build,
    desk_spec,
    f_forward,
    f_inverse,
    g_inverse,
    generate,
    model_jacobian,
    model_jvp_vjp,
    nll_bound,
    project_batch,
    randomize,
)
from trumpet.substrate import exact_jacobian, finite_difference_jacobian, rng_key, svd_small
from trumpet.training import ml_loss, mse_loss

__all__ = [
    "Check",
    "SUITES",
    "random_model",
    "run_suites",
    "format_table",
    "inject_rank_deficiency",
    "layer_inputs",
    "gradient_check",
    "inversion_error_ratio",
    "reprojection_slope",
]

SUITES = ("layers", "logdet", "bounds", "errors", "grads")


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    passed: bool
    detail: str = ""
    counted: bool = True


def random_model(seed: int = 0, spec=None, strength: float = 0.3, cond: float = 1.5) -> TrumpetModel:
    """Desk-scale model with every parameter perturbed away from identity."""
    spec = spec or desk_spec()
    return randomize(build(spec, rng_key(seed)), rng_key(seed, 1), strength=strength, cond=cond)


def inject_rank_deficiency(model: TrumpetModel) -> TrumpetModel:
    """Zero the first column of the first injective kernel (a constructed failure)."""
    g = list(model.g)
    for i, layer in enumerate(g):
        if isinstance(layer, L.Conv1x1) and not layer.bijective:
            g[i] = replace(layer, w=layer.w.at[:, 0].set(0.0))
            return replace(model, g=tuple(g))
    raise ValueError("model has no injective conv")


def layer_inputs(model: TrumpetModel, z):
    """``[(layer, input)]`` for every layer of ``f`` on one latent, ``h`` first."""
    out = []
    a = jnp.asarray(z).reshape(1, 1, 1, -1)
    for layer in model.h:
        out.append((layer, a))
        a = layer.forward(a)
    a = a.reshape((1,) + model.spec.latent_shape)
    for layer in model.g:
        out.append((layer, a))
        a = layer.forward(a)
    return out


_f_inverse = jax.jit(f_inverse)


def _oracle_gram(layer, x):
    jac = exact_jacobian(lambda v: layer.forward(v[None])[0], np.asarray(x[0], np.float64))
    s, _, _ = svd_small(jac)
    return float(2.0 * np.sum(np.log(s))), s


def _rel(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-30))


# --------------------------------------------------------------------------
# suites


def _suite_layers(model, key):
    rows = []
    m64 = model.astype(jnp.float64)
    z = jax.random.normal(key, (model.latent_dim,), jnp.float64)
    worst = {"roundtrip": 0.0, "adjoint": 0.0, "logdet": 0.0, "fd": 0.0}
    for i, (layer, x) in enumerate(layer_inputs(m64, z)):
        y = layer.forward(x)
        worst["roundtrip"] = max(worst["roundtrip"], _rel(layer.inverse(y), x))
        ku, kv = jax.random.split(jax.random.fold_in(key, i))
        u = jax.random.normal(ku, x.shape, x.dtype)
        v = jax.random.normal(kv, y.shape, y.dtype)
        lhs = float(jnp.vdot(L.layer_jvp(layer, x, u), v))
        rhs = float(jnp.vdot(u, L.layer_vjp(layer, x, v)))
        worst["adjoint"] = max(worst["adjoint"], abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-12))
        oracle, _ = _oracle_gram(layer, x)
        worst["logdet"] = max(worst["logdet"], abs(float(layer.gram_logdet(x)[0]) - oracle))
        fn = lambda a: layer.forward(a[None])[0]  # noqa: E731
        jac = exact_jacobian(fn, np.asarray(x[0]))
        fd = finite_difference_jacobian(fn, np.asarray(x[0]))
        worst["fd"] = max(worst["fd"], _rel(fd, jac))
    rows.append(Check("layers", "round-trip inverse(forward(x)) rel err <= 1e-4",
                      worst["roundtrip"] <= 1e-4, f"max {worst['roundtrip']:.2e}"))
    rows.append(Check("layers", "jvp/vjp adjoint identity rel err <= 1e-5",
                      worst["adjoint"] <= 1e-5, f"max {worst['adjoint']:.2e}"))
    rows.append(Check("layers", "layer log|det J^T J| vs oracle abs err <= 1e-3",
                      worst["logdet"] <= 1e-3, f"max {worst['logdet']:.2e}"))
    rows.append(Check("layers", "exact vs finite-difference Jacobian rel err <= 1e-3",
                      worst["fd"] <= 1e-3, f"max {worst['fd']:.2e}"))
    return rows


def _suite_logdet(model, key, n_points: int = 2):
    rows = []
    cfg = LD.NeumannConfig(n_terms=10, n_probes=64)
    errs, ok_all, sv_errs = [], True, []
    for i in range(n_points):
        kz, kp, ks = jax.random.split(jax.random.fold_in(key, i), 3)
        z = jax.random.normal(kz, (model.latent_dim,), jnp.float32)
        s = np.linalg.svd(model_jacobian(model, z), compute_uv=False)
        exact = float(2.0 * np.sum(np.log(s)))
        jvp, vjp = model_jvp_vjp(model, z)
        s_max = LD.max_singular_value(jvp, vjp, model.latent_dim, cfg.power_iters, ks)
        sv_errs.append(abs(s_max - s[0]) / s[0])
        probes = LD.neumann_logdet(jvp, vjp, model.latent_dim, cfg, kp, return_probes=True)
        est = float(probes.mean())
        stderr = float(probes.std(ddof=1) / math.sqrt(len(probes)))
        rho = 1.0 - cfg.safety * (s[-1] / s_max) ** 2
        n = cfg.n_terms
        bias = len(s) * rho ** (n + 1) / ((n + 1) * (1.0 - rho))
        ok = abs(est - exact) <= bias + 4.0 * stderr + 1e-6
        ok_all &= ok
        errs.append(f"{abs(est - exact) / max(abs(exact), 1e-12):.3f}")
    rows.append(Check("logdet", "power iteration s_max within 2% of oracle",
                      max(sv_errs) <= 0.02, f"max rel err {max(sv_errs):.2e}"))
    rows.append(Check("logdet", "Neumann estimate within truncation bound + 4 std errors",
                      bool(ok_all), "rel errors " + ", ".join(errs)))
    return rows


def _suite_bounds(model, key, n_points: int = 3):
    rows = []
    mins = []
    for layer in model.g:
        if isinstance(layer, L.Conv1x1):
            s, _, _ = svd_small(np.asarray(layer.w, np.float64))
            mins.append(s[-1] / s[0] if s[0] > 0 else 0.0)
    rows.append(Check("bounds", "every conv kernel has full column rank",
                      min(mins) > 1e-6, f"min s_min/s_max {min(mins):.2e}"))
    if not rows[-1].passed:
        return rows
    m64 = model.astype(jnp.float64)
    term_err, gaps = 0.0, []
    for i in range(n_points):
        z = jax.random.normal(jax.random.fold_in(key, i), (model.latent_dim,), jnp.float32)
        x = generate(model, z)
        bound = float(nll_bound(model, x))
        z_rec = np.asarray(_f_inverse(model, x[None]))[0]
        oracle_terms = 0.0
        for layer, a in layer_inputs(m64, jnp.asarray(z_rec, jnp.float64)):
            val, _ = _oracle_gram(layer, a)
            oracle_terms += 0.5 * val
        prior = 0.5 * float(np.sum(z_rec.astype(np.float64) ** 2)) + 0.5 * len(z_rec) * math.log(2 * math.pi)
        term_err = max(term_err, abs(bound - (prior + oracle_terms)))
        s = np.linalg.svd(model_jacobian(model, z_rec), compute_uv=False)
        gaps.append(bound - (prior + float(np.sum(np.log(s)))))
    rows.append(Check("bounds", "nll_bound equals prior + layerwise oracle log-dets (abs <= 1e-3)",
                      term_err <= 1e-3, f"max abs err {term_err:.2e}"))
    rows.append(Check("bounds", "chain bound gap nll_bound - nll_exact (diagnostic)",
                      min(gaps) >= -1e-6, "gaps " + ", ".join(f"{g:+.3f}" for g in gaps), counted=False))
    return rows


def inversion_error_ratio(key, mode: str = "injective-linear", c: int = 2, sigma: float = 0.1,
                          draws: int = 10_000) -> float:
    """Monte-Carlo ``E||w^+(y + e) - x||^2`` over its predicted value.

    The prediction is ``sigma^2 sum s_i^-2``, doubled for the ReLU variant.
    """
    kw, kx, ke = jax.random.split(key, 3)
    rows = 2 * c if mode == "injective-linear" else c
    w = L.orthogonal_kernel(kw, rows, c, jnp.float64) @ jnp.diag(jnp.linspace(0.5, 2.0, c))
    conv = L.Conv1x1.from_kernel(w, mode, 0.0)
    x = jax.random.normal(kx, (1, 1, 1, c), jnp.float64)
    y = conv.forward(x)
    noise = sigma * jax.random.normal(ke, (draws,) + y.shape[1:], jnp.float64)
    err = conv.inverse(y + noise) - x
    mc = float(jnp.mean(jnp.sum(err.reshape(draws, -1) ** 2, axis=1)))
    s = np.linalg.svd(np.asarray(conv.w), compute_uv=False)
    factor = 2.0 if mode == "injective-relu" else 1.0
    return mc / (factor * sigma ** 2 * float(np.sum(s ** -2.0)))


def reprojection_slope(model: TrumpetModel, key, sigmas=(1e-3, 3e-3, 1e-2, 3e-2), draws: int = 512) -> float:
    """Log-log slope of ``E||P(x + e) - x||^2`` against ``sigma^2`` at an in-range ``x``."""
    m64 = model.astype(jnp.float64)
    kz, ke = jax.random.split(key)
    z = jax.random.normal(kz, (1, model.latent_dim), jnp.float64)
    x = f_forward(m64, z)
    proj = jax.jit(project_batch)
    errs = []
    for i, s in enumerate(sigmas):
        e = s * jax.random.normal(jax.random.fold_in(ke, i), (draws,) + x.shape[1:], jnp.float64)
        p = proj(m64, x + e)
        errs.append(float(jnp.mean(jnp.sum((p - x).reshape(draws, -1) ** 2, axis=1))))
    return float(np.polyfit(np.log(np.square(sigmas)), np.log(errs), 1)[0])


def _suite_errors(model, key):
    rows = []
    k1, k2, k3 = jax.random.split(key, 3)
    r_lin = inversion_error_ratio(k1, "injective-linear")
    r_relu = inversion_error_ratio(k2, "injective-relu")
    rows.append(Check("errors", "linear inversion error / sigma^2 sum s^-2 in [0.9, 1.1]",
                      0.9 <= r_lin <= 1.1, f"ratio {r_lin:.4f}"))
    rows.append(Check("errors", "relu inversion error / 2 sigma^2 sum s^-2 in [0.9, 1.1]",
                      0.9 <= r_relu <= 1.1, f"ratio {r_relu:.4f}"))
    slope = reprojection_slope(model, k3)
    rows.append(Check("errors", "re-projection error vs sigma^2 log-log slope 1.0 +- 0.1",
                      abs(slope - 1.0) <= 0.1, f"slope {slope:.4f}"))
    return rows


def gradient_check(loss, params, args, h: float = 1e-3, chunk: int = 256):
    """Per-leaf relative error between autodiff and central differences.

    ``loss(params, *args)`` is evaluated in float64.

    Returns:
        list of ``(leaf_index, rel_err, grad_norm)``.
    """
    params = jax.tree_util.tree_map(lambda a: jnp.asarray(a, jnp.float64), params)
    flat, unravel = ravel_pytree(params)
    grad = np.asarray(jax.jit(jax.grad(lambda v: loss(unravel(v), *args)))(flat))
    # Sequential map: vmapping over per-example weights lowers to slow grouped convs.
    batched = jax.jit(lambda vs: jax.lax.map(lambda v: loss(unravel(v), *args), vs))
    n = flat.size
    fd = np.empty(n)
    for start in range(0, n, chunk):
        idx = np.arange(start, min(start + chunk, n))
        steps = jnp.zeros((len(idx), n), jnp.float64).at[np.arange(len(idx)), idx].set(h)
        fd[idx] = np.asarray((batched(flat + steps) - batched(flat - steps)) / (2 * h))
    out = []
    offset = 0
    for i, leaf in enumerate(jax.tree_util.tree_leaves(params)):
        size = leaf.size
        a, b = grad[offset:offset + size], fd[offset:offset + size]
        offset += size
        norm = float(np.linalg.norm(b))
        err = float(np.linalg.norm(a - b)) / norm if norm > 1e-8 else float(np.linalg.norm(a - b))
        out.append((i, err, norm))
    return out


def _suite_grads(model, key):
    rows = []
    m64 = model.astype(jnp.float64)
    z = jax.random.normal(key, (1, model.latent_dim), jnp.float64)
    x = f_forward(m64, z) + 0.05 * jax.random.normal(jax.random.fold_in(key, 1), (1,) + model.data_shape)
    res = gradient_check(lambda g, b: mse_loss(g, m64, b), m64.g, (x,))
    worst = max(r[1] for r in res)
    rows.append(Check("grads", "MSE-phase gradients vs central differences rel err <= 1e-3",
                      worst <= 1e-3, f"max {worst:.2e} over {len(res)} tensors"))
    zp = g_inverse(m64, x)
    res = gradient_check(lambda hh, b: ml_loss(hh, m64, b), m64.h, (zp,))
    worst = max(r[1] for r in res)
    rows.append(Check("grads", "ML-phase gradients vs central differences rel err <= 1e-3",
                      worst <= 1e-3, f"max {worst:.2e} over {len(res)} tensors"))
    return rows


_RUNNERS = {
    "layers": _suite_layers,
    "logdet": _suite_logdet,
    "bounds": _suite_bounds,
    "errors": _suite_errors,
    "grads": _suite_grads,
}


def run_suites(model: TrumpetModel, suites=SUITES, seed: int = 0) -> list[Check]:
    rows = []
    for i, name in enumerate(suites):
        if name not in _RUNNERS:
            raise ValueError(f"unknown suite {name!r}")
        try:
            rows += _RUNNERS[name](model, rng_key(seed, 100 + i))
        except (ArithmeticError, ValueError) as exc:
            rows.append(Check(name, "suite raised", False, f"{type(exc).__name__}: {exc}"))
    return rows


def format_table(rows) -> str:
    width = max((len(r.name) for r in rows), default=10)
    lines = []
    for r in rows:
        status = "PASS" if r.passed else ("FAIL" if r.counted else "WARN")
        lines.append(f"{status:4}  {r.suite:7}  {r.name:<{width}}  {r.detail}")
    return "\n".join(lines)
