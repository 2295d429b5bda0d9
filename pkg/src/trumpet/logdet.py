"""Log-determinants of ``J^T J`` for the full network.

The stochastic estimator expands ``log det(J^T J) = tr log(alpha J^T J) - d log alpha``
as a truncated series in ``B = I - alpha J^T J`` and estimates each trace
with random probes, touching ``J`` only through JVP/VJP closures.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from trumpet.substrate import NumericalError, exact_jacobian, svd_small

__all__ = [
    "NeumannConfig",
    "max_singular_value",
    "neumann_logdet",
    "neumann_terms",
    "exact_logdet",
    "logdet_from_jacobian",
]

RANK_TOL = 1e-6
MAX_EXACT_DIM = 64


@dataclass(frozen=True)
class NeumannConfig:
    """Settings for :func:`neumann_logdet`.

    ``probe`` selects ``"gaussian"`` probes ``v ~ N(0, I)`` or ``"sphere"``
    probes (Gaussian directions rescaled to norm ``sqrt(d)``); both satisfy
    ``E[v v^T] = I``, the sphere variant drops the variance coming from the
    probe norm.
    """

    n_terms: int = 10
    n_probes: int = 8
    power_iters: int = 20
    safety: float = 0.9
    probe: str = "sphere"

    def __post_init__(self):
        if self.n_terms < 1 or self.n_probes < 1 or self.power_iters < 1:
            raise ValueError("n_terms, n_probes and power_iters must be positive")
        if not 0.0 < self.safety < 1.0:
            raise ValueError("safety must lie in (0, 1)")
        if self.probe not in ("gaussian", "sphere"):
            raise ValueError(f"unknown probe distribution {self.probe!r}")


def max_singular_value(jvp: Callable, vjp: Callable, dim: int, iters: int, key) -> float:
    """Power iteration on ``J^T J``; returns ``||J v|| / ||v||`` for the final iterate."""
    v = jax.random.normal(key, (dim,), jnp.float64)
    while not float(jnp.linalg.norm(v)) > 0:
        key = jax.random.fold_in(key, 1)
        v = jax.random.normal(key, (dim,), jnp.float64)
    v = v / jnp.linalg.norm(v)
    for _ in range(iters):
        u = vjp(jvp(v)).astype(jnp.float64)
        norm = jnp.linalg.norm(u)
        if not float(norm) > 0:
            return 0.0
        v = u / norm
    return float(jnp.linalg.norm(jvp(v).astype(jnp.float64)))


def _probes(key, dim, cfg):
    v = jax.random.normal(key, (cfg.n_probes, dim), jnp.float64)
    if cfg.probe == "sphere":
        v = v * (np.sqrt(dim) / jnp.linalg.norm(v, axis=1, keepdims=True))
    return v


def neumann_terms(jvp: Callable, vjp: Callable, v, alpha: float, n_terms: int):
    """Per-probe series ``sum_k v^T B^k v / k`` with ``B = I - alpha J^T J``.

    Accumulates ``w <- w - alpha J^T J w`` so ``w = B^k v`` after step ``k``.
    """
    gram = jax.vmap(lambda x: vjp(jvp(x)).astype(jnp.float64))
    w = v
    acc = jnp.zeros(v.shape[0], jnp.float64)
    for k in range(1, n_terms + 1):
        w = w - alpha * gram(w)
        acc = acc + jnp.sum(w * v, axis=1) / k
    return acc


def neumann_logdet(jvp: Callable, vjp: Callable, dim: int, cfg: NeumannConfig | None = None,
                   key=None, return_probes: bool = False):
    """Stochastic ``log|det J^T J|`` from JVP/VJP closures.

    ``alpha = safety / s_max^2`` places the spectrum of ``I - alpha J^T J``
    in ``[0, 1 - safety / cond^2]``.

    Returns:
        the probe-averaged estimate, or the per-probe estimates when
        ``return_probes`` is set.
    """
    cfg = cfg or NeumannConfig()
    key = jax.random.PRNGKey(0) if key is None else key
    k_power, k_probe = jax.random.split(key)
    s_max = max_singular_value(jvp, vjp, dim, cfg.power_iters, k_power)
    if not s_max > 0:
        raise NumericalError("largest singular value estimate is not positive")
    alpha = cfg.safety / s_max**2
    per_probe = -neumann_terms(jvp, vjp, _probes(k_probe, dim, cfg), alpha, cfg.n_terms) - dim * np.log(alpha)
    per_probe = np.asarray(per_probe)
    if not np.all(np.isfinite(per_probe)):
        raise NumericalError("Neumann series produced non-finite values")
    return per_probe if return_probes else float(per_probe.mean())


def logdet_from_jacobian(jac) -> float:
    """``2 sum log s_i`` of a dense Jacobian, rejecting numerical rank loss."""
    s, _, _ = svd_small(jac)
    if s.size == 0 or not s[-1] > RANK_TOL * s[0]:
        raise NumericalError("Jacobian is rank deficient (map not injective here)")
    return float(2.0 * np.sum(np.log(s)))


def exact_logdet(jvp: Callable, dim: int) -> float:
    """Oracle ``log det(J^T J)`` from ``dim`` JVP columns."""
    if dim > MAX_EXACT_DIM:
        raise ValueError(f"exact log-det limited to d <= {MAX_EXACT_DIM}")
    jac = exact_jacobian(jvp, np.zeros(dim))
    return logdet_from_jacobian(jac)
