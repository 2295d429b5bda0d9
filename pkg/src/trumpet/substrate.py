"""Numeric foundation: tensors, seeded keys, small dense decompositions and
the brute-force differentiation oracles the rest of the package is checked
against.

Oracles always work in float64 regardless of the dtype of the map they probe.
"""

from __future__ import annotations

from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

__all__ = [
    "NumericalError",
    "as_tensor",
    "rng_key",
    "exact_jacobian",
    "finite_difference_jacobian",
    "svd_small",
    "fft2",
    "ifft2",
]

MAX_ORACLE_DIM = 512
MAX_SVD_ENTRIES = 262144
JACOBI_SWEEPS = 100


class NumericalError(ArithmeticError):
    """A computation hit a numerically pathological input."""


def as_tensor(x, dtype=jnp.float32, name: str = "tensor") -> jax.Array:
    """Convert ``x`` to a 1-4 dimensional array, rejecting NaN/Inf."""
    arr = jnp.asarray(x, dtype=dtype)
    if not 1 <= arr.ndim <= 4:
        raise ValueError(f"{name}: expected 1 to 4 dimensions, got shape {arr.shape}")
    if not bool(jnp.all(jnp.isfinite(arr))):
        raise ValueError(f"{name}: contains non-finite values")
    return arr


def rng_key(seed: int, stream: int = 0) -> jax.Array:
    """Threefry key for a ``(seed, stream)`` pair.

    The generator is counter based, so keys derived from the same pair give
    identical draws on every platform; independent workers get distinct
    ``stream`` values instead of sharing one key.
    """
    if not 0 <= seed < 2**64 or not 0 <= stream < 2**64:
        raise ValueError("seed and stream must be unsigned 64-bit integers")
    key = jax.random.PRNGKey(np.uint64(seed))
    hi, lo = divmod(int(stream), 2**32)
    if hi:
        key = jax.random.fold_in(key, np.uint32(hi))
    return jax.random.fold_in(key, np.uint32(lo))


def _flatten_map(fn: Callable, point) -> tuple[Callable, jax.Array]:
    x = jnp.asarray(point, dtype=jnp.float64)
    if x.size > MAX_ORACLE_DIM:
        raise ValueError(f"oracle input dimension {x.size} exceeds {MAX_ORACLE_DIM}")
    shape = x.shape

    def flat_fn(v):
        return jnp.ravel(fn(v.reshape(shape))).astype(jnp.float64)

    return flat_fn, jnp.ravel(x)


def _jvp_columns(fn, point):
    flat_fn, flat = _flatten_map(fn, point)
    basis = jnp.eye(flat.size, dtype=jnp.float64)
    _, cols = jax.vmap(lambda e: jax.jvp(flat_fn, (flat,), (e,)))(basis)
    return cols


# A Partial is a pytree, so one compilation serves every parameter value.
_jvp_columns_jit = jax.jit(_jvp_columns)


def exact_jacobian(fn: Callable, point) -> np.ndarray:
    """Dense Jacobian of ``fn`` at ``point``, one JVP per input coordinate.

    Args:
        fn: differentiable map; input and output may have any shape, they are
            flattened row-major. A ``jax.tree_util.Partial`` is compiled once
            per wrapped function and argument structure, other callables run
            eagerly.
        point: evaluation point, at most 512 entries.

    Returns:
        float64 array of shape ``(out_size, in_size)``.
    """
    if jnp.size(point) > MAX_ORACLE_DIM:
        raise ValueError(f"oracle input dimension {jnp.size(point)} exceeds {MAX_ORACLE_DIM}")
    if isinstance(fn, jax.tree_util.Partial):
        cols = _jvp_columns_jit(fn, jnp.asarray(point, jnp.float64))
    else:
        cols = _jvp_columns(fn, point)
    jac = np.asarray(cols, dtype=np.float64).T
    if not np.all(np.isfinite(jac)):
        raise NumericalError("non-finite Jacobian entries")
    return jac


def finite_difference_jacobian(fn: Callable, point, h: float = 1e-3) -> np.ndarray:
    """Central-difference Jacobian, column i = (f(x + h e_i) - f(x - h e_i)) / 2h."""
    if not h > 0:
        raise ValueError("step h must be positive")
    flat_fn, flat = _flatten_map(fn, point)
    steps = h * jnp.eye(flat.size, dtype=jnp.float64)
    plus = jax.vmap(flat_fn)(flat + steps)
    minus = jax.vmap(flat_fn)(flat - steps)
    jac = np.asarray((plus - minus) / (2.0 * h), dtype=np.float64).T
    if not np.all(np.isfinite(jac)):
        raise NumericalError("non-finite finite-difference entries")
    return jac


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    # Circle method: n-1 rounds of n/2 disjoint pairs covering every pair once.
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def svd_small(m, tol: float = 1e-15) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thin SVD by one-sided Jacobi rotations in float64.

    Disjoint column pairs are rotated together (round-robin ordering), so a
    sweep costs ``n - 1`` vectorised steps.

    Returns:
        ``(s, u, v)`` with ``s`` descending and non-negative and
        ``m ~= u @ diag(s) @ v.T``.

    Raises:
        NumericalError: no convergence within 100 sweeps.
    """
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a matrix, got shape {a.shape}")
    if a.size > MAX_SVD_ENTRIES:
        raise ValueError(f"matrix with {a.size} entries exceeds {MAX_SVD_ENTRIES}")
    if not np.all(np.isfinite(a)):
        raise NumericalError("non-finite matrix entries")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    rows, cols = a.shape
    work = a.copy()
    v = np.eye(cols)
    n = cols + (cols % 2)
    if n > cols:
        work = np.hstack([work, np.zeros((rows, 1))])
        v = np.pad(v, ((0, 1), (0, 1)))
    schedule = _round_robin(n) if n > 1 else []

    for _ in range(JACOBI_SWEEPS):
        rotated = False
        for p, q in schedule:
            wp, wq = work[:, p], work[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            safe = np.where(active, gamma, 1.0)
            zeta = (beta - alpha) / (2.0 * safe)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t = np.where(zeta == 0.0, 1.0, t)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            c = np.where(active, c, 1.0)
            s = np.where(active, s, 0.0)
            work[:, p], work[:, q] = c * wp - s * wq, s * wp + c * wq
            vp, vq = v[:, p], v[:, q]
            v[:, p], v[:, q] = c * vp - s * vq, s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericalError(f"Jacobi SVD did not converge in {JACOBI_SWEEPS} sweeps")

    work, v = work[:, :cols], v[:cols, :cols]
    sing = np.linalg.norm(work, axis=0)
    order = np.argsort(-sing, kind="stable")
    sing, work, v = sing[order], work[:, order], v[:, order]
    u = np.divide(work, sing, out=np.zeros_like(work), where=sing > 0)
    if transposed:
        return sing, v, u
    return sing, u, v


def _check_pow2(shape) -> None:
    for n in shape:
        if n < 1 or n & (n - 1):
            raise ValueError(f"spatial dims must be powers of two, got {tuple(shape)}")


def fft2(image, axes=(-2, -1)) -> np.ndarray:
    """Unitary 2-D DFT over ``axes`` (power-of-two sizes only)."""
    arr = np.asarray(image)
    _check_pow2([arr.shape[a] for a in axes])
    return np.fft.fft2(arr, axes=axes, norm="ortho")


def ifft2(spectrum, axes=(-2, -1)) -> np.ndarray:
    arr = np.asarray(spectrum)
    _check_pow2([arr.shape[a] for a in axes])
    return np.fft.ifft2(arr, axes=axes, norm="ortho")
