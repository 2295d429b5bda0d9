"""Two-phase training.

The MSE phase fits the injective stack ``g`` so that its range projection
reproduces the data; the ML phase then fits the latent bijection ``h`` to
the preimages ``g^+(x)`` by maximum likelihood with ``g`` frozen.
"""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np

from trumpet import layers as L
from trumpet.model import (
    TrumpetModel,
    g_inverse,
    h_inverse_logdet,
    neg_log_prior,
    project_batch,
)
from trumpet.substrate import rng_key

__all__ = [
    "TrainConfig",
    "AdamState",
    "adam_step",
    "train_mse_phase",
    "train_ml_phase",
    "reconstruction_error",
    "init_actnorms",
    "mse_loss",
    "ml_loss",
    "write_log",
    "LOG_COLUMNS",
]

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "phase", "loss", "recon_error", "wall_ms")
_SHUFFLE_STREAM = 1 << 20


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 64
    mse_epochs: int = 50
    ml_epochs: int = 50
    tikhonov: float = 1e-6
    seed: int = 0
    checkpoint_every: int = 0
    patience: int = 10
    lr_decay: str = "none"

    def __post_init__(self):
        if self.lr_decay not in ("none", "cosine"):
            raise ValueError(f"unknown lr_decay {self.lr_decay!r}")
        if not 0.0 < self.lr <= 0.1:
            raise ValueError("lr must lie in (0, 0.1]")
        if self.batch_size < 1 or self.mse_epochs < 0 or self.ml_epochs < 0:
            raise ValueError("batch_size must be positive and epoch counts non-negative")
        if self.tikhonov < 0 or self.seed < 0 or self.checkpoint_every < 0 or self.patience < 1:
            raise ValueError("tikhonov, seed and checkpoint_every must be non-negative, patience positive")


# --------------------------------------------------------------------------
# Adam


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class AdamState:
    """Bias-corrected Adam moments; ``m`` and ``v`` mirror the parameter tree."""

    m: object
    v: object
    step: jax.Array
    b1: float = field(default=0.9, metadata={"static": True})
    b2: float = field(default=0.999, metadata={"static": True})
    eps: float = field(default=1e-8, metadata={"static": True})

    @classmethod
    def init(cls, params) -> "AdamState":
        zeros = jax.tree_util.tree_map(jnp.zeros_like, params)
        return cls(zeros, zeros, jnp.zeros((), jnp.int32))


@jax.jit
def _adam_update(params, grads, state: AdamState, lr):
    step = state.step + 1
    b1, b2, eps = state.b1, state.b2, state.eps
    m = jax.tree_util.tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.m, grads)
    v = jax.tree_util.tree_map(lambda v, g: b2 * v + (1 - b2) * g * g, state.v, grads)
    t = step.astype(jnp.float32)
    c1 = 1 - b1 ** t
    c2 = 1 - b2 ** t
    new = jax.tree_util.tree_map(
        lambda p, m, v: (p - lr * (m / c1) / (jnp.sqrt(v / c2) + eps)).astype(p.dtype), params, m, v)
    return new, replace(state, m=m, v=v, step=step)


def _all_finite(tree) -> bool:
    return all(bool(jnp.all(jnp.isfinite(a))) for a in jax.tree_util.tree_leaves(tree))


def adam_step(params, grads, state: AdamState, lr: float):
    """One Adam update.

    Non-finite gradients leave parameters and moments untouched; the step is
    logged as skipped.

    Returns:
        ``(params, state, applied)``.
    """
    if jax.tree_util.tree_structure(params) != jax.tree_util.tree_structure(grads):
        raise ValueError("gradient tree does not match parameter tree")
    for p, g in zip(jax.tree_util.tree_leaves(params), jax.tree_util.tree_leaves(grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if not _all_finite(grads):
        log.warning("non-finite gradient at step %d; update skipped", int(state.step) + 1)
        return params, state, False
    new, state = _adam_update(params, grads, state, jnp.asarray(lr, jnp.float32))
    return new, state, True


# --------------------------------------------------------------------------
# losses


def mse_loss(g_layers, model: TrumpetModel, batch):
    """Mean over the batch of ``||x - g(g^+(x))||^2``."""
    m = replace(model, g=g_layers)
    diff = batch - project_batch(m, batch)
    return jnp.mean(jnp.sum(diff.reshape(batch.shape[0], -1) ** 2, axis=1))


def ml_loss(h_layers, model: TrumpetModel, latents):
    """Mean latent NLL ``-log p_Z(h^-1(z')) + sum_l log|det J_h,l|``."""
    m = replace(model, h=h_layers)
    z, logdet = h_inverse_logdet(m, latents)
    return jnp.mean(neg_log_prior(z) + logdet)


_mse_grad = jax.jit(jax.value_and_grad(mse_loss))
_ml_grad = jax.jit(jax.value_and_grad(ml_loss))
_mse_value = jax.jit(mse_loss)
_ml_value = jax.jit(ml_loss)
_project_jit = jax.jit(project_batch)
_g_inverse_jit = jax.jit(g_inverse)


# --------------------------------------------------------------------------
# helpers


def _samples(data):
    arr = getattr(data, "samples", data)
    arr = np.asarray(arr, np.float32)
    if arr.ndim != 4:
        raise ValueError(f"expected N x H x W x C samples, got shape {arr.shape}")
    return arr


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    perm = np.asarray(jax.random.permutation(rng_key(seed, _SHUFFLE_STREAM + epoch), n))
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def init_actnorms(model: TrumpetModel, batch) -> TrumpetModel:
    """Data-dependent actnorm init of ``g`` on one batch.

    Walks ``g`` backwards from the data; each actnorm is set so that its
    latent-side activations (its inverse applied to the data-side ones)
    have zero mean and unit variance per channel.
    """
    a = jnp.asarray(batch, jnp.float32)
    new = list(model.g)
    for i in reversed(range(len(new))):
        layer = new[i]
        if isinstance(layer, L.ActNorm):
            stats = L.actnorm_init_from_batch(a)
            layer = L.ActNorm((-stats.mu / stats.sigma).astype(layer.mu.dtype),
                              (1.0 / stats.sigma).astype(layer.sigma.dtype))
            new[i] = layer
        a = layer.inverse(a)
    return replace(model, g=tuple(new))


def reconstruction_error(model: TrumpetModel, data, batch_size: int = 256) -> float:
    """Mean ``||x - P(x)|| / ||x||``; zero-norm samples are skipped with a warning."""
    x = _samples(data)
    errs = []
    for i in range(0, len(x), batch_size):
        xb = jnp.asarray(x[i:i + batch_size])
        p = _project_jit(model, xb)
        num = np.linalg.norm(np.asarray(xb - p, np.float64).reshape(len(xb), -1), axis=1)
        den = np.linalg.norm(np.asarray(xb, np.float64).reshape(len(xb), -1), axis=1)
        errs.append(np.stack([num, den], 1))
    err = np.concatenate(errs) if errs else np.zeros((0, 2))
    keep = err[:, 1] > 0
    if not np.all(keep):
        warnings.warn(f"{int((~keep).sum())} zero-norm samples excluded", RuntimeWarning, stacklevel=2)
    if not np.any(keep):
        raise ValueError("no non-zero samples to evaluate")
    return float(np.mean(err[keep, 0] / err[keep, 1]))


def _epoch_lr(cfg: TrainConfig, epoch: int, epochs: int) -> float:
    if cfg.lr_decay == "cosine" and epochs > 1:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / epochs))
    return cfg.lr


def _run_phase(params, loss_grad: Callable, loss_value: Callable, data, cfg: TrainConfig,
               epochs: int, phase: str, history: list | None, recon: Callable,
               on_epoch: Callable | None):
    n = len(data)
    state = AdamState.init(params)
    best_params, best_loss = params, math.inf
    stale = 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        lr = _epoch_lr(cfg, epoch, epochs)
        for idx in _batches(n, cfg.batch_size, cfg.seed, epoch if phase == "mse" else 10_000 + epoch):
            batch = jnp.asarray(data[idx])
            loss, grads = loss_grad(params, batch)
            if not bool(jnp.isfinite(loss)):
                log.warning("%s phase: non-finite loss in epoch %d; step skipped", phase, epoch)
                continue
            params, state, _ = adam_step(params, grads, state, lr)
        # epoch loss of the end-of-epoch parameters, ordered reduction over fixed chunks
        total = 0.0
        for i in range(0, n, 1024):
            chunk = jnp.asarray(data[i:i + 1024])
            total += float(loss_value(params, chunk)) * len(chunk)
        epoch_loss = total / n
        wall_ms = (time.perf_counter() - t0) * 1e3
        row = {"epoch": epoch, "phase": phase, "loss": epoch_loss,
               "recon_error": recon(params), "wall_ms": round(wall_ms, 3)}
        if history is not None:
            history.append(row)
        log.info("%s epoch %d loss %.6g", phase, epoch, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, params)
        if math.isfinite(epoch_loss) and epoch_loss < best_loss:
            best_params, best_loss, stale = params, epoch_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("%s phase plateaued after %d epochs", phase, epoch + 1)
                break
    return best_params


def train_mse_phase(model: TrumpetModel, data, cfg: TrainConfig, history: list | None = None,
                    on_epoch: Callable | None = None, init: bool = True) -> TrumpetModel:
    """Fit ``g`` to minimise ``mean ||x - g(g^+(x))||^2``; ``h`` is untouched.

    Gradients flow through both ``g`` and the Tikhonov pseudoinverse in
    ``g^+``. The returned model carries the best epoch's parameters.

    Args:
        history: list receiving one log row per epoch.
        on_epoch: callback ``(epoch, model)`` for checkpointing.
        init: run the actnorm data initialisation on the first batch.
    """
    x = _samples(data)
    if x.shape[1:] != model.data_shape:
        raise ValueError(f"data shape {x.shape[1:]} != model data shape {model.data_shape}")
    model = model.with_tikhonov(cfg.tikhonov)
    if init and cfg.mse_epochs > 0:
        first = _batches(len(x), cfg.batch_size, cfg.seed, 0)[0]
        model = init_actnorms(model, x[first])

    def as_model(g):
        return replace(model, g=g)

    g = _run_phase(
        model.g,
        lambda p, b: _mse_grad(p, model, b),
        lambda p, b: _mse_value(p, model, b),
        x, cfg, cfg.mse_epochs, "mse", history,
        lambda p: reconstruction_error(as_model(p), x[:1024]),
        None if on_epoch is None else (lambda e, p: on_epoch(e, as_model(p))),
    )
    return as_model(g)


def latents_of(model: TrumpetModel, data, batch_size: int = 1024) -> np.ndarray:
    """``g^+(x)`` for every sample, as an ``N x d`` array."""
    x = _samples(data)
    out = [np.asarray(_g_inverse_jit(model, jnp.asarray(x[i:i + batch_size])))
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, model.latent_dim), np.float32)


def train_ml_phase(model: TrumpetModel, data, cfg: TrainConfig, history: list | None = None,
                   on_epoch: Callable | None = None) -> TrumpetModel:
    """Fit ``h`` by maximum likelihood of the preimages ``g^+(x)``; ``g`` is frozen.

    ``data`` may be images or precomputed ``N x d`` latents.
    """
    arr = np.asarray(getattr(data, "samples", data), np.float32)
    if arr.ndim == 2:
        if arr.shape[1] != model.latent_dim:
            raise ValueError(f"latents must have {model.latent_dim} columns")
        z = arr
        recon_value = float("nan")
    else:
        z = latents_of(model, arr)
        recon_value = reconstruction_error(model, arr[:1024])

    def as_model(h):
        return replace(model, h=h)

    h = _run_phase(
        model.h,
        lambda p, b: _ml_grad(p, model, b),
        lambda p, b: _ml_value(p, model, b),
        z, cfg, cfg.ml_epochs, "ml", history,
        lambda p: recon_value,
        None if on_epoch is None else (lambda e, p: on_epoch(e, as_model(p))),
    )
    return as_model(h)


def write_log(rows, path) -> None:
    """Write training rows as CSV with the fixed column order."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})
