"""Layer zoo for injective flows.

Every layer is a frozen dataclass registered as a JAX pytree: array fields
are the trainable parameters, everything else is static configuration. All
layers act on ``N x H x W x C`` batches in the generative direction and
expose

* ``forward(x)`` / ``inverse(y)`` -- the map and its (left) inverse,
* ``gram_logdet(x)`` -- per-sample ``log|det J^T J|`` at input ``x``,
* ``logdet(x)`` -- per-sample ``log|det J|`` (square layers only),
* ``out_shape((H, W, C))``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Union

import jax
import jax.numpy as jnp
from jax import lax

from trumpet.substrate import NumericalError

__all__ = [
    "ActNorm",
    "Conv1x1",
    "Coupling",
    "Squeeze",
    "Layer",
    "actnorm_apply",
    "actnorm_init_from_batch",
    "conv1x1_forward",
    "conv1x1_pinv",
    "conv1x1_logdet",
    "coupling_apply",
    "coupling_logdet",
    "squeeze_apply",
    "space_to_depth",
    "depth_to_space",
    "layer_jvp",
    "layer_vjp",
    "orthogonal_kernel",
]

SIGMA_FLOOR = 1e-4
SCALE_CLAMP = 5.0
CONV1X1_MODES = ("bijective", "injective-linear", "injective-relu")


def _static(**kw):
    return field(metadata={"static": True}, **kw)


def _per_sample(value, x):
    return jnp.broadcast_to(jnp.asarray(value, x.dtype), x.shape[:1])


# --------------------------------------------------------------------------
# activation normalisation


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class ActNorm:
    """Per-channel affine normalisation ``y = (x - mu) / sigma``."""

    mu: jax.Array
    sigma: jax.Array
    bijective = True

    @classmethod
    def identity(cls, channels: int, dtype=jnp.float32) -> "ActNorm":
        return cls(jnp.zeros(channels, dtype), jnp.ones(channels, dtype))

    @property
    def channels(self) -> int:
        return self.mu.shape[0]

    def out_shape(self, shape):
        return tuple(shape)

    def forward(self, x):
        return (x - self.mu.astype(x.dtype)) / self.sigma.astype(x.dtype)

    def inverse(self, y):
        return self.sigma.astype(y.dtype) * y + self.mu.astype(y.dtype)

    def logdet(self, x):
        hw = x.shape[1] * x.shape[2]
        return _per_sample(-hw * jnp.sum(jnp.log(self.sigma.astype(x.dtype))), x)

    def gram_logdet(self, x):
        return 2.0 * self.logdet(x)

    def validate(self) -> None:
        if not bool(jnp.all(self.sigma > 0)):
            raise ValueError("actnorm sigma must be positive")


def actnorm_apply(params: ActNorm, x, direction: str = "forward"):
    """Apply actnorm forward (normalise) or inverse (de-normalise)."""
    params.validate()
    if x.shape[-1] != params.channels:
        raise ValueError(f"expected {params.channels} channels, got {x.shape[-1]}")
    if direction == "forward":
        return params.forward(x)
    if direction == "inverse":
        return params.inverse(x)
    raise ValueError(f"unknown direction {direction!r}")


def actnorm_init_from_batch(batch) -> ActNorm:
    """Data-dependent init: per-channel batch mean and std (std floored)."""
    batch = jnp.asarray(batch)
    if batch.shape[0] < 2:
        raise ValueError("actnorm init needs at least 2 samples")
    axes = tuple(range(batch.ndim - 1))
    stats = batch.astype(jnp.float64)
    mu = jnp.mean(stats, axis=axes)
    sigma = jnp.std(stats, axis=axes)
    if bool(jnp.any(sigma < SIGMA_FLOOR)):
        warnings.warn("degenerate channel in actnorm init batch; sigma floored", RuntimeWarning, stacklevel=2)
        sigma = jnp.maximum(sigma, SIGMA_FLOOR)
    return ActNorm(mu.astype(batch.dtype), sigma.astype(batch.dtype))


# --------------------------------------------------------------------------
# 1x1 convolutions


def orthogonal_kernel(key, rows: int, cols: int, dtype=jnp.float32) -> jax.Array:
    """Random ``rows x cols`` kernel with orthonormal columns (rows >= cols)."""
    g = jax.random.normal(key, (rows, cols), jnp.float64)
    q, r = jnp.linalg.qr(g)
    q = q * jnp.sign(jnp.diag(r))
    return q.astype(dtype)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class Conv1x1:
    """1x1 convolution, bijective or injective (linear / ReLU).

    ``w`` has shape ``(c_out, c_in)``. In ReLU mode the layer emits
    ``relu([w; -w] x)`` so the effective output has ``2 * c_out`` channels.
    ``tikhonov`` regularises the left pseudoinverse ``(w^T w + lam I)^-1 w^T``.
    """

    w: jax.Array
    mode: str = _static(default="injective-linear")
    tikhonov: float = _static(default=0.0)

    def __post_init__(self):
        # Only static fields are checked here; leaves may be placeholders.
        if self.mode not in CONV1X1_MODES:
            raise ValueError(f"unknown conv1x1 mode {self.mode!r}")
        if self.tikhonov < 0:
            raise ValueError("tikhonov lambda must be non-negative")

    @classmethod
    def from_kernel(cls, w, mode: str = "injective-linear", tikhonov: float = 0.0) -> "Conv1x1":
        w = jnp.asarray(w, jnp.float32) if not hasattr(w, "dtype") else jnp.asarray(w)
        if w.ndim != 2:
            raise ValueError(f"kernel must be a matrix, got shape {w.shape}")
        c_out, c_in = w.shape
        if mode == "bijective" and c_out != c_in:
            raise ValueError("bijective 1x1 conv needs a square kernel")
        if c_out < c_in:
            raise ValueError(f"kernel {w.shape} cannot be injective")
        return cls(w, mode, float(tikhonov))

    @classmethod
    def create(cls, key, c_in: int, mode: str = "injective-linear", k: int = 2,
               tikhonov: float = 0.0, dtype=jnp.float32) -> "Conv1x1":
        if mode == "bijective":
            c_out = c_in
        elif mode == "injective-linear":
            if k < 1:
                raise ValueError("linear injective conv needs k >= 1")
            c_out = k * c_in
        elif mode == "injective-relu":
            if k < 2:
                raise ValueError("ReLU injective conv needs k >= 2")
            c_out = (k // 2) * c_in
        else:
            raise ValueError(f"unknown conv1x1 mode {mode!r}")
        return cls(orthogonal_kernel(key, c_out, c_in, dtype), mode, float(tikhonov))

    bijective = property(lambda self: self.mode == "bijective")

    @property
    def c_in(self) -> int:
        return self.w.shape[1]

    @property
    def out_channels(self) -> int:
        return 2 * self.w.shape[0] if self.mode == "injective-relu" else self.w.shape[0]

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.c_in:
            raise ValueError(f"conv1x1 expects {self.c_in} channels, got {c}")
        return (h, w, self.out_channels)

    def forward(self, x):
        w = self.w.astype(x.dtype)
        y = jnp.einsum("nhwc,oc->nhwo", x, w)
        if self.mode == "injective-relu":
            y = jax.nn.relu(jnp.concatenate([y, -y], axis=-1))
        return y

    def pinv_matrix(self, dtype=None):
        w = self.w if dtype is None else self.w.astype(dtype)
        if self.mode == "bijective":
            return jnp.linalg.inv(w)
        gram = w.T @ w + self.tikhonov * jnp.eye(w.shape[1], dtype=w.dtype)
        return jnp.linalg.solve(gram, w.T)

    def inverse(self, y):
        if self.mode == "injective-relu":
            c = self.w.shape[0]
            y = y[..., :c] - y[..., c:]
        return jnp.einsum("nhwo,co->nhwc", y, self.pinv_matrix(y.dtype))

    def kernel_logdet(self, dtype=None):
        """``sum_i log s_i(w)^2`` for a single pixel."""
        w = self.w if dtype is None else self.w.astype(dtype)
        if self.mode == "bijective":
            return 2.0 * jnp.linalg.slogdet(w)[1]
        return jnp.linalg.slogdet(w.T @ w)[1]

    def gram_logdet(self, x):
        hw = x.shape[1] * x.shape[2]
        return _per_sample(hw * self.kernel_logdet(x.dtype), x)

    def logdet(self, x):
        if not self.bijective:
            raise TypeError("log|det J| is undefined for an injective layer")
        return 0.5 * self.gram_logdet(x)

    def min_singular_value(self):
        return jnp.linalg.svd(self.w.astype(jnp.float64), compute_uv=False)[-1]

    def validate(self) -> None:
        if not float(self.min_singular_value()) > 0:
            raise NumericalError("1x1 conv kernel is rank deficient")


def conv1x1_forward(params: Conv1x1, x):
    if x.shape[-1] != params.c_in:
        raise ValueError(f"expected {params.c_in} input channels, got {x.shape[-1]}")
    return params.forward(x)


def conv1x1_pinv(params: Conv1x1, y):
    """Tikhonov-regularised left inverse; exact on the range when lambda = 0."""
    if y.shape[-1] != params.out_channels:
        raise ValueError(f"expected {params.out_channels} channels, got {y.shape[-1]}")
    w = params.w.astype(jnp.float64)
    gram = w.T @ w + params.tikhonov * jnp.eye(w.shape[1], dtype=w.dtype)
    if float(jnp.linalg.cond(gram)) > 1e12:
        raise NumericalError("w^T w + lambda I is numerically singular")
    return params.inverse(y)


def conv1x1_logdet(params: Conv1x1, height: int, width: int) -> float:
    """``H * W * sum_i log s_i(w)^2`` in nats."""
    s = jnp.linalg.svd(params.w.astype(jnp.float64), compute_uv=False)
    if not float(s[-1]) > 0:
        raise NumericalError("zero singular value in 1x1 conv kernel")
    return float(height * width * jnp.sum(jnp.log(s**2)))


# --------------------------------------------------------------------------
# affine coupling


def _conv2d(p, x, stride: int = 1):
    y = lax.conv_general_dilated(
        x, p["kernel"].astype(x.dtype), (stride, stride), "SAME",
        dimension_numbers=("NHWC", "HWIO", "NHWC"))
    return y + p["bias"].astype(x.dtype)


def _conv_init(key, k: int, c_in: int, c_out: int, zero: bool = False, dtype=jnp.float32):
    if zero:
        kernel = jnp.zeros((k, k, c_in, c_out), dtype)
    else:
        std = math.sqrt(1.0 / (k * k * c_in))
        kernel = std * jax.random.normal(key, (k, k, c_in, c_out), dtype)
    return {"kernel": kernel, "bias": jnp.zeros(c_out, dtype)}


def _upsample(x):
    return jnp.repeat(jnp.repeat(x, 2, axis=1), 2, axis=2)


def _plain_init(key, c_in, c_out, hidden, k, dtype):
    k1, k2 = jax.random.split(key)
    return [_conv_init(k1, k, c_in, hidden, dtype=dtype),
            _conv_init(k2, k, hidden, c_out, zero=True, dtype=dtype)]


def _plain_apply(p, x):
    return _conv2d(p[1], jax.nn.elu(_conv2d(p[0], x)))


# (name, input channels from, output channels); widths follow the 32/64 scheme.
_UNET_WIDTHS = (32, 64)


def _unet_init(key, c_in, c_out, k, dtype):
    a, b = _UNET_WIDTHS
    shapes = {
        "enc0a": (c_in, a), "enc0b": (a, b), "down0": (b, b),
        "enc1a": (b, a), "enc1b": (a, b), "down1": (b, b),
        "mid": (b, b),
        "dec1a": (2 * b, a), "dec1b": (a, b),
        "dec0a": (2 * b, a), "dec0b": (a, b),
    }
    keys = jax.random.split(key, len(shapes))
    p = {name: _conv_init(kk, k, ci, co, dtype=dtype) for kk, (name, (ci, co)) in zip(keys, shapes.items())}
    p["out"] = _conv_init(None, k, b, c_out, zero=True, dtype=dtype)
    return p


def _unet_apply(p, x):
    act = jax.nn.elu
    e0 = act(_conv2d(p["enc0b"], act(_conv2d(p["enc0a"], x))))
    h = act(_conv2d(p["down0"], e0, stride=2))
    e1 = act(_conv2d(p["enc1b"], act(_conv2d(p["enc1a"], h))))
    h = act(_conv2d(p["down1"], e1, stride=2))
    h = act(_conv2d(p["mid"], h))
    h = jnp.concatenate([_upsample(h), e1], axis=-1)
    h = act(_conv2d(p["dec1b"], act(_conv2d(p["dec1a"], h))))
    h = jnp.concatenate([_upsample(h), e0], axis=-1)
    h = act(_conv2d(p["dec0b"], act(_conv2d(p["dec0a"], h))))
    return _conv2d(p["out"], h)


_NETS = {"plain": (_plain_init, _plain_apply), "unet": (_unet_init, _unet_apply)}


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class Coupling:
    """Affine coupling: the first ceil(C/2) channels condition the rest.

    ``y2 = s(x1) * x2 + b(x1)`` with ``s = exp(clip(raw, -5, 5))``.
    """

    scale_net: dict | list
    bias_net: dict | list
    net: str = _static(default="plain")
    bijective = True

    @classmethod
    def create(cls, key, channels: int, hidden: int = 16, kernel: int = 3,
               net: str = "plain", dtype=jnp.float32) -> "Coupling":
        if channels < 2:
            raise ValueError("coupling needs at least 2 channels")
        c1 = (channels + 1) // 2
        c2 = channels - c1
        ks, kb = jax.random.split(key)
        if net == "plain":
            s = _plain_init(ks, c1, c2, hidden, kernel, dtype)
            b = _plain_init(kb, c1, c2, hidden, kernel, dtype)
        elif net == "unet":
            s = _unet_init(ks, c1, c2, kernel, dtype)
            b = _unet_init(kb, c1, c2, kernel, dtype)
        else:
            raise ValueError(f"unknown coupling subnet {net!r}")
        return cls(s, b, net)

    @property
    def channels(self) -> int:
        if self.net == "plain":
            c1 = self.scale_net[0]["kernel"].shape[2]
            c2 = self.scale_net[1]["kernel"].shape[3]
        else:
            c1 = self.scale_net["enc0a"]["kernel"].shape[2]
            c2 = self.scale_net["out"]["kernel"].shape[3]
        return c1 + c2

    def out_shape(self, shape):
        h, w, c = shape
        if c != self.channels:
            raise ValueError(f"coupling expects {self.channels} channels, got {c}")
        if self.net == "unet" and (h % 4 or w % 4):
            raise ValueError("U-Net coupling needs spatial dims divisible by 4")
        return tuple(shape)

    def _split(self, x):
        c1 = (x.shape[-1] + 1) // 2
        return x[..., :c1], x[..., c1:]

    def _scale_bias(self, x1):
        apply = _NETS[self.net][1]
        raw = jnp.clip(apply(self.scale_net, x1), -SCALE_CLAMP, SCALE_CLAMP)
        return raw, apply(self.bias_net, x1)

    def forward(self, x):
        x1, x2 = self._split(x)
        raw, b = self._scale_bias(x1)
        return jnp.concatenate([x1, jnp.exp(raw) * x2 + b], axis=-1)

    def inverse(self, y):
        y1, y2 = self._split(y)
        raw, b = self._scale_bias(y1)
        return jnp.concatenate([y1, (y2 - b) * jnp.exp(-raw)], axis=-1)

    def logdet(self, x):
        raw, _ = self._scale_bias(self._split(x)[0])
        return jnp.sum(raw, axis=(1, 2, 3))

    def gram_logdet(self, x):
        return 2.0 * self.logdet(x)

    def validate(self) -> None:
        pass


def _check_coupling_input(params: Coupling, x):
    if x.shape[-1] < 2:
        raise ValueError("coupling needs at least 2 channels")
    params.out_shape(x.shape[1:])


def coupling_apply(params: Coupling, x, direction: str = "forward"):
    _check_coupling_input(params, x)
    if direction == "forward":
        return params.forward(x)
    if direction == "inverse":
        return params.inverse(x)
    raise ValueError(f"unknown direction {direction!r}")


def coupling_logdet(params: Coupling, x):
    """Per-sample ``log|det J| = sum log s(x1)``; double it for ``J^T J``."""
    _check_coupling_input(params, x)
    return params.logdet(x)


# --------------------------------------------------------------------------
# squeeze


def space_to_depth(x, factor: int = 2):
    n, h, w, c = x.shape
    if h % factor or w % factor:
        raise ValueError(f"spatial dims {h}x{w} not divisible by {factor}")
    x = x.reshape(n, h // factor, factor, w // factor, factor, c)
    x = x.transpose(0, 1, 3, 5, 2, 4)
    return x.reshape(n, h // factor, w // factor, c * factor * factor)


def depth_to_space(x, factor: int = 2):
    n, h, w, c = x.shape
    f2 = factor * factor
    if c % f2:
        raise ValueError(f"channel count {c} not divisible by {f2}")
    x = x.reshape(n, h, w, c // f2, factor, factor)
    x = x.transpose(0, 1, 4, 2, 5, 3)
    return x.reshape(n, h * factor, w * factor, c // f2)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class Squeeze:
    """Exact 2x2 reshuffle; each channel's 2x2 block stays contiguous."""

    direction: str = _static(default="depth-to-space")
    factor: int = _static(default=2)
    bijective = True

    def __post_init__(self):
        if self.direction not in ("space-to-depth", "depth-to-space"):
            raise ValueError(f"unknown squeeze direction {self.direction!r}")

    def out_shape(self, shape):
        h, w, c = shape
        f = self.factor
        if self.direction == "space-to-depth":
            if h % f or w % f:
                raise ValueError(f"spatial dims {h}x{w} not divisible by {f}")
            return (h // f, w // f, c * f * f)
        if c % (f * f):
            raise ValueError(f"channel count {c} not divisible by {f * f}")
        return (h * f, w * f, c // (f * f))

    def forward(self, x):
        if self.direction == "space-to-depth":
            return space_to_depth(x, self.factor)
        return depth_to_space(x, self.factor)

    def inverse(self, y):
        if self.direction == "space-to-depth":
            return depth_to_space(y, self.factor)
        return space_to_depth(y, self.factor)

    def logdet(self, x):
        return jnp.zeros(x.shape[:1], x.dtype)

    gram_logdet = logdet

    def validate(self) -> None:
        pass


def squeeze_apply(spec: Squeeze, x, inverse: bool = False):
    return spec.inverse(x) if inverse else spec.forward(x)


Layer = Union[ActNorm, Conv1x1, Coupling, Squeeze]


def layer_jvp(layer, x, tangent):
    """Directional derivative of ``layer.forward`` at ``x``."""
    if tangent.shape != x.shape:
        raise ValueError(f"tangent shape {tangent.shape} != input shape {x.shape}")
    return jax.jvp(layer.forward, (x,), (tangent.astype(x.dtype),))[1]


def layer_vjp(layer, x, cotangent):
    """Adjoint action ``J(x)^T cotangent``."""
    y, pullback = jax.vjp(layer.forward, x)
    if cotangent.shape != y.shape:
        raise ValueError(f"cotangent shape {cotangent.shape} != output shape {y.shape}")
    return pullback(cotangent.astype(y.dtype))[0]


def cast_layer(layer, dtype):
    """Copy of ``layer`` with every parameter cast to ``dtype``."""
    return jax.tree_util.tree_map(lambda a: jnp.asarray(a, dtype), layer)


def with_tikhonov(layer, lam: float):
    return replace(layer, tikhonov=float(lam)) if isinstance(layer, Conv1x1) else layer
