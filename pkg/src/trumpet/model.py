"""Trumpet models: an injective expanding stack after a latent bijection.

``f = g o h`` where ``h`` is a bijective flow on ``R^d`` and ``g`` maps the
latent (reshaped row-major to ``h0 x w0 x c0``) up to the data shape through
injective revnet steps and depth-to-space squeezes.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import jax
import jax.numpy as jnp
import numpy as np

from trumpet import layers as L
from trumpet.substrate import NumericalError, as_tensor

__all__ = [
    "TrumpetSpec",
    "TrumpetModel",
    "build",
    "generate",
    "left_inverse",
    "project",
    "nll_exact",
    "nll_bound",
    "neg_log_prior",
    "randomize",
    "desk_spec",
    "mnist_spec",
    "celeba_spec",
]

IN_RANGE_TOL = 0.05
LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class TrumpetSpec:
    """Architecture of a Trumpet.

    ``schedule`` holds one ``(bijective_steps, injective_steps, upsqueeze)``
    entry per resolution. Within an entry the injective steps (each doubling
    channels) come first, then the bijective steps, then an optional
    depth-to-space squeeze.
    """

    latent_dim: int
    data_shape: tuple[int, int, int]
    latent_shape: tuple[int, int, int]
    schedule: tuple[tuple[int, int, bool], ...]
    flow_depth: int = 4
    conv_mode: str = "injective-linear"
    coupling_hidden: int = 16
    coupling_net: str = "plain"
    flow_hidden: int = 16
    tikhonov: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "data_shape", tuple(int(v) for v in self.data_shape))
        object.__setattr__(self, "latent_shape", tuple(int(v) for v in self.latent_shape))
        object.__setattr__(self, "schedule", tuple((int(b), int(i), bool(u)) for b, i, u in self.schedule))

    @property
    def data_dim(self) -> int:
        return int(np.prod(self.data_shape))

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """Feature shape after every schedule entry, starting at the latent."""
        h, w, c = self.latent_shape
        shapes = [(h, w, c)]
        for n_bij, n_inj, up in self.schedule:
            if n_bij < 0 or n_inj < 0:
                raise ValueError("step counts must be non-negative")
            c = c * 2**n_inj
            if n_bij and c < 2:
                raise ValueError("bijective steps need at least 2 channels")
            if up:
                if c % 4:
                    raise ValueError(f"cannot upsqueeze {c} channels")
                h, w, c = 2 * h, 2 * w, c // 4
            shapes.append((h, w, c))
        return shapes

    def validate(self) -> None:
        d = self.latent_dim
        if d < 2:
            raise ValueError("latent dimension must be at least 2")
        if len(self.data_shape) != 3 or len(self.latent_shape) != 3:
            raise ValueError("shapes must be H x W x C")
        if int(np.prod(self.latent_shape)) != d:
            raise ValueError(f"latent shape {self.latent_shape} does not hold {d} values")
        if d >= self.data_dim:
            raise ValueError(f"latent dim {d} must be smaller than data dim {self.data_dim}")
        if self.stage_shapes()[-1] != self.data_shape:
            raise ValueError(
                f"schedule maps {self.latent_shape} to {self.stage_shapes()[-1]}, "
                f"not {self.data_shape}")
        if self.conv_mode not in ("injective-linear", "injective-relu"):
            raise ValueError(f"unknown injective conv mode {self.conv_mode!r}")
        if self.coupling_net not in ("plain", "unet"):
            raise ValueError(f"unknown coupling net {self.coupling_net!r}")
        if self.flow_depth < 0 or self.tikhonov < 0:
            raise ValueError("flow depth and tikhonov must be non-negative")


def desk_spec(**overrides) -> TrumpetSpec:
    """4-d latent (2x2x1) expanded to an 8x8x1 image."""
    kw = dict(latent_dim=4, data_shape=(8, 8, 1), latent_shape=(2, 2, 1),
              schedule=((1, 2, True), (1, 2, True)), flow_depth=4)
    kw.update(overrides)
    return TrumpetSpec(**kw)


def desk_train_spec(**overrides) -> TrumpetSpec:
    """Desk model with two bijective steps per stage and wider couplings.

    Enough capacity to fit a 4-d synthetic manifold in 8x8 to a few percent.
    """
    kw = dict(schedule=((2, 2, True), (2, 2, True)), coupling_hidden=32)
    kw.update(overrides)
    return desk_spec(**kw)


def mnist_spec(**overrides) -> TrumpetSpec:
    """64-d latent for 32x32x1 images."""
    kw = dict(latent_dim=64, data_shape=(32, 32, 1), latent_shape=(4, 4, 4),
              schedule=((3, 1, True), (3, 1, True), (3, 2, True)),
              flow_depth=32, coupling_net="unet", coupling_hidden=64, flow_hidden=64)
    kw.update(overrides)
    return TrumpetSpec(**kw)


def celeba_spec(**overrides) -> TrumpetSpec:
    """192-d latent for 64x64x3 images, 32 bijective steps in the latent flow."""
    kw = dict(latent_dim=192, data_shape=(64, 64, 3), latent_shape=(8, 8, 3),
              schedule=((3, 2, True), (3, 2, True), (3, 2, True)),
              flow_depth=32, coupling_net="unet", coupling_hidden=64, flow_hidden=64)
    kw.update(overrides)
    return TrumpetSpec(**kw)


@jax.tree_util.register_dataclass
@dataclass(frozen=True)
class TrumpetModel:
    g: tuple
    h: tuple
    spec: TrumpetSpec = field(metadata={"static": True})

    @property
    def latent_dim(self) -> int:
        return self.spec.latent_dim

    @property
    def data_shape(self) -> tuple[int, int, int]:
        return self.spec.data_shape

    def astype(self, dtype) -> "TrumpetModel":
        return jax.tree_util.tree_map(lambda a: jnp.asarray(a, dtype), self)

    def with_tikhonov(self, lam: float) -> "TrumpetModel":
        return replace(self, g=tuple(L.with_tikhonov(l, lam) for l in self.g),
                       spec=replace(self.spec, tikhonov=float(lam)))

    def validate(self) -> None:
        """Check full column rank of every conv and positive actnorm scales."""
        for layer in self.g + self.h:
            layer.validate()
        if not all(getattr(l, "bijective", False) for l in self.h):
            raise ValueError("latent flow may only contain bijective layers")

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(a.shape)) for a in jax.tree_util.tree_leaves(self))


def _injective_step(key, c, spec, kernel):
    k1, k2 = jax.random.split(key)
    conv = L.Conv1x1.create(k1, c, spec.conv_mode, k=2, tikhonov=spec.tikhonov)
    c_out = conv.out_channels
    return [L.ActNorm.identity(c), conv,
            L.Coupling.create(k2, c_out, spec.coupling_hidden, kernel, spec.coupling_net)], c_out


def _bijective_step(key, c, hidden, kernel, net):
    k1, k2 = jax.random.split(key)
    return [L.ActNorm.identity(c), L.Conv1x1.create(k1, c, "bijective"),
            L.Coupling.create(k2, c, hidden, kernel, net)]


def build(spec: TrumpetSpec, key) -> TrumpetModel:
    """Initialise a model: orthonormal kernels, identity couplings and actnorms."""
    spec.validate()
    kg, kh = jax.random.split(key)
    g = []
    h_, w_, c = spec.latent_shape
    for n_bij, n_inj, up in spec.schedule:
        for _ in range(n_inj):
            kg, sub = jax.random.split(kg)
            net = spec.coupling_net if min(h_, w_) >= 4 else "plain"
            step, c = _injective_step(sub, c, replace(spec, coupling_net=net), 3)
            g += step
        for _ in range(n_bij):
            kg, sub = jax.random.split(kg)
            net = spec.coupling_net if min(h_, w_) >= 4 else "plain"
            g += _bijective_step(sub, c, spec.coupling_hidden, 3, net)
        if up:
            g.append(L.Squeeze("depth-to-space"))
            h_, w_, c = 2 * h_, 2 * w_, c // 4
    h = []
    for _ in range(spec.flow_depth):
        kh, sub = jax.random.split(kh)
        h += _bijective_step(sub, spec.latent_dim, spec.flow_hidden, 1, "plain")
    model = TrumpetModel(tuple(g), tuple(h), spec)
    shape = spec.latent_shape
    for layer in model.g:
        shape = layer.out_shape(shape)
    if shape != spec.data_shape:
        raise ValueError(f"built stack ends at {shape}, expected {spec.data_shape}")
    return model


# --------------------------------------------------------------------------
# pure maps on batches (N x d latents, N x H x W x C data)


def g_forward(model: TrumpetModel, zp):
    a = zp.reshape((zp.shape[0],) + model.spec.latent_shape)
    for layer in model.g:
        a = layer.forward(a)
    return a


def g_inverse(model: TrumpetModel, x):
    a = x
    for layer in reversed(model.g):
        a = layer.inverse(a)
    return a.reshape(x.shape[0], -1)


def g_inverse_logdet(model: TrumpetModel, x):
    """Left inverse of ``g`` plus the summed layer ``log|det J^T J|`` terms."""
    a = x
    total = jnp.zeros(x.shape[:1], x.dtype)
    for layer in reversed(model.g):
        a = layer.inverse(a)
        total = total + layer.gram_logdet(a)
    return a.reshape(x.shape[0], -1), total


def h_forward(model: TrumpetModel, z):
    a = z.reshape(z.shape[0], 1, 1, -1)
    for layer in model.h:
        a = layer.forward(a)
    return a.reshape(z.shape[0], -1)


def h_inverse_logdet(model: TrumpetModel, zp):
    """Inverse of ``h`` plus summed forward ``log|det J|`` at the recovered inputs."""
    a = zp.reshape(zp.shape[0], 1, 1, -1)
    total = jnp.zeros(zp.shape[:1], zp.dtype)
    for layer in reversed(model.h):
        a = layer.inverse(a)
        total = total + layer.logdet(a)
    return a.reshape(zp.shape[0], -1), total


def f_forward(model: TrumpetModel, z):
    return g_forward(model, h_forward(model, z))


def f_inverse(model: TrumpetModel, x):
    return h_inverse_logdet(model, g_inverse(model, x))[0]


def project_batch(model: TrumpetModel, x):
    return g_forward(model, g_inverse(model, x))


def neg_log_prior(z):
    """``-log N(z; 0, I)`` per row."""
    d = z.shape[-1]
    return 0.5 * jnp.sum(z * z, axis=-1) + 0.5 * d * LOG_2PI


def nll_bound_batch(model: TrumpetModel, x):
    zp, g_terms = g_inverse_logdet(model, x)
    z, h_terms = h_inverse_logdet(model, zp)
    return neg_log_prior(z) + 0.5 * g_terms + h_terms


_generate_jit = jax.jit(lambda m, z, t: f_forward(m, z * t))
_inverse_jit = jax.jit(f_inverse)
_project_jit = jax.jit(project_batch)
_bound_jit = jax.jit(nll_bound_batch)


# --------------------------------------------------------------------------
# public API: accepts a single sample or a batch


def _latents(model, z):
    z = as_tensor(z, dtype=_dtype(model), name="z")
    single = z.ndim == 1
    z = z[None] if single else z
    if z.ndim != 2 or z.shape[1] != model.latent_dim:
        raise ValueError(f"latent must have length {model.latent_dim}, got shape {z.shape}")
    return z, single


def _images(model, x):
    x = as_tensor(x, dtype=_dtype(model), name="x")
    single = x.shape == model.data_shape
    x = x[None] if single else x
    if x.shape[1:] != model.data_shape:
        raise ValueError(f"expected data shape {model.data_shape}, got {x.shape}")
    return x, single


def _dtype(model):
    leaves = jax.tree_util.tree_leaves(model)
    return leaves[0].dtype if leaves else jnp.float32


def _unbatch(a, single):
    return a[0] if single else a


def generate(model: TrumpetModel, z, temperature: float = 1.0):
    """``x = g(h(temperature * z))``."""
    if temperature < 0:
        raise ValueError("temperature must be non-negative")
    z, single = _latents(model, z)
    return _unbatch(_generate_jit(model, z, jnp.asarray(temperature, z.dtype)), single)


def left_inverse(model: TrumpetModel, x):
    """``z = h^-1(g^+(x))``; for off-range ``x`` this is the latent of its projection."""
    x, single = _images(model, x)
    z = _inverse_jit(model, x)
    if not bool(jnp.all(jnp.isfinite(z))):
        raise NumericalError("left inverse produced non-finite values")
    return _unbatch(z, single)


def project(model: TrumpetModel, x):
    """Idempotent projection ``g(g^+(x))`` onto the model range."""
    x, single = _images(model, x)
    return _unbatch(_project_jit(model, x), single)


def nll_bound(model: TrumpetModel, x):
    """Layerwise upper bound on ``-log p_X(x)`` in nats."""
    x, single = _images(model, x)
    return _unbatch(_bound_jit(model, x), single)


def _range_check(model, x):
    p = _project_jit(model, x)
    rel = jnp.linalg.norm((x - p).reshape(len(x), -1), axis=1) / jnp.maximum(
        jnp.linalg.norm(x.reshape(len(x), -1), axis=1), 1e-30)
    if bool(jnp.any(rel > IN_RANGE_TOL)):
        warnings.warn(
            f"input is off the model range (relative distance {float(rel.max()):.3g}); "
            "the likelihood refers to its projection", RuntimeWarning, stacklevel=3)


def nll_exact(model: TrumpetModel, x, logdet_method: str = "oracle", cfg=None, key=None):
    """``-log p_X(x) = -log p_Z(f^+(x)) + 1/2 log|det J^T J|`` at ``f^+(x)``.

    Args:
        logdet_method: ``"oracle"`` builds the dense Jacobian in float64;
            ``"neumann"`` uses the stochastic series estimator.
        cfg: :class:`trumpet.logdet.NeumannConfig` for the neumann method.
        key: PRNG key for the neumann method.
    """
    from trumpet import logdet as LD

    x, single = _images(model, x)
    _range_check(model, x)
    z = _inverse_jit(model, x)
    out = []
    if logdet_method == "oracle":
        for zi in np.asarray(z, np.float64):
            ld = LD.logdet_from_jacobian(model_jacobian(model, zi))
            out.append(float(neg_log_prior(jnp.asarray(zi))) + 0.5 * ld)
    elif logdet_method == "neumann":
        cfg = cfg or LD.NeumannConfig()
        key = jax.random.PRNGKey(0) if key is None else key
        for i, zi in enumerate(z):
            jvp, vjp = model_jvp_vjp(model, zi)
            ld = LD.neumann_logdet(jvp, vjp, model.latent_dim, cfg, jax.random.fold_in(key, i))
            out.append(float(neg_log_prior(zi)) + 0.5 * ld)
    else:
        raise ValueError(f"unknown logdet method {logdet_method!r}")
    res = np.asarray(out)
    return float(res[0]) if single else res


def _flat_f(model, v):
    return f_forward(model, v[None]).ravel()


_jvp_jit = jax.jit(lambda m, z, v: jax.jvp(lambda a: _flat_f(m, a), (z,), (v,))[1])
_vjp_jit = jax.jit(lambda m, z, u: jax.vjp(lambda a: _flat_f(m, a), z)[1](u)[0])
_jac_jit = jax.jit(lambda m, z: jax.jacfwd(lambda a: _flat_f(m, a))(z))


def model_jvp_vjp(model: TrumpetModel, z):
    """Closures for ``J_f(z) v`` and ``J_f(z)^T u`` on flat vectors."""
    z = jnp.asarray(z, _dtype(model))

    def jvp(v):
        return _jvp_jit(model, z, v.astype(z.dtype))

    def vjp(u):
        return _vjp_jit(model, z, u.astype(z.dtype))

    return jvp, vjp


def model_jacobian(model: TrumpetModel, z) -> np.ndarray:
    """Dense float64 Jacobian of ``f`` at a single latent ``z``, shape ``(D, d)``."""
    m64 = model.astype(jnp.float64)
    jac = np.asarray(_jac_jit(m64, jnp.asarray(z, jnp.float64)))
    if not np.all(np.isfinite(jac)):
        raise NumericalError("non-finite Jacobian entries")
    return jac


# --------------------------------------------------------------------------
# random perturbation for property tests


def _random_kernel(key, w, cond):
    rows, cols = w.shape
    k1, k2, k3 = jax.random.split(key, 3)
    u = L.orthogonal_kernel(k1, rows, cols, jnp.float64)
    v = L.orthogonal_kernel(k2, cols, cols, jnp.float64)
    s = jnp.exp(jax.random.uniform(k3, (cols,), jnp.float64, 0.0, math.log(cond)))
    s = s / jnp.sqrt(s.max() * s.min())
    return (u * s) @ v.T


def _fan_in(a):
    # conv kernels are (k, k, c_in, c_out); biases get a fixed small scale
    return math.sqrt(a.shape[0] * a.shape[1] * a.shape[2]) if a.ndim == 4 else 3.0


def randomize(model: TrumpetModel, key, strength: float = 1.0, cond: float = 3.0,
              dtype=jnp.float32) -> TrumpetModel:
    """Perturb every parameter away from the identity initialisation.

    Conv kernels get singular values spread over ``[1, cond]`` (geometric
    centre 1), actnorm scales ``exp(U(-0.5, 0.5) * strength)`` and coupling
    output convs small Gaussian weights, so couplings are non-trivial.
    """
    def perturb(layer, k):
        if isinstance(layer, L.ActNorm):
            k1, k2 = jax.random.split(k)
            c = layer.channels
            mu = 0.2 * strength * jax.random.normal(k1, (c,))
            sigma = jnp.exp(strength * jax.random.uniform(k2, (c,), minval=-0.5, maxval=0.5))
            return L.ActNorm(mu.astype(dtype), sigma.astype(dtype))
        if isinstance(layer, L.Conv1x1):
            return replace(layer, w=_random_kernel(k, layer.w, cond).astype(dtype))
        if isinstance(layer, L.Coupling):
            leaves, treedef = jax.tree_util.tree_flatten(layer)
            keys = jax.random.split(k, len(leaves))
            new = [a + 0.3 * strength * jax.random.normal(kk, a.shape) / _fan_in(a) for a, kk in zip(leaves, keys)]
            return jax.tree_util.tree_unflatten(treedef, [a.astype(dtype) for a in new])
        return layer

    layers = model.g + model.h
    keys = jax.random.split(key, len(layers))
    new = [perturb(l, k) for l, k in zip(layers, keys)]
    return replace(model, g=tuple(new[:len(model.g)]), h=tuple(new[len(model.g):]))


def linearize(model: TrumpetModel) -> TrumpetModel:
    """Couplings reset to the identity and actnorm shifts zeroed, so ``f(z) = G z``."""
    def strip(layer):
        if isinstance(layer, L.Coupling):
            return jax.tree_util.tree_map(jnp.zeros_like, layer)
        if isinstance(layer, L.ActNorm):
            return L.ActNorm(jnp.zeros_like(layer.mu), layer.sigma)
        return layer

    return replace(model, g=tuple(strip(l) for l in model.g), h=tuple(strip(l) for l in model.h))

