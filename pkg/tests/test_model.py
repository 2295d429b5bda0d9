import math
from dataclasses import replace

import jax
import jax.numpy as jnp
import numpy as np
import pytest

from trumpet import layers as L
from trumpet import model as M
from trumpet.logdet import NeumannConfig
from trumpet.substrate import rng_key


def _counterexample_model():
    """One latent coordinate injected into a channel pair whose scales are 10 and 0.01."""
    spec = M.TrumpetSpec(latent_dim=2, data_shape=(1, 1, 4), latent_shape=(1, 1, 2),
                         schedule=((0, 1, False),), flow_depth=0)
    w = jnp.array([[1.0, 0.0], [0.0, 0.0], [0.0, 1.0], [0.0, 0.0]], jnp.float32)
    act = L.ActNorm(jnp.zeros(4, jnp.float32), jnp.array([0.1, 100.0, 1.0, 1.0], jnp.float32))
    return M.TrumpetModel((L.Conv1x1.from_kernel(w), act), (), spec)


def test_layerwise_bound_can_undershoot_exact_nll():
    # Per-layer terms: conv 0, actnorm log 10 + log 0.01; the chain Jacobian only sees the 10.
    m = _counterexample_model()
    x = M.generate(m, jnp.array([0.3, -0.4]))
    gap = float(M.nll_bound(m, x)) - M.nll_exact(m, x)
    assert gap == pytest.approx(-math.log(100.0), abs=1e-5)


def _equality_model(seed=0):
    # Orthonormal injections with only orthogonal maps after them: the bound is tight.
    base = M.build(M.desk_spec(), rng_key(seed))
    rnd = M.randomize(base, rng_key(seed, 1), strength=1.0)
    g = list(base.g)
    g[0] = rnd.g[0]  # latent-side actnorm, bijective
    return replace(base, g=tuple(g), h=rnd.h)


def test_bound_is_exact_when_post_injection_maps_are_orthogonal():
    m = _equality_model()
    z = jax.random.normal(rng_key(3), (3, m.latent_dim), jnp.float32)
    x = M.generate(m, z)
    bound = np.asarray(M.nll_bound(m, x), np.float64)
    exact = np.asarray(M.nll_exact(m, x))
    np.testing.assert_allclose(bound, exact, atol=2e-4)
    assert np.ptp(exact) > 0.1  # non-trivial values


def test_generate_inverse_project(rand_model):
    z = jax.random.normal(rng_key(1), (5, rand_model.latent_dim), jnp.float32)
    x = M.generate(rand_model, z)
    assert x.shape == (5,) + rand_model.data_shape
    np.testing.assert_allclose(M.left_inverse(rand_model, x), z, atol=1e-4)
    np.testing.assert_allclose(M.project(rand_model, x), x, atol=1e-4)
    off = x + 0.1 * jax.random.normal(rng_key(2), x.shape)
    p = M.project(rand_model, off)
    np.testing.assert_allclose(M.project(rand_model, p), p, atol=1e-4)
    assert M.generate(rand_model, z[0]).shape == rand_model.data_shape


def test_zero_temperature_collapses_samples(rand_model):
    z = jax.random.normal(rng_key(1), (4, rand_model.latent_dim))
    x = np.asarray(M.generate(rand_model, z, temperature=0.0))
    assert np.all(x == x[0])
    with pytest.raises(ValueError):
        M.generate(rand_model, z, temperature=-1.0)


def test_input_validation(rand_model):
    with pytest.raises(ValueError, match="latent"):
        M.generate(rand_model, jnp.ones(3))
    with pytest.raises(ValueError, match="data shape"):
        M.project(rand_model, jnp.ones((2, 4, 4, 1)))
    with pytest.raises(ValueError, match="non-finite"):
        M.nll_bound(rand_model, jnp.full(rand_model.data_shape, jnp.nan))


def test_off_range_likelihood_warns(rand_model):
    x = np.asarray(M.generate(rand_model, jnp.ones(4))) + 0.5
    with pytest.warns(RuntimeWarning, match="off the model range"):
        M.nll_exact(rand_model, x)


def test_nll_exact_neumann_close_to_oracle(rand_model):
    x = M.generate(rand_model, jax.random.normal(rng_key(5), (2, 4), jnp.float32))
    oracle = np.asarray(M.nll_exact(rand_model, x))
    est = np.asarray(M.nll_exact(rand_model, x, "neumann", NeumannConfig(n_terms=30, n_probes=256)))
    np.testing.assert_allclose(est, oracle, atol=0.15)
    with pytest.raises(ValueError):
        M.nll_exact(rand_model, x, "magic")


def test_spec_validation():
    with pytest.raises(ValueError, match="does not hold"):
        M.build(M.desk_spec(latent_shape=(1, 1, 4), latent_dim=3), rng_key(0))
    with pytest.raises(ValueError, match="not"):
        M.build(M.desk_spec(data_shape=(4, 4, 1)), rng_key(0))
    with pytest.raises(ValueError, match="conv mode"):
        M.desk_spec(conv_mode="squiggle").validate()
    shapes = M.mnist_spec().stage_shapes()
    assert shapes[0] == (4, 4, 4) and shapes[-1] == (32, 32, 1)
    assert M.celeba_spec().stage_shapes()[-1] == (64, 64, 3)


def test_relu_model_round_trip():
    m = M.randomize(M.build(M.desk_spec(conv_mode="injective-relu"), rng_key(0)), rng_key(1),
                    strength=0.3, cond=1.5)
    z = jax.random.normal(rng_key(2), (3, 4), jnp.float32)
    np.testing.assert_allclose(M.left_inverse(m, M.generate(m, z)), z, atol=1e-4)


def test_linearize_gives_linear_generator(rand_model):
    m = M.linearize(rand_model)
    a, b = jax.random.normal(rng_key(7), (2, 4), jnp.float32)
    lhs = M.generate(m, 2.0 * a - 0.5 * b)
    rhs = 2.0 * M.generate(m, a) - 0.5 * M.generate(m, b)
    np.testing.assert_allclose(lhs, rhs, atol=1e-5)


def test_model_validate_and_jacobian(rand_model):
    rand_model.validate()
    jac = M.model_jacobian(rand_model, jnp.zeros(4))
    assert jac.shape == (64, 4)
    jvp, vjp = M.model_jvp_vjp(rand_model, jnp.zeros(4))
    v = jnp.arange(4.0)
    np.testing.assert_allclose(jvp(v), jac @ np.arange(4.0), rtol=1e-4, atol=1e-5)
    u = jnp.ones(64)
    np.testing.assert_allclose(vjp(u), jac.T @ np.ones(64), rtol=1e-4, atol=1e-5)
