import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from trumpet import logdet as LD
from trumpet.substrate import NumericalError


def _linear(seed, rows=12, cols=4, cond=2.0):
    rng = np.random.default_rng(seed)
    u, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    v, _ = np.linalg.qr(rng.standard_normal((cols, cols)))
    s = np.geomspace(0.7, 0.7 * cond, cols)
    j = jnp.asarray((u * s) @ v.T)
    return j, s, (lambda x: j @ x), (lambda y: j.T @ y)


def _truncated_series(s, alpha, n):
    lam = 1.0 - alpha * s**2
    return sum(np.sum(lam**k) / k for k in range(1, n + 1))


@given(seed=st.integers(0, 10_000), n=st.integers(1, 15))
def test_basis_probes_give_exact_truncated_traces(seed, n):
    _, s, jvp, vjp = _linear(seed)
    alpha = 0.9 / s.max() ** 2
    acc = LD.neumann_terms(jvp, vjp, jnp.eye(4), alpha, n)
    assert float(acc.sum()) == pytest.approx(_truncated_series(s, alpha, n), rel=1e-12)


def test_series_converges_to_logdet_within_tail_bound():
    _, s, jvp, vjp = _linear(0, cond=2.5)
    exact = 2 * np.sum(np.log(s))
    alpha = 0.9 / s.max() ** 2
    rho = 1 - alpha * s.min() ** 2
    for n in (5, 10, 20, 40):
        approx = -_truncated_series(s, alpha, n) - 4 * math.log(alpha)
        bound = 4 * rho ** (n + 1) / ((n + 1) * (1 - rho))
        assert 0 <= approx - exact <= bound


@pytest.mark.parametrize("probe", ["gaussian", "sphere"])
def test_estimator_unbiased_for_truncated_series(probe):
    _, s, jvp, vjp = _linear(1)
    cfg = LD.NeumannConfig(n_terms=10, n_probes=4000, power_iters=50, probe=probe)
    per = LD.neumann_logdet(jvp, vjp, 4, cfg, jax.random.PRNGKey(0), return_probes=True)
    alpha = 0.9 / s.max() ** 2
    target = -_truncated_series(s, alpha, 10) - 4 * math.log(alpha)
    assert abs(per.mean() - target) < 4 * per.std() / math.sqrt(len(per))


def test_sphere_probes_have_smaller_variance():
    _, _, jvp, vjp = _linear(2)
    key = jax.random.PRNGKey(3)
    var = {p: LD.neumann_logdet(jvp, vjp, 4, LD.NeumannConfig(n_probes=2000, probe=p), key,
                                return_probes=True).var() for p in ("gaussian", "sphere")}
    assert var["sphere"] < var["gaussian"]


def test_probe_average_variance_scales_inversely():
    _, _, jvp, vjp = _linear(4)
    counts = np.array([4, 16, 64, 256])
    variances = []
    for n in counts:
        cfg = LD.NeumannConfig(n_probes=int(n), probe="gaussian")
        est = [LD.neumann_logdet(jvp, vjp, 4, cfg, jax.random.PRNGKey(r)) for r in range(60)]
        variances.append(np.var(est, ddof=1))
    slope = np.polyfit(np.log(counts), np.log(variances), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.2)


@settings(max_examples=10)
@given(seed=st.integers(0, 10_000))
def test_power_iteration_finds_top_singular_value(seed):
    _, s, jvp, vjp = _linear(seed, cond=3.0)
    est = LD.max_singular_value(jvp, vjp, 4, 60, jax.random.PRNGKey(seed))
    assert est == pytest.approx(s.max(), rel=1e-3)


def test_exact_logdet_and_rank_checks():
    j, s, jvp, _ = _linear(5)
    assert LD.exact_logdet(jvp, 4) == pytest.approx(2 * np.sum(np.log(s)), rel=1e-10)
    with pytest.raises(NumericalError, match="rank"):
        LD.logdet_from_jacobian(np.outer(np.ones(5), [1.0, 1.0]))
    with pytest.raises(ValueError):
        LD.exact_logdet(jvp, 65)


def test_zero_map_is_rejected():
    zero = lambda v: jnp.zeros(3) * v.sum()  # noqa: E731
    with pytest.raises(NumericalError):
        LD.neumann_logdet(zero, lambda u: jnp.zeros(2) * u.sum(), 2)


def test_config_validation():
    with pytest.raises(ValueError):
        LD.NeumannConfig(safety=1.0)
    with pytest.raises(ValueError):
        LD.NeumannConfig(probe="rademacher-ish")
    with pytest.raises(ValueError):
        LD.NeumannConfig(n_terms=0)
