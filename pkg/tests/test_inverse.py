import csv
import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from trumpet import inverse as I
from trumpet import model as M
from trumpet.substrate import rng_key

SHAPE = (8, 8, 1)


def _ops(seed):
    return [I.gaussian_op(SHAPE, 20, seed), I.rand_mask_op(SHAPE, 0.3, seed),
            I.superres_op(SHAPE, 2), I.block_mask_op(SHAPE, 3, 1, 2)]


@given(seed=st.integers(0, 1000))
def test_adjoint_identity(seed):
    rng = np.random.default_rng(seed)
    for op in _ops(seed):
        x = jnp.asarray(rng.standard_normal(SHAPE))
        y = jnp.asarray(rng.standard_normal(op.measurement_shape))
        lhs = float(jnp.vdot(I.op_apply(op, x), y))
        rhs = float(jnp.vdot(x, I.op_adjoint(op, y)))
        assert lhs == pytest.approx(rhs, rel=1e-5, abs=1e-5)


def test_init_is_a_right_inverse():
    x = jnp.asarray(np.random.default_rng(0).standard_normal(SHAPE), jnp.float32)
    for op in _ops(1):
        y = I.op_apply(op, x)
        np.testing.assert_allclose(I.op_apply(op, I.op_init(op, y)), y, atol=1e-4)


def test_batched_application():
    op = I.superres_op(SHAPE, 4)
    x = jnp.ones((3,) + SHAPE)
    assert I.op_apply(op, x).shape == (3, 2, 2, 1)
    with pytest.raises(ValueError, match="image shape"):
        I.op_apply(op, jnp.ones((4, 4, 1)))


def test_parse_op_menu():
    op = I.parse_op("randmask:p=0.15", SHAPE)
    assert op.label == "randmask" and op.param("p") == 0.15
    assert I.parse_op("gaussian:m=32,seed=7", SHAPE).measurement_shape == (32,)
    assert I.parse_op("superres:f=4", SHAPE).measurement_shape == (2, 2, 1)
    blk = I.parse_op("blockmask:s=4,x=4,y=2", SHAPE)
    assert float(blk.mask.sum()) == 64 - 16
    assert float(blk.mask[2:6, 4:8].sum()) == 0.0
    assert blk.param_text == "s=4,x=4,y=2"
    for bad in ("fourier:k=3", "gaussian", "gaussian:m=3,q=1", "superres:f=3", "randmask:p"):
        with pytest.raises(ValueError):
            I.parse_op(bad, SHAPE)


def test_randmask_drop_rate():
    shape = (64, 64, 1)
    keep = np.mean([float(I.rand_mask_op(shape, 0.15, s).mask.mean()) for s in range(5)])
    assert keep == pytest.approx(0.85, abs=0.01)


def test_gaussian_pseudoinverse():
    op = I.gaussian_op(SHAPE, 16, 3)
    a, p = np.asarray(op.matrix, np.float64), np.asarray(op.pinv, np.float64)
    np.testing.assert_allclose(a @ p, np.eye(16), atol=1e-4)
    assert np.var(a) * 16 == pytest.approx(1.0, rel=0.2)


@given(snr=st.floats(0.0, 60.0), seed=st.integers(0, 100))
def test_add_noise_hits_requested_snr(snr, seed):
    y = jnp.asarray(np.random.default_rng(seed).standard_normal(32))
    noisy, sigma = I.add_noise(y, snr, jax.random.PRNGKey(seed))
    assert I.snr_db(y, noisy) == pytest.approx(snr, abs=1e-6)
    assert sigma == pytest.approx(float(jnp.linalg.norm(noisy - y)) / math.sqrt(32))


def test_snr_db_values():
    assert I.snr_db([3.0, 4.0], [3.0, 4.5]) == pytest.approx(20.0)
    assert I.snr_db([1.0], [1.0]) == I.SNR_CAP_DB
    with pytest.raises(ValueError):
        I.snr_db([0.0, 0.0], [1.0, 0.0])
    with pytest.raises(ValueError):
        I.snr_db([1.0], [1.0, 2.0])


@pytest.fixture(scope="module")
def linear_model():
    # Identity-initialised model: the range is a 4-d linear subspace.
    return M.build(M.desk_spec(), rng_key(0))


def test_solver_recovers_in_range_truth(linear_model):
    x = M.generate(linear_model, jnp.array([1.0, -0.5, 0.3, 0.8]))
    op = I.gaussian_op(SHAPE, 32, 7)
    y = I.op_apply(op, x)
    res = I.iflow_solve(linear_model, op, y, I.SolveConfig(eta=0.5, iters=200))
    assert I.snr_db(x, res.x) > 60
    assert res.trace.shape == (200,) and res.trace[-1] <= res.trace[0]


def test_solver_divergence_is_reported(linear_model):
    x = M.generate(linear_model, jnp.ones(4))
    op = I.gaussian_op(SHAPE, 32, 7)
    with pytest.raises(I.SolverDivergence) as info:
        I.iflow_solve(linear_model, op, I.op_apply(op, x), I.SolveConfig(eta=50.0, iters=100))
    assert len(info.value.trace) >= 1
    with pytest.raises(ValueError, match="measurement shape"):
        I.iflow_solve(linear_model, op, jnp.ones(5))


def test_map_loss_terms(rand_model):
    op = I.superres_op(SHAPE, 2)
    x = M.generate(rand_model, jnp.ones(4))
    y = I.op_apply(op, x) + 0.1
    data = I.map_loss(rand_model, op, y, x, 0.0)
    assert data == pytest.approx(0.5 * 0.01 * 16, rel=1e-4)
    with_prior = I.map_loss(rand_model, op, y, x, 0.5)
    bound = float(M.nll_bound(rand_model, M.project(rand_model, x)))
    assert with_prior == pytest.approx(data + 0.5 * bound, rel=1e-4, abs=1e-4)


def test_choose_rho_rules(linear_model):
    op = I.gaussian_op(SHAPE, 32, 7)
    y = I.op_apply(op, M.generate(linear_model, jnp.ones(4)))
    assert I.choose_rho(linear_model, op, y, I.SolveConfig(), noise_sigma=0.1) == pytest.approx(0.01)
    rho = I.choose_rho(linear_model, op, y, I.SolveConfig(eta=0.5, iters=50))
    assert rho in I.RHO_GRID


def test_write_results(tmp_path):
    row = dict(operator="gaussian", params="m=32", method="iflow", instance=0, snr_db=31.5,
               iterations=300, wall_ms=12.0)
    path = tmp_path / "r.csv"
    I.write_results([row], path)
    with open(path) as fh:
        read = list(csv.DictReader(fh))
    assert tuple(read[0]) == I.RESULT_COLUMNS and read[0]["snr_db"] == "31.5"


def test_solve_config_validation():
    assert I.SolveConfig(use_likelihood=True).method == "iflow-l"
    with pytest.raises(ValueError):
        I.SolveConfig(eta=0.0)
