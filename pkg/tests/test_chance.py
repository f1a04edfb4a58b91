import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from covsteer.chance import (
    NotPSDError,
    build_halfspace_constraint,
    check_psd,
    deviation_map,
    gaussian_tail,
    inverse_psd_sqrt,
    inverse_standard_normal_cdf,
    noise_factor,
    psd_sqrt,
    standard_normal_cdf,
)
from covsteer.dynamics import assemble_block_operators, double_integrator_2d
from covsteer.policy import Policy, closed_loop_map, mean_trajectory, open_loop_covariance, state_covariance

mpmath.mp.dps = 40


def mp_quantile(p: float) -> float:
    return float(mpmath.sqrt(2) * mpmath.erfinv(2 * mpmath.mpf(p) - 1))


@pytest.mark.parametrize("p", [1e-12, 1e-9, 1e-6, 1e-3, 0.02425, 0.1, 0.3, 0.5, 0.7, 0.97575, 0.999, 1 - 1e-9])
def test_quantile_matches_high_precision_oracle(p):
    q = inverse_standard_normal_cdf(p)
    ref = mp_quantile(p)
    assert abs(q - ref) <= 1e-12 * max(1.0, abs(ref))


@settings(max_examples=200, deadline=None)
@given(st.floats(min_value=1e-9, max_value=1 - 1e-9))
def test_quantile_inverts_cdf(p):
    assert abs(standard_normal_cdf(inverse_standard_normal_cdf(p)) - p) <= 1e-9


def test_quantile_symmetry_and_known_values():
    assert inverse_standard_normal_cdf(0.5) == 0.0
    assert abs(inverse_standard_normal_cdf(0.975) - mp_quantile(0.975)) < 1e-14
    # 1 - p is rounded in binary; divided by the tail density that costs ~1e-10 at p = 1e-7.
    for p in (1e-7, 0.01, 0.2):
        assert inverse_standard_normal_cdf(p) == pytest.approx(-inverse_standard_normal_cdf(1 - p), abs=1e-9)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5, float("nan")])
def test_quantile_domain(p):
    with pytest.raises(ValueError):
        inverse_standard_normal_cdf(p)


def test_cdf_matches_mpmath():
    for z in (-8.0, -3.1, -0.4, 0.0, 1.7, 6.0):
        assert standard_normal_cdf(z) == pytest.approx(float(mpmath.ncdf(z)), rel=1e-13, abs=1e-300)


def test_psd_helpers(rng):
    G = rng.normal(size=(4, 4))
    S = G @ G.T + 0.1 * np.eye(4)
    R = psd_sqrt(S)
    np.testing.assert_allclose(R, R.T)
    np.testing.assert_allclose(R @ R, S, atol=1e-12)
    np.testing.assert_allclose(inverse_psd_sqrt(S) @ S @ inverse_psd_sqrt(S), np.eye(4), atol=1e-10)
    with pytest.raises(NotPSDError):
        check_psd(np.diag([1.0, -1e-3]))
    check_psd(np.diag([1.0, -1e-14]))  # round-off is tolerated


def _setup(rng, N=4):
    sys = double_integrator_2d(0.3, N, noise_scale=0.05)
    ops = assemble_block_operators(sys)
    Sigma0 = np.diag([0.1, 0.2, 0.01, 0.02])
    pol = Policy(rng.normal(size=(N, 2)), rng.normal(size=(N, 2, 4)) * 0.5)
    return sys, ops, Sigma0, pol


def test_noise_factor_reproduces_open_loop_covariance(rng):
    _, ops, Sigma0, _ = _setup(rng)
    L = noise_factor(ops, Sigma0)
    np.testing.assert_allclose(L @ L.T, open_loop_covariance(ops, Sigma0), atol=1e-13)


@pytest.mark.parametrize("k", [0, 1, 3, 4])
def test_deviation_map_matches_dense_product(rng, k):
    _, ops, Sigma0, pol = _setup(rng)
    L = noise_factor(ops, Sigma0)
    W = rng.normal(size=(2, 4))
    const, coeff = deviation_map(ops, L, k, W)
    dense = W @ closed_loop_map(ops, pol)[ops.rows(k)] @ L
    np.testing.assert_allclose(const.ravel() + coeff @ pol.kvec, dense.ravel(), atol=1e-12)


def test_halfspace_constraint_tail_equals_risk_when_active(rng):
    _, ops, Sigma0, pol = _setup(rng)
    mu0 = np.array([1.0, -1.0, 0.2, 0.0])
    alpha = np.array([0.6, -0.8, 0.0, 0.0])
    k, p = 3, 1e-3
    c = build_halfspace_constraint(ops, Sigma0, alpha, 0.0, k, p, mu0=mu0)
    # Choose beta so the deterministic constraint is exactly active.
    beta = c.mean_term(pol.V) + c.multiplier * c.spread(pol.kvec)
    xbar = mean_trajectory(ops, mu0, pol)[ops.rows(k)]
    var = alpha @ state_covariance(ops, Sigma0, pol)[ops.rows(k), ops.rows(k)] @ alpha
    assert c.spread(pol.kvec) == pytest.approx(math.sqrt(var), rel=1e-12)
    assert gaussian_tail(alpha @ xbar, var, beta) == pytest.approx(p, rel=1e-9)
    assert gaussian_tail(alpha @ xbar, var, beta + 0.01) < p


def test_halfspace_constraint_rejects_bad_risk(rng):
    _, ops, Sigma0, _ = _setup(rng)
    for p in (0.0, 0.5, 0.7):
        with pytest.raises(ValueError):
            build_halfspace_constraint(ops, Sigma0, np.ones(4), 1.0, 1, p)
    with pytest.raises(IndexError):
        build_halfspace_constraint(ops, Sigma0, np.ones(4), 1.0, 9, 0.01)


def test_gaussian_tail_degenerate():
    assert gaussian_tail(1.0, 0.0, 0.5) == 1.0
    assert gaussian_tail(0.0, 0.0, 0.5) == 0.0
    assert gaussian_tail(0.0, 1.0, 0.0) == 0.5
