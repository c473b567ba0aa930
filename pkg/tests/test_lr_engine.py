import math

import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import joint_gaussian_loglik, sr_double_sum
from scipy import integrate

from srpssm.lr_engine import LRProcess, PriorGrid, log_ndtr_diff, softplus, uniform_mixture_closed_form
from srpssm.ssm_core import ChangeScenario, simulate_trajectory

# mpmath quadrature of the fixed case below
FROZEN_CLOSED_FORM = -0.3371661930876628


def test_softplus():
    assert softplus(-math.inf) == 0.0
    assert softplus(0.0) == pytest.approx(math.log(2))
    assert softplus(800.0) == pytest.approx(800.0)
    assert softplus(-800.0) == 0.0


def test_grid_integrates_polynomials():
    g = PriorGrid.gauss_legendre(0.5, 1.5, m=9)
    assert g.weights.sum() == pytest.approx(1.0, abs=1e-14)
    # uniform moments: E theta^5 on (0.5, 1.5)
    assert np.dot(g.weights, g.nodes**5) == pytest.approx((1.5**6 - 0.5**6) / 6, rel=1e-13)
    assert g.density_at(1.0) == pytest.approx(1.0)


def test_grid_custom_density_and_checks():
    g = PriorGrid.gauss_legendre(0.0, 1.0, m=7, density=lambda t: 2 * t)
    assert np.dot(g.weights, g.nodes) == pytest.approx(2 / 3, rel=1e-12)
    with pytest.raises(ValueError):
        g.check_theta0(0.0)
    with pytest.raises(ValueError):
        PriorGrid.gauss_legendre(1.0, 1.0)


def test_iid_increment_closed_form(iid):
    proc = LRProcess(iid, 0.0, PriorGrid.point(1.3))
    for y in [0.2, -1.0, 2.5]:
        assert proc.loglr_increment(0, y) == pytest.approx(1.3 * y - 0.5 * 1.3**2, abs=1e-13)


def test_sr_recursion_vs_double_sum(lin2):
    theta0, theta = 0.0, 0.8
    ys = simulate_trajectory(lin2, ChangeScenario(theta0, theta, 3), 6, seed=9).observations
    proc = LRProcess(lin2, theta0, PriorGrid.point(theta))
    s0, s1 = lin2.at(theta0), lin2.at(theta)
    log_lr = [0.0]
    for j in range(1, 7):
        l1 = joint_gaussian_loglik(s1.F, s1.H, s1.state_offset, s1.obs_offset, s1.Sigma1, s1.Sigma2, ys[:j])
        l0 = joint_gaussian_loglik(s0.F, s0.H, s0.state_offset, s0.obs_offset, s0.Sigma1, s0.Sigma2, ys[:j])
        log_lr.append(l1 - l0)
    for y in ys:
        proc.sr_update(y)
    assert proc.log_r[0] == pytest.approx(sr_double_sum(log_lr), rel=1e-10)
    assert proc.log_lr[0] == pytest.approx(log_lr[-1], abs=1e-9)


def test_weighted_stat_is_log_mixture(iid):
    g = PriorGrid.gauss_legendre(0.5, 1.5, m=5)
    proc = LRProcess(iid, 0.0, g)
    for y in [1.0, 0.4]:
        proc.sr_update(y)
    assert proc.weighted_stat() == pytest.approx(math.log(np.dot(g.weights, np.exp(proc.log_r))), rel=1e-13)


@pytest.mark.parametrize("hi,lo", [(-39.0, -40.0), (40.0, 39.0), (2.0, -1.0), (0.1, 0.0), (-8.0, -8.5)])
def test_log_ndtr_diff_tails(hi, lo):
    mp.mp.dps = 50
    # mirror into the lower tail so the reference does not cancel
    ref = mp.log(mp.ncdf(-lo) - mp.ncdf(-hi)) if lo > 0 else mp.log(mp.ncdf(hi) - mp.ncdf(lo))
    assert log_ndtr_diff(hi, lo) == pytest.approx(float(ref), rel=1e-12)


def test_closed_form_frozen():
    e = [0.3, 1.1, 0.7]
    a = [0.0, 0.1, -0.2]
    s = [1.0, 0.5, 2.0]
    e0 = [0.2, -0.4, 0.9]
    s0 = [1.0, 1.0, 1.5]
    assert uniform_mixture_closed_form(e, a, s, e0, s0) == pytest.approx(FROZEN_CLOSED_FORM, rel=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(1, 15))
def test_closed_form_vs_quadrature(seed, n):
    rng = np.random.default_rng(seed)
    e, a = rng.normal(0.5, 1.5, n), rng.normal(0, 0.5, n)
    s, e0, s0 = rng.uniform(0.5, 2, n), rng.normal(0, 1, n), rng.uniform(0.5, 2, n)
    cf = uniform_mixture_closed_form(e, a, s, e0, s0)

    def f(th):
        v = np.sum(-((e - th - a) ** 2) / (2 * s**2)) + np.sum(e0**2 / (2 * s0**2))
        return math.exp(v - cf)

    q = integrate.quad(f, 0.0, 1.0, epsabs=0, epsrel=1e-13, limit=200)[0]
    assert q == pytest.approx(1.0, rel=1e-8)


def test_closed_form_rejects_bad_scales():
    with pytest.raises(ValueError):
        uniform_mixture_closed_form([1.0], [0.0], [0.0], [0.0], [1.0])
