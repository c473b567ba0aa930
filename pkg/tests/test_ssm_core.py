import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from srpssm.ssm_core import (
    ChangeScenario,
    ModelError,
    ModelSpec,
    ParamBinding,
    psd_sqrt,
    rep_rng,
    simulate_trajectory,
    stationary_draw,
)


@pytest.mark.parametrize(
    "text,expected",
    [
        ("H[0,0]", ParamBinding("H", 0, 0, 1.0)),
        ("0.5*G[1,0]", ParamBinding("G", 1, 0, 0.5)),
        (" -2 * J[0, 1] ", ParamBinding("J", 0, 1, -2.0)),
    ],
)
def test_binding_parse(text, expected):
    assert ParamBinding.parse(text) == expected


@pytest.mark.parametrize("text", ["Q[0,0]", "H[0]", "H(0,0)", "2x*H[0,0]"])
def test_binding_parse_rejects(text):
    with pytest.raises(ModelError):
        ParamBinding.parse(text)


def test_iid_reduction(iid):
    sys = iid.at(1.3)
    assert sys.J[0, 0] == 1.3 and sys.obs_offset[0] == 1.3
    assert np.all(sys.F == 0) and np.all(sys.H == 0) and np.all(sys.Sigma1 == 0)


def test_process_mean_stationary_law():
    m = ModelSpec.process_mean(0.6, sigma_eta=2.0)
    sys = m.at(1.5)
    assert sys.stationary_mean()[0] == pytest.approx(1.5, abs=1e-12)
    assert sys.stationary_cov()[0, 0] == pytest.approx(4.0 / (1 - 0.36), rel=1e-10)


def test_ar_mean_shift_companion():
    m = ModelSpec.ar_mean_shift([0.5, -0.2])
    sys = m.at(2.0)
    assert sys.stationary_mean()[0] == pytest.approx(2.0, abs=1e-12)
    np.testing.assert_array_equal(sys.F, [[0.5, -0.2], [1.0, 0.0]])


def test_model_rejections():
    with pytest.raises(ModelError):
        ModelSpec.ar_mean_shift([1.2])
    with pytest.raises(ModelError):
        ModelSpec.linear_gaussian([[1.1]], [[1.0]], [[1.0]], [[1.0]], binding="G[0,0]", G=[[0.0]], u=[1.0])
    with pytest.raises(ModelError):
        ModelSpec.linear_gaussian([[0.5]], [[1.0]], [[1.0]], [[0.0]], binding="G[0,0]", G=[[0.0]], u=[1.0])


def test_scenario_validation():
    with pytest.raises(ValueError):
        ChangeScenario(0.0, 1.0, 0)
    with pytest.raises(ValueError):
        ChangeScenario(0.0, 1.0, 2.5)
    with pytest.raises(ValueError):
        ChangeScenario(0.0, 0.0, 3)
    assert ChangeScenario(0.0, 0.0).omega_index > 10**15


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-0.9, 0.9), b=st.floats(-0.9, 0.9), s=st.floats(0.1, 3.0))
def test_stationary_cov_solves_lyapunov(a, b, s):
    F = np.array([[a, 0.1], [0.0, b]])
    if np.linalg.norm(F, 2) >= 1:
        return
    m = ModelSpec.linear_gaussian(F, np.eye(2), s * np.eye(2), np.eye(2), binding="G[0,0]", G=[[0.0], [0.0]], u=[1.0])
    P = m.at(0.0).stationary_cov()
    np.testing.assert_allclose(F @ P @ F.T + s * np.eye(2), P, rtol=1e-10, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_psd_sqrt_squares_back(vals):
    A = np.array(vals).reshape(2, 2)
    M = A @ A.T
    R = psd_sqrt(M)
    np.testing.assert_allclose(R @ R, M, atol=1e-9 * (1 + np.abs(M).max()))


def test_rep_streams_are_distinct_and_reproducible():
    a = rep_rng(5, 0).standard_normal(4)
    assert np.array_equal(a, rep_rng(5, 0).standard_normal(4))
    assert not np.array_equal(a, rep_rng(5, 1).standard_normal(4))
    assert not np.array_equal(a, rep_rng(6, 0).standard_normal(4))


def test_trajectory_regimes_and_determinism(pm):
    scen = ChangeScenario(0.0, 2.0, 4)
    t1 = simulate_trajectory(pm, scen, 8, seed=3)
    t2 = simulate_trajectory(pm, scen, 8, seed=3)
    assert np.array_equal(t1.observations, t2.observations)
    assert t1.regimes == ["pre"] * 3 + ["post"] * 5
    assert simulate_trajectory(pm, ChangeScenario(0.0, 0.0), 5, 1).regimes == ["pre"] * 5


def test_trajectory_csv(tmp_path, lin2):
    t = simulate_trajectory(lin2, ChangeScenario(0.0, 1.0, 2), 3, seed=1)
    path = tmp_path / "t.csv"
    t.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "k,y_1,y_2,regime"
    assert len(lines) == 4
    assert float(lines[2].split(",")[1]) == t.observations[1, 0]


def test_post_change_mean_shift_is_visible(iid):
    t = simulate_trajectory(iid, ChangeScenario(0.0, 3.0, 501), 1000, seed=2)
    assert abs(t.observations[:500].mean()) < 0.2
    assert abs(t.observations[500:].mean() - 3.0) < 0.2


def test_stationary_draw_ar1_variance():
    m = ModelSpec.ar_mean_shift([0.8])
    rng = np.random.default_rng(0)
    draws = np.array([stationary_draw(m, 0.0, rng)[0] for _ in range(20000)])
    assert draws.var() == pytest.approx(1 / (1 - 0.64), rel=0.05)


def test_describe_roundtrips_binding(lin2):
    d = lin2.describe()
    assert d["variant"] == "LinearGaussian" and d["binding"] == "G[0,0]"
    assert math.isclose(d["Sigma1"][0][1], 0.2)
