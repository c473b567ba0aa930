import math
import os
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from srpssm import kernels
from srpssm.detectors import BatchEngine, DetectorConfig, estimate_psi
from srpssm.lr_engine import PriorGrid
from srpssm.ssm_core import ChangeScenario

compiled = pytest.mark.skipif(kernels.run_block_compiled is None, reason="extension not built")


def _pair(model, scen, cfg, n=400, seed=3):
    a = BatchEngine(model, scen, cfg, kernel=kernels.run_block_py).run(n, seed, record_path=True)
    b = BatchEngine(model, scen, cfg, kernel=kernels.run_block_compiled).run(n, seed, record_path=True)
    return a, b


@compiled
@pytest.mark.parametrize("rule,grid", [
    ("weighted_srp", PriorGrid.gauss_legendre(0.5, 1.5, m=7)),
    ("sr_point", PriorGrid.point(1.0)),
    ("cusum", PriorGrid.point(1.0)),
])
@pytest.mark.parametrize("fixture", ["iid", "pm", "lin2"])
def test_compiled_matches_fallback(request, fixture, rule, grid):
    model = request.getfixturevalue(fixture)
    cfg = DetectorConfig(b=3.0, grid=grid, rule=rule)
    a, b = _pair(model, ChangeScenario(0.0, 1.0, 4), cfg)
    np.testing.assert_array_equal(a.stop_time, b.stop_time)
    np.testing.assert_allclose(a.stat, b.stat, rtol=1e-12)
    np.testing.assert_allclose(a.log_lr, b.log_lr, rtol=1e-11, atol=1e-11)
    for pa, pb in zip(a.paths, b.paths):
        np.testing.assert_allclose(pa, pb, rtol=1e-12, atol=1e-12)


@compiled
def test_compiled_matches_fallback_lr_rule_censored(pm):
    cfg = DetectorConfig(b=math.inf, grid=PriorGrid.gauss_legendre(0.1, 0.4, m=3), rule="lr", max_steps=40)
    a, b = _pair(pm, ChangeScenario(0.0, 0.0), cfg, n=100)
    assert a.censored.all() and b.censored.all()
    np.testing.assert_allclose(a.log_r, b.log_r, rtol=1e-12, atol=1e-12)


@compiled
def test_compiled_matches_fallback_psi_init(iid):
    cfg = DetectorConfig(b=3.0, grid=PriorGrid.gauss_legendre(0.5, 1.5, m=5))
    psi = estimate_psi(iid, 0.0, cfg, n_particles=1000, n_iters=30, seed=2)
    a, b = _pair(iid, ChangeScenario(0.0, 1.0, 3), replace(cfg, init_mode="psi", psi=psi))
    np.testing.assert_array_equal(a.stop_time, b.stop_time)


def test_backend_selection_env():
    env = dict(os.environ, SRPSSM_PURE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from srpssm import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"


@compiled
def test_default_backend_is_compiled():
    if os.environ.get("SRPSSM_PURE_PYTHON", "") not in ("", "0"):
        pytest.skip("fallback forced")
    assert kernels.BACKEND == "cython"
