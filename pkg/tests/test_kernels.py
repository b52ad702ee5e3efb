import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dpwarm import kernels
from dpwarm._ext import _fallback

compiled = pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")


def _backend_with(env):
    out = subprocess.run([sys.executable, "-c", "from dpwarm import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env={**os.environ, **env}, check=True)
    return out.stdout.strip()


def test_env_forces_fallback():
    assert _backend_with({"DPWARM_PURE_PYTHON": "1"}) == "python"


@compiled
def test_compiled_backend_is_default():
    env = {k: v for k, v in os.environ.items() if k != "DPWARM_PURE_PYTHON"}
    out = subprocess.run([sys.executable, "-c", "from dpwarm import kernels; print(kernels.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "cython"


finite = st.floats(-3, 3, allow_nan=False)


@compiled
@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.data())
def test_backends_agree(d, n, data):
    X = data.draw(arrays(np.float64, (n, d), elements=finite))
    y = data.draw(arrays(np.float64, (n,), elements=st.floats(0, 1)))
    w = data.draw(arrays(np.float64, (d,), elements=finite))
    idx = data.draw(st.none() | arrays(np.int64, st.integers(1, 5), elements=st.integers(0, n - 1)))
    for name in ("sine_bowl_mean_value", "sine_bowl_mean_grad", "quadratic_mean_value", "quadratic_mean_grad"):
        a = getattr(kernels, name)(w, X, idx)
        b = getattr(_fallback, name)(w, X, idx)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12), name
    for name in ("glm_mean_value", "glm_mean_grad"):
        assert np.allclose(getattr(kernels, name)(w, X, y, idx), getattr(_fallback, name)(w, X, y, idx),
                           rtol=1e-12, atol=1e-12), name
    assert np.allclose(kernels.mean_rows(X, idx), _fallback.mean_rows(X, idx), rtol=1e-12, atol=1e-12)


def test_fallback_runs_full_pipeline():
    code = ("from dpwarm.bench import ExperimentConfig, run_experiment;"
            "r = run_experiment(ExperimentConfig(n=20, d=3, epsilons=(1.0,), trials=1), write=False);"
            "print(len(r.rows))")
    out = subprocess.run([sys.executable, "-c", code], capture_output=True, text=True,
                         env={**os.environ, "DPWARM_PURE_PYTHON": "1"}, check=True)
    assert out.stdout.strip() == "3"
