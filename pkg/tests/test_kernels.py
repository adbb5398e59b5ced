import importlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import minimize_scalar

from reachplan import kernels
from reachplan.kernels import _fallback

try:
    from reachplan.kernels import _expectile as _compiled
except ImportError:  # pragma: no cover - extension not built
    _compiled = None

BACKENDS = [_fallback] + ([_compiled] if _compiled is not None else [])
needs_compiled = pytest.mark.skipif(_compiled is None, reason="compiled extension not built")

floats = st.floats(-5, 5, allow_nan=False)


def _brute(y, w, tau):
    f = lambda v: np.sum(w * np.abs(tau - (y - v < 0)) * (y - v) ** 2)
    return minimize_scalar(f, bounds=(y.min() - 1, y.max() + 1), method="bounded", options={"xatol": 1e-12}).x


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
@given(data=st.data(), tau=st.floats(0.05, 0.95))
@settings(max_examples=60, deadline=None)
def test_grouped_expectile_matches_brute_force(impl, data, tau):
    n = data.draw(st.integers(1, 30))
    y = data.draw(arrays(np.float64, n, elements=floats))
    w = data.draw(arrays(np.float64, n, elements=st.floats(0.01, 3)))
    got = impl.grouped_expectile(y, w, np.zeros(n, dtype=np.int64), 1, tau)[0]
    assert got == pytest.approx(_brute(y, w, tau), abs=1e-6)
    assert y.min() - 1e-12 <= got <= y.max() + 1e-12


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.__name__.rsplit(".", 1)[-1])
def test_empty_groups_are_nan(impl):
    out = impl.grouped_expectile(np.array([1.0, 2.0]), np.ones(2), np.array([0, 2]), 3, 0.5)
    assert out[0] == 1.0 and np.isnan(out[1]) and out[2] == 2.0


def test_half_expectile_is_weighted_mean():
    rng = np.random.default_rng(1)
    y, w = rng.random(50), rng.random(50)
    got = kernels.grouped_expectile(y, w, np.zeros(50, dtype=np.int64), 1, 0.5)[0]
    assert got == pytest.approx(np.average(y, weights=w), abs=1e-12)


@needs_compiled
@given(data=st.data(), tau=st.floats(0.01, 0.99))
@settings(max_examples=50, deadline=None)
def test_backends_agree(data, tau):
    n = data.draw(st.integers(1, 80))
    g = data.draw(st.integers(1, 6))
    y = data.draw(arrays(np.float64, n, elements=floats))
    w = data.draw(arrays(np.float64, n, elements=st.floats(0.0, 2)))
    gid = data.draw(arrays(np.int64, n, elements=st.integers(0, g - 1)))
    a = _fallback.grouped_expectile(y, w, gid, g, tau)
    b = _compiled.grouped_expectile(y, w, gid, g, tau)
    np.testing.assert_allclose(a, b, atol=1e-12, equal_nan=True)
    np.testing.assert_allclose(_fallback.expectile_weights(y, tau), _compiled.expectile_weights(y, tau), atol=0)
    X = data.draw(arrays(np.float64, (n, 3), elements=floats))
    wv = data.draw(arrays(np.float64, 3, elements=floats))
    la, ga = _fallback.expectile_loss_grad(X, y, wv, tau)
    lb, gb = _compiled.expectile_loss_grad(X, y, wv, tau)
    assert la == pytest.approx(lb, rel=1e-12, abs=1e-12)
    np.testing.assert_allclose(ga, gb, rtol=1e-10, atol=1e-10)


def test_pure_env_forces_fallback(monkeypatch):
    monkeypatch.setenv("REACHPLAN_PURE", "1")
    mod = importlib.reload(kernels)
    try:
        assert mod.BACKEND == "python"
        assert mod.grouped_expectile is _fallback.grouped_expectile
    finally:
        monkeypatch.delenv("REACHPLAN_PURE")
        importlib.reload(kernels)
