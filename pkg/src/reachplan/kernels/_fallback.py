"""Numpy implementations of the expectile kernels (reference and fallback)."""

from __future__ import annotations

import numpy as np


def expectile_weights(u: np.ndarray, tau: float) -> np.ndarray:
    """|tau - 1{u < 0}| elementwise."""
    u = np.asarray(u, dtype=np.float64)
    return np.where(u < 0.0, 1.0 - tau, tau)


def grouped_expectile(values, weights, group_ids, n_groups: int, tau: float) -> np.ndarray:
    """Exact weighted tau-expectile of ``values`` within each group.

    Groups without samples (or with zero total weight) come back as NaN.
    """
    y = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    g = np.asarray(group_ids, dtype=np.int64)
    out = np.full(n_groups, np.nan)
    order = np.lexsort((y, g))
    y, w, g = y[order], w[order], g[order]
    bounds = np.flatnonzero(np.diff(g)) + 1
    starts = np.concatenate(([0], bounds))
    ends = np.concatenate((bounds, [len(g)]))
    for s, e in zip(starts, ends):
        if s == e:
            continue
        out[g[s]] = _expectile_sorted(y[s:e], w[s:e], tau)
    return out


def _expectile_sorted(y: np.ndarray, w: np.ndarray, tau: float) -> float:
    # Split j puts y[:j] below m with weight (1 - tau) and y[j:] above with tau;
    # the root of the first-order condition is the m_j that lands in its bracket.
    lo_w = np.concatenate(([0.0], np.cumsum((1.0 - tau) * w)))
    lo_wy = np.concatenate(([0.0], np.cumsum((1.0 - tau) * w * y)))
    hi_w = tau * (w.sum() - np.concatenate(([0.0], np.cumsum(w))))
    hi_wy = tau * ((w * y).sum() - np.concatenate(([0.0], np.cumsum(w * y))))
    den = lo_w + hi_w
    if den[0] <= 0.0 and den[-1] <= 0.0:
        return float("nan")
    n = len(y)
    for j in range(n + 1):
        if den[j] <= 0.0:
            continue
        m = (lo_wy[j] + hi_wy[j]) / den[j]
        left = y[j - 1] if j > 0 else -np.inf
        right = y[j] if j < n else np.inf
        if left <= m <= right:
            return float(m)
    return float(y[-1])


def expectile_loss_grad(X, y, w, tau: float, sample_weight=None):
    """Mean expectile loss of residuals ``y - X @ w`` and its gradient in ``w``."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    u = y - X @ np.asarray(w, dtype=np.float64)
    a = expectile_weights(u, tau)
    sw = np.ones_like(u) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
    total = sw.sum()
    loss = float(np.sum(sw * a * u * u) / total)
    grad = -2.0 * (X.T @ (sw * a * u)) / total
    return loss, grad
