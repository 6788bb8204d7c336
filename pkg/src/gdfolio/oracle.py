"""
Slow, independent ground truth: exhaustive search over a simplex grid and a
stand-alone Euclidean simplex projection.

Nothing here touches the tape. The batch objectives below re-derive every
metric with plain numpy so they can be used to cross-check the gradient path.
"""

from __future__ import annotations

from functools import lru_cache
from math import comb
from typing import Callable

import numpy as np

from .errors import ConfigError, EnumerationError

MAX_COMPOSITIONS = 10**7
_CHUNK_ROWS = 20_000


def euclidean_simplex_projection(z) -> np.ndarray:
    """argmin over the simplex of ``||w - z||^2``.

    Sort descending, find the largest ``rho`` with
    ``u_rho - (sum_{j<=rho} u_j - 1) / rho > 0`` and shift by that threshold.
    Written with plain loops on purpose.
    """
    values = [float(v) for v in np.ravel(z)]
    u = sorted(values, reverse=True)
    running = 0.0
    theta = 0.0
    for j, uj in enumerate(u, start=1):
        running += uj
        candidate = (running - 1.0) / j
        if uj - candidate > 0:
            theta = candidate
    return np.array([v - theta if v > theta else 0.0 for v in values])


def composition_count(n: int, step: float) -> int:
    return comb(_resolution(step) + n - 1, n - 1)


def _resolution(step: float) -> int:
    if step <= 0 or step > 1:
        raise ValueError(f"step must lie in (0, 1], got {step}")
    units = round(1.0 / step)
    if abs(units * step - 1.0) > 1e-9:
        raise ValueError(f"1/step must be an integer, got step={step}")
    return units


@lru_cache(maxsize=64)
def _compositions(total: int, parts: int) -> np.ndarray:
    """All nonnegative integer vectors of length ``parts`` summing to ``total``,
    in ascending lexicographic order."""
    if parts == 1:
        return np.array([[total]], dtype=np.int32)
    blocks = []
    for first in range(total + 1):
        rest = _compositions(total - first, parts - 1)
        block = np.empty((rest.shape[0], parts), dtype=np.int32)
        block[:, 0] = first
        block[:, 1:] = rest
        blocks.append(block)
    return np.concatenate(blocks)


def simplex_grid(n: int, step: float) -> np.ndarray:
    """Every weight vector on the simplex with coordinates in multiples of ``step``."""
    units = _resolution(step)
    count = comb(units + n - 1, n - 1)
    if count > MAX_COMPOSITIONS:
        raise EnumerationError(
            f"simplex grid n={n}, step={step} has {count} points (> {MAX_COMPOSITIONS})")
    return _compositions(units, n) / units


def simplex_grid_search(objective: Callable, n: int, step: float,
                        maximize: bool = False, batched: bool = True):
    """Exhaustively evaluate ``objective`` on the simplex grid.

    With ``batched=True`` the objective receives a (rows x n) matrix and must
    return one value per row; otherwise it is called once per weight vector.
    Non-finite values are never selected. Ties go to the lexicographically
    smallest weight vector.

    Returns ``(best_weights, best_value)``.
    """
    units = _resolution(step)
    count = comb(units + n - 1, n - 1)
    if count > MAX_COMPOSITIONS:
        raise EnumerationError(
            f"simplex grid n={n}, step={step} has {count} points (> {MAX_COMPOSITIONS})")
    sign = -1.0 if maximize else 1.0
    best_w, best_v = None, np.inf
    # partition by first coordinate; blocks arrive in lexicographic order
    for first in range(units + 1):
        rest = _compositions(units - first, n - 1) if n > 1 else np.empty((1, 0), np.int32)
        if n == 1 and first != units:
            continue
        block = np.empty((rest.shape[0], n))
        block[:, 0] = first
        block[:, 1:] = rest
        block /= units
        for start in range(0, block.shape[0], _CHUNK_ROWS):
            W = block[start:start + _CHUNK_ROWS]
            if batched:
                vals = np.asarray(objective(W), dtype=float)
            else:
                vals = np.array([objective(w) for w in W], dtype=float)
            vals = np.where(np.isfinite(vals), sign * vals, np.inf)
            i = int(np.argmin(vals))
            if vals[i] < best_v:
                best_v, best_w = vals[i], W[i].copy()
    if best_w is None:
        raise EnumerationError("objective was non-finite on every grid point")
    return best_w, sign * best_v


# ---------------------------------------------------------------------------
# batch objectives: W is (rows x n), returns is (T x n)

def batch_portfolio_returns(W, returns):
    return np.asarray(W) @ np.asarray(returns).T


def batch_sharpe(W, returns, risk_free=0.0):
    R = batch_portfolio_returns(W, returns)
    sd = R.std(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = (R.mean(axis=1) - risk_free) / sd
    return np.where(sd > 0, out, np.nan)


def batch_var(W, returns, alpha=0.05):
    R = batch_portfolio_returns(W, returns)
    return -np.quantile(R, alpha, axis=1, method="linear")


def batch_cvar(W, returns, alpha=0.05):
    R = batch_portfolio_returns(W, returns)
    var = -np.quantile(R, alpha, axis=1, method="linear")
    tail = np.maximum(-R - var[:, None], 0.0).mean(axis=1)
    return var + tail / alpha


def batch_volatility(W, returns):
    return batch_portfolio_returns(W, returns).std(axis=1)


def batch_mean_variance(W, returns, risk_aversion=1.0):
    R = batch_portfolio_returns(W, returns)
    return -(R.mean(axis=1) - risk_aversion * R.var(axis=1))


def batch_tracking_error(W, returns, benchmark):
    R = batch_portfolio_returns(W, returns)
    return (R - np.asarray(benchmark)[None, :]).std(axis=1)


def batch_penalty(kind, W, returns, benchmark, params):
    W = np.asarray(W)
    if kind == "te":
        return np.maximum(batch_tracking_error(W, returns, benchmark) - params["te_max"], 0.0)
    if kind == "ucits10":
        return np.maximum(W - params.get("cap", 0.10), 0.0).sum(axis=1)
    if kind == "ucits540":
        lower, upper = params.get("lower", 0.05), params.get("upper", 0.40)
        return np.maximum((W * (W > lower)).sum(axis=1) - upper, 0.0)
    if kind == "min_weight":
        return (W * (W < params["m"])).sum(axis=1)
    if kind == "count_range":
        k = (W > 0).sum(axis=1)
        return np.maximum((params["low"] - k) * (params["high"] - k), 0.0)
    if kind == "group_mask":
        M = np.asarray(params["matrix"], dtype=float)
        return np.abs(np.asarray(params["max_weights"])[None, :] - W @ M).sum(axis=1)
    raise ConfigError(f"oracle has no penalty of kind {kind!r}")


def batch_objective(kind, W, returns, params):
    if kind == "sharpe":
        return -batch_sharpe(W, returns, params.get("risk_free", 0.0))
    if kind == "cvar":
        return batch_cvar(W, returns, params.get("alpha", 0.05))
    if kind == "volatility":
        return batch_volatility(W, returns)
    if kind == "mean_variance":
        return batch_mean_variance(W, returns, params.get("risk_aversion", 1.0))
    raise ConfigError(f"oracle has no objective of kind {kind!r}")


def batch_loss(terms, returns, benchmark=None) -> Callable[[np.ndarray], np.ndarray]:
    """Weighted composite loss over rows of W.

    ``terms`` is an iterable of ``(kind, weight, params)``; sharpe enters negated.
    """
    terms = list(terms)

    def loss(W):
        total = np.zeros(np.shape(W)[0])
        for kind, weight, params in terms:
            try:
                vals = batch_objective(kind, W, returns, params)
            except ConfigError:
                vals = batch_penalty(kind, W, returns, benchmark, params)
            total = total + weight * vals
        return total

    return loss
