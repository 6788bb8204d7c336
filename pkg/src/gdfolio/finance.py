"""
Differentiable portfolio objectives and penalty constraints.

All statistics use population normalisation (divide by T). Each function
builds a tape graph when given nodes and evaluates immediately when given
arrays::

    >>> sharpe_ratio(np.array([0.01, 0.03]))
    2.0

Penalties are zero exactly when their constraint holds and positive otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tape
from .errors import ShapeError
from .projection import mask_above, mask_below
from .tape import lift

UCITS_SINGLE_CAP = 0.10
UCITS_AGGREGATE_LOWER = 0.05
UCITS_AGGREGATE_UPPER = 0.40


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")


def _check_same_length(a, b, what):
    if not isinstance(a, tape.Node) and not isinstance(b, tape.Node):
        if np.shape(a) != np.shape(b):
            raise ShapeError(f"{what}: length mismatch {np.shape(a)} vs {np.shape(b)}")


@dataclass(frozen=True)
class GroupMaskSet:
    """Asset-group membership (n x m, 0/1) and the target weight of each group."""

    matrix: np.ndarray
    max_weights: np.ndarray

    def __post_init__(self):
        matrix = np.array(self.matrix, dtype=float)
        max_weights = np.array(self.max_weights, dtype=float).ravel()
        if matrix.ndim != 2:
            raise ShapeError(f"group mask matrix must be 2-d, got shape {matrix.shape}")
        if matrix.shape[1] != max_weights.size:
            raise ShapeError(
                f"{matrix.shape[1]} masks but {max_weights.size} maximum weights")
        if not np.isin(matrix, (0.0, 1.0)).all():
            raise ValueError("group mask entries must be 0 or 1")
        if max_weights.sum() > 1.0 + 1e-12:
            raise ValueError(f"mask budgets sum to {max_weights.sum():.6g} > 1")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "max_weights", max_weights)

    @property
    def n_assets(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def from_members(cls, assets, groups, max_weights):
        """Build from asset-name lists; ``assets`` fixes the row order."""
        index = {a: i for i, a in enumerate(assets)}
        matrix = np.zeros((len(assets), len(groups)))
        for j, members in enumerate(groups):
            for name in members:
                if name not in index:
                    raise KeyError(f"mask asset {name!r} not in panel")
                matrix[index[name], j] = 1.0
        return cls(matrix, max_weights)


@lift(1)
def portfolio_returns(w, asset_returns):
    """Per-period portfolio return ``R_t = sum_i w_i r_{i,t}`` (asset_returns is T x n)."""
    return tape.matvec(asset_returns, w, name="portfolio returns")


@lift(1)
def variance(R):
    dev = R - tape.mean(R)
    return tape.mean(dev * dev)


@lift(1)
def mean_variance_objective(R, risk_aversion: float):
    """Negated mean-variance utility, so that minimising it maximises utility."""
    return -(tape.mean(R) - risk_aversion * variance(R))


@lift(1)
def sharpe_ratio(R, risk_free: float = 0.0):
    return tape.div(tape.mean(R) - risk_free, tape.std(R), name="sharpe",
                    zero_message="degenerate portfolio volatility")


@lift(1)
def value_at_risk(R, alpha: float = 0.05):
    _check_alpha(alpha)
    return -tape.percentile(R, alpha * 100.0, name="var quantile")


@lift(1)
def cvar(R, alpha: float = 0.05):
    """Value-at-risk plus the mean shortfall beyond it, scaled by ``1/alpha``."""
    var = value_at_risk(R, alpha)
    shortfall = tape.relu(-R - var)
    return var + tape.mean(shortfall) / alpha


@lift(1)
def volatility(R):
    return tape.std(R, name="volatility")


def tracking_error(R, I):
    _check_same_length(R, I, "tracking_error")
    return _tracking_error(R, I)


@lift(2)
def _tracking_error(R, I):
    return tape.std(R - I, name="tracking error")


def constraint_te(R, I, te_max: float):
    if te_max < 0:
        raise ValueError("te_max must be >= 0")
    _check_same_length(R, I, "constraint_te")
    return _constraint_te(R, I, te_max)


@lift(2)
def _constraint_te(R, I, te_max):
    return tape.relu(_tracking_error(R, I) - te_max)


@lift(1)
def constraint_ucits_10(w, cap: float = UCITS_SINGLE_CAP):
    """Total weight in excess of the single-asset cap."""
    return tape.sum(tape.relu(w - cap))


@lift(1)
def ucits_masked_sum(w, lower: float = UCITS_AGGREGATE_LOWER):
    """Sum of the weights strictly above ``lower``."""
    return tape.sum(w * mask_above(w, lower))


@lift(1)
def constraint_ucits_5_40(w, lower: float = UCITS_AGGREGATE_LOWER,
                          upper: float = UCITS_AGGREGATE_UPPER):
    return tape.relu(ucits_masked_sum(w, lower) - upper)


@lift(1)
def constraint_min_weight(w, m: float):
    """Total weight held in active positions smaller than ``m``.

    Zero-weight assets are flagged by the mask but contribute ``0 * 1``.
    """
    if not 0.0 < m < 1.0:
        raise ValueError(f"minimum weight must lie in (0, 1), got {m}")
    return tape.sum(w * mask_below(w, m))


@lift(1)
def active_count(w):
    return tape.sum(mask_above(w, 0.0))


@lift(1)
def constraint_count_range(w, low: int, high: int):
    if not 0 < low <= high:
        raise ValueError(f"need 0 < low <= high, got low={low}, high={high}")
    k = active_count(w)
    return tape.relu((low - k) * (high - k))


def constraint_group_mask(w, groups: GroupMaskSet):
    """Sum over groups of ``|target_j - sum_i w_i M_ij|`` (two-sided)."""
    if not isinstance(w, tape.Node) and np.size(w) != groups.n_assets:
        raise ShapeError(f"{np.size(w)} weights but mask matrix has {groups.n_assets} rows")
    return _group_mask(w, groups)


@lift(1)
def group_weights(w, matrix):
    return tape.matvec(np.asarray(matrix, dtype=float).T, w, name="group weights")


@lift(1)
def _group_mask(w, groups):
    achieved = group_weights(w, groups.matrix)
    return tape.sum(tape.abs(groups.max_weights - achieved))
