"""
Maps from unconstrained pre-weights to long-only, fully invested weights, plus
the straight-through binary masks used by threshold-style constraints.

Every function accepts either tape nodes (returns a node) or plain arrays
(returns an array).
"""

from __future__ import annotations

import numpy as np

from . import tape
from .tape import lift

# Shifts the mask switch so that a value exactly at the threshold maps to 0.
MASK_EPS = 1e-16

PROJECTIONS = ("softmax", "sparsemax")


@lift(1)
def softmax(z):
    """Max-shifted softmax; strictly positive, sums to one, never overflows."""
    shifted = tape.exp(z - tape.max(z))
    return shifted / tape.sum(shifted)


@lift(1)
def sparsemax(z):
    """Euclidean projection of ``z`` onto the probability simplex.

    Unlike softmax the result can contain exact zeros, which is what makes
    sparse portfolios reachable by gradient descent.
    """
    return tape.sparsemax(z, name="weights")


def project(z, kind: str = "sparsemax"):
    if kind == "sparsemax":
        return sparsemax(z)
    if kind == "softmax":
        return softmax(z)
    raise ValueError(f"unknown projection {kind!r}; expected one of {PROJECTIONS}")


def sparsemax_jacobian_vector_product(z, upstream) -> np.ndarray:
    """Backpropagate ``upstream`` through sparsemax at ``z``.

    On the support ``S`` the result is ``upstream - mean(upstream[S])``; off the
    support it is zero because truncated coordinates are locally constant.
    """
    w = tape.sparsemax_kernel(np.asarray(z, dtype=float))
    return tape.sparsemax_vjp_kernel(w, upstream)


@lift(1)
def round_sigmoid(x, decimals: int = 0):
    """``round(sigmoid(x) * 10**d) / 10**d`` with the sigmoid derivative as gradient.

    Halves round up, so ``round_sigmoid(0) == 1``.
    """
    return tape.round_sigmoid(x, decimals)


@lift(1)
def mask_above(x, threshold: float):
    """1 where ``x > threshold`` (strictly), else 0; straight-through gradient."""
    return tape.round_sigmoid((x - threshold) - MASK_EPS)


@lift(1)
def mask_below(x, threshold: float):
    """1 where ``x < threshold`` (strictly), else 0; straight-through gradient."""
    return tape.round_sigmoid((threshold - x) - MASK_EPS)
