"""Similarity and alignment measures between attribution maps.

All functions operate on flat numeric arrays; callers apply any abs /
channel-mean reduction before comparing.
"""

import numpy as np
import scipy.stats


class UndefinedCorrelationError(ValueError):
    """Rank correlation is undefined (fewer than two items, or one input all-tied)."""


class DegenerateInputError(ValueError):
    """A vector norm is numerically zero, so the cosine is undefined."""


DEGENERATE_NORM_FLOOR = 1e-12


def topk_indices(values, k):
    """Indices of the k largest values, descending, ties broken by lowest index."""
    values = np.asarray(values).ravel()
    if not 1 <= k <= values.size:
        raise ValueError(f"k must be in [1, {values.size}], got {k}")
    order = np.argsort(-values, kind="stable")
    return order[:k]


def topk_intersection(a, b, k) -> float:
    """Fraction of shared indices among the k largest entries of a and b."""
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    ia = topk_indices(a, k)
    ib = topk_indices(b, k)
    return len(np.intersect1d(ia, ib)) / float(k)


def kendall_tau(a, b) -> float:
    """Tie-corrected rank correlation (tau-b) between two equal-length vectors.

    Matches the O(n^2) pair-enumeration definition
    (C - D) / sqrt((C + D + Ta) (C + D + Tb)) with Ta / Tb the pairs tied only
    in a / only in b.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    if a.size < 2:
        raise UndefinedCorrelationError("need at least two items")
    if np.all(a == a[0]) or np.all(b == b[0]):
        raise UndefinedCorrelationError("correlation undefined for an all-tied input")
    tau = scipy.stats.kendalltau(a, b, variant="b").statistic
    if np.isnan(tau):
        raise UndefinedCorrelationError("correlation undefined for these inputs")
    return float(tau)


def cosine_alignment(x, g, channel_mean=False) -> float:
    """Cosine of the angle between two tensors, flattened.

    1 - cosine is the distance the alignment loss is built on.  channel_mean
    averages over a leading channel axis first (used for high-resolution runs).
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if x.shape != g.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {g.shape}")
    if channel_mean:
        x = x.mean(axis=0)
        g = g.mean(axis=0)
    x = x.ravel()
    g = g.ravel()
    nx = np.linalg.norm(x)
    ng = np.linalg.norm(g)
    if nx < DEGENERATE_NORM_FLOOR or ng < DEGENERATE_NORM_FLOOR:
        raise DegenerateInputError(
            f"norms too small for a defined cosine ({nx:.3e}, {ng:.3e})")
    return float(np.dot(x, g) / (nx * ng))
