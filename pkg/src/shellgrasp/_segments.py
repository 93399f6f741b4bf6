"""Reductions over concatenated variable-length point groups.

A batch of point sets is stored as one ``(T, ...)`` array plus an ``offsets``
vector of length ``B + 1``; group ``i`` is ``X[offsets[i]:offsets[i + 1]]``.
Every reduction here computes each group's result from that group's data
alone, so results do not depend on how groups are batched together.
"""
import numpy as np


def counts(offsets):
    return np.diff(offsets)


def group_ids(offsets):
    return np.repeat(np.arange(len(offsets) - 1), np.diff(offsets))


def _reduce(ufunc, X, offsets, fill):
    X = np.asarray(X)
    n = np.diff(offsets)
    B = len(n)
    out = np.full((B,) + X.shape[1:], fill, dtype=X.dtype if X.dtype.kind == "f" else float)
    nonempty = n > 0
    if X.shape[0] == 0 or not nonempty.any():
        return out
    starts = offsets[:-1][nonempty]
    out[nonempty] = ufunc.reduceat(X, starts, axis=0)
    return out


def seg_sum(X, offsets):
    return _reduce(np.add, X, offsets, 0.0)


def seg_min(X, offsets):
    return _reduce(np.minimum, X, offsets, np.inf)


def seg_max(X, offsets):
    return _reduce(np.maximum, X, offsets, -np.inf)


def seg_mean(X, offsets):
    n = np.maximum(np.diff(offsets), 1)
    s = seg_sum(X, offsets)
    return s / n.reshape((-1,) + (1,) * (s.ndim - 1))
