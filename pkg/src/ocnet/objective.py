"""Cross-view positive mining and the n-pairs / OCN objective.

Given embeddings of the objects seen in two views, every anchor in one view
takes its nearest neighbour in the other view as its positive, and an
n-pairs loss asks each anchor to score its own positive above the positives
of all other anchors.  The OCN objective applies this in both directions.

All gradients are returned with respect to the embeddings; mining is an
index selection and contributes no gradient of its own.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError


@dataclass
class MiningResult:
    positive_index: np.ndarray  # (n_kept,) rows of the other view
    anchor_index: np.ndarray  # (n_kept,) rows of the anchor view
    is_correct: np.ndarray | None = None
    dropped: int = 0

    @property
    def accuracy(self):
        if self.is_correct is None or len(self.is_correct) == 0:
            return None
        return float(np.mean(self.is_correct))


@dataclass
class LossValue:
    """Loss and its gradients.

    For :func:`npairs_loss` the gradients are with respect to the anchor and
    positive matrices.  For :func:`ocn_loss` they are with respect to the
    first and second view embeddings.
    """

    value: float
    grad_anchors: np.ndarray
    grad_positives: np.ndarray
    mining: tuple = ()


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"embedding shapes {a.shape} and {b.shape} are incompatible")
    return a, b


def distance_matrix(f_first, f_second):
    """Euclidean distances D[n, m] = ||f_first[n] - f_second[m]||."""
    a, b = _check_pair(f_first, f_second)
    if len(a) == 0 or len(b) == 0:
        raise ShapeError("distance_matrix needs at least one row per view")
    # explicit differences: the |a|^2 + |b|^2 - 2ab expansion cancels badly near 0
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt(np.einsum("nmk,nmk->nm", diff, diff))


def mine_positives(dist, ids_anchor=None, ids_other=None):
    """Nearest cross-view neighbour of every row (ties go to the lowest column)."""
    dist = np.asarray(dist)
    positive = np.argmin(dist, axis=1)
    correct = None
    if ids_anchor is not None and ids_other is not None:
        correct = np.asarray(ids_other)[positive] == np.asarray(ids_anchor)
    return MiningResult(positive, np.arange(len(dist)), correct)


def supervised_positives(f_first, f_second, ids_first, ids_second):
    """Positives from identity labels; anchors with no match in the other view are dropped."""
    _check_pair(f_first, f_second)
    lookup = {}
    for m, oid in enumerate(np.asarray(ids_second).tolist()):
        lookup.setdefault(oid, m)
    anchors, positives = [], []
    for n, oid in enumerate(np.asarray(ids_first).tolist()):
        if oid in lookup:
            anchors.append(n)
            positives.append(lookup[oid])
    anchors = np.asarray(anchors, dtype=np.int64)
    positives = np.asarray(positives, dtype=np.int64)
    return MiningResult(positives, anchors, np.ones(len(anchors), dtype=bool), len(ids_first) - len(anchors))


def npairs_loss(anchors, positives):
    """Mean over anchors of log(1 + sum_{j != i} exp(a_i.p_j - a_i.p_i))."""
    a, p = _check_pair(anchors, positives)
    if a.shape != p.shape:
        raise ShapeError(f"anchors {a.shape} and positives {p.shape} must have equal shape")
    if not (np.isfinite(a).all() and np.isfinite(p).all()):
        raise NumericError("non-finite embeddings passed to npairs_loss")
    n = len(a)
    if n == 0:
        return LossValue(0.0, np.zeros_like(a), np.zeros_like(p))
    logits = a @ p.T
    shift = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - shift)
    z = e.sum(axis=1, keepdims=True)
    diag = np.diagonal(logits)
    per_anchor = np.log(z[:, 0]) + shift[:, 0] - diag
    # log-sum-exp includes j == i, so each term is >= 0 up to rounding
    value = float(np.maximum(per_anchor, 0.0).mean())

    coef = e / z
    coef[np.diag_indices(n)] -= 1.0
    coef /= n
    return LossValue(value, coef @ p, coef.T @ a)


def _directional(f_anchor, f_other, mining):
    """One direction of the objective: rows ``mining.anchor_index`` against their positives."""
    loss = npairs_loss(f_anchor[mining.anchor_index], f_other[mining.positive_index])
    g_anchor = np.zeros_like(f_anchor)
    g_other = np.zeros_like(f_other)
    np.add.at(g_anchor, mining.anchor_index, loss.grad_anchors)
    np.add.at(g_other, mining.positive_index, loss.grad_positives)
    return loss.value, g_anchor, g_other


def ocn_loss(f_first, f_second, ids_first=None, ids_second=None):
    """Symmetric objective: view 1 anchored on view 2 plus view 2 anchored on view 1.

    ``ids_*`` are only used to report mining accuracy; they never change the loss.
    """
    a, b = _check_pair(f_first, f_second)
    dist = distance_matrix(a, b)
    fwd = mine_positives(dist, ids_first, ids_second)
    bwd = mine_positives(dist.T, ids_second, ids_first)
    v1, ga1, gb1 = _directional(a, b, fwd)
    v2, gb2, ga2 = _directional(b, a, bwd)
    return LossValue(v1 + v2, ga1 + ga2, gb1 + gb2, (fwd, bwd))


def supervised_ocn_loss(f_first, f_second, ids_first, ids_second):
    """As :func:`ocn_loss` but with label-matched positives."""
    a, b = _check_pair(f_first, f_second)
    fwd = supervised_positives(a, b, ids_first, ids_second)
    bwd = supervised_positives(b, a, ids_second, ids_first)
    v1, ga1, gb1 = _directional(a, b, fwd)
    v2, gb2, ga2 = _directional(b, a, bwd)
    return LossValue(v1 + v2, ga1 + ga2, gb1 + gb2, (fwd, bwd))
