"""Comparison methods: greedy local alignment, deferred acceptance, and a
distance-threshold dangling detector fitted on labelled training entities."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .otp import AlignmentResult, SparseCostMatrix


def _as_sparse(C) -> SparseCostMatrix:
    if isinstance(C, SparseCostMatrix):
        return C
    return SparseCostMatrix.from_dense(C)


def _preference_lists(C: SparseCostMatrix, by_row: bool) -> list:
    """Per-entity candidate lists sorted by (distance, index)."""
    key, other = (C.rows, C.cols) if by_row else (C.cols, C.rows)
    size = C.n if by_row else C.m
    order = np.lexsort((other, C.costs, key))
    k_sorted, o_sorted = key[order], other[order].tolist()
    bounds = np.searchsorted(k_sorted, np.arange(size + 1))
    return [o_sorted[bounds[i]:bounds[i + 1]] for i in range(size)]


def greedy_align(C) -> tuple[list, list]:
    """Local alignment: every source ranks its retained targets by ascending distance.

    Returns ``(rankings, top1)``; ``top1[i]`` is -1 for a source without
    candidates. Several sources may choose the same target.
    """
    C = _as_sparse(C)
    rankings = _preference_lists(C, by_row=True)
    top1 = [r[0] if r else -1 for r in rankings]
    return rankings, top1


def greedy_result(C) -> AlignmentResult:
    C = _as_sparse(C)
    _, top1 = greedy_align(C)
    matches = [(i, j) for i, j in enumerate(top1) if j >= 0]
    lookup = C.lookup()
    return AlignmentResult(matches, set(), set(), float(sum(lookup[p] for p in matches)), n=C.n, m=C.m, K=C.K)


def daa_align(C) -> AlignmentResult:
    """Source-proposing deferred acceptance with distance-ranked preferences.

    Both sides prefer smaller distance, ties to the lower index. Only retained
    entries are acceptable. Unmatched entities are left out of the matching
    but are not labelled dangling.
    """
    C = _as_sparse(C)
    prefs = _preference_lists(C, by_row=True)
    cost = C.lookup()
    next_choice = [0] * C.n
    holder = [-1] * C.m
    free = deque(range(C.n))
    while free:
        i = free.popleft()
        if next_choice[i] >= len(prefs[i]):
            continue
        j = prefs[i][next_choice[i]]
        next_choice[i] += 1
        cur = holder[j]
        if cur < 0:
            holder[j] = i
        elif (cost[(i, j)], i) < (cost[(cur, j)], cur):
            holder[j] = i
            free.append(cur)
        else:
            free.append(i)
    matches = sorted((i, j) for j, i in enumerate(holder) if i >= 0)
    return AlignmentResult(matches, set(), set(), float(sum(cost[p] for p in matches)),
                           n=C.n, m=C.m, K=C.K, extra={"method": "daa"})


def blocking_pairs(C, matches) -> list:
    """Retained pairs (i, j) that both prefer each other to their current partners."""
    C = _as_sparse(C)
    cost = C.lookup()
    partner_s = {i: j for i, j in matches}
    partner_t = {j: i for i, j in matches}
    out = []
    for (i, j), c in cost.items():
        if partner_s.get(i) == j:
            continue
        js = partner_s.get(i)
        it = partner_t.get(j)
        src_wants = js is None or (c, j) < (cost[(i, js)], js)
        tgt_wants = it is None or (c, i) < (cost[(it, j)], it)
        if src_wants and tgt_wants:
            out.append((i, j))
    return out


# ---------------------------------------------------------------------------
# distance threshold


class SingleClassError(ValueError):
    pass


@dataclass(frozen=True)
class ThresholdModel:
    tau: float
    train_f1: float

    def apply(self, distances) -> set:
        """Indices whose nearest cross-KG distance exceeds tau."""
        d = np.asarray(distances, dtype=np.float64)
        return set(np.flatnonzero(d > self.tau).tolist())


def _f1(pred: np.ndarray, labels: np.ndarray) -> float:
    tp = int(np.count_nonzero(pred & labels))
    n_pred, n_pos = int(pred.sum()), int(labels.sum())
    if tp == 0:
        return 0.0
    p, r = tp / n_pred, tp / n_pos
    return 2 * p * r / (p + r)


def candidate_thresholds(distances) -> list:
    """Midpoints of consecutive distinct values, plus one cut below all and one at the max."""
    u = np.unique(np.asarray(distances, dtype=np.float64))
    mids = ((u[:-1] + u[1:]) / 2).tolist()
    low = [float(np.nextafter(u[0], -np.inf))] if len(u) else []
    return low + mids + ([float(u[-1])] if len(u) else [])


def fit_distance_threshold(distances, is_dangling) -> ThresholdModel:
    """Threshold on the nearest cross-KG distance that maximises training F1.

    Ties between thresholds go to the smallest one.
    """
    d = np.asarray(distances, dtype=np.float64)
    y = np.asarray(is_dangling, dtype=bool)
    if y.all() or not y.any():
        raise SingleClassError("training labels need both dangling and matchable entities")
    best_tau, best_f1 = None, -1.0
    for tau in candidate_thresholds(d):
        f = _f1(d > tau, y)
        if f > best_f1:
            best_tau, best_f1 = tau, f
    return ThresholdModel(float(best_tau), best_f1)


def apply_threshold(model: ThresholdModel, distances) -> set:
    return model.apply(distances)
