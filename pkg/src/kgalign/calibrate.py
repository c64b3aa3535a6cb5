"""Choose the dangling costs (alpha, beta) by a grid over quantiles of the
cost matrix's row and column minimums."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .evaluate import ded_metrics
from .otp import AlignmentResult, SparseCostMatrix, restrict_topk, solve_joint
from .similarity import PseudoPairSet

DEFAULT_GRID_SIZE = 100
DEFAULT_K_SEARCH = 10


def quantile(values, q: float) -> float:
    """Linear-interpolation quantile of the sorted values."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("quantile of an empty sequence")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    return float(np.quantile(values, q, method="linear"))


@dataclass
class GridPoint:
    q: float
    alpha: float
    beta: float
    score: float
    q_beta: Optional[float] = None  # set only for the independent 2-D grid


@dataclass
class CalibrationReport:
    grid: list
    best: GridPoint
    K_used: int
    scored_by: str = "hits1_on_pseudo_pairs"
    extra: dict = field(default_factory=dict)

    @property
    def alpha(self) -> float:
        return self.best.alpha

    @property
    def beta(self) -> float:
        return self.best.beta

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            two_d = any(p.q_beta is not None for p in self.grid)
            col = "hits1_on_P" if self.scored_by == "hits1_on_pseudo_pairs" else "ded_f1_train"
            fh.write(f"q,alpha,beta,{col}\n" if not two_d else f"q,q_beta,alpha,beta,{col}\n")
            for p in self.grid:
                if two_d:
                    fh.write(f"{p.q!r},{p.q_beta!r},{p.alpha!r},{p.beta!r},{p.score!r}\n")
                else:
                    fh.write(f"{p.q!r},{p.alpha!r},{p.beta!r},{p.score!r}\n")

    def summary(self) -> dict:
        b = self.best
        return {"q": b.q, "q_beta": b.q_beta, "alpha": b.alpha, "beta": b.beta, "score": b.score,
                "K_used": self.K_used, "scored_by": self.scored_by, "grid_size": len(self.grid), **self.extra}

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def pseudo_pair_hits(result: AlignmentResult, pairs) -> float:
    """Fraction of pairs reproduced exactly by the matching; a dangling endpoint scores 0."""
    pairs = pairs.pairs() if isinstance(pairs, PseudoPairSet) else list(pairs)
    if not pairs:
        return 0.0
    matched = set(result.matches)
    return sum(1 for p in pairs if tuple(p) in matched) / len(pairs)


def _search(C: SparseCostMatrix, points, scorer: Callable[[AlignmentResult], float], K_search, scored_by):
    grid = []
    for q, q_b, alpha, beta in points:
        res = solve_joint(C.with_dangling_costs(alpha, beta))
        grid.append(GridPoint(q, alpha, beta, float(scorer(res)), q_b))
    # max score; ties toward the smaller q (then smaller q_beta)
    best = min(grid, key=lambda p: (-p.score, p.q, p.q_beta if p.q_beta is not None else 0.0))
    return CalibrationReport(grid, best, K_search, scored_by)


def _quantile_points(C: SparseCostMatrix, grid_size: int, paired: bool, include_zero: bool):
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    row_min, col_min = C.row_minimums(), C.col_minimums()
    row_min, col_min = row_min[np.isfinite(row_min)], col_min[np.isfinite(col_min)]
    qs = [k / grid_size for k in range(1, grid_size + 1)]
    points = []
    if include_zero:
        # degenerate probe: zero dangling cost, everything stays dangling
        points.append((0.0, None if paired else 0.0, 0.0, 0.0))
    if paired:
        points += [(q, None, quantile(row_min, q), quantile(col_min, q)) for q in qs]
    else:
        points += [(qa, qb, quantile(row_min, qa), quantile(col_min, qb)) for qa in qs for qb in qs]
    return points


def grid_search(C_base: SparseCostMatrix, pseudo, grid_size: int = DEFAULT_GRID_SIZE,
                K_search: Optional[int] = DEFAULT_K_SEARCH, paired: bool = True,
                include_zero: bool = False) -> CalibrationReport:
    """Pick (alpha, beta) maximising the fraction of pseudo pairs the joint solver reproduces.

    For each q in {1/G, ..., 1}: alpha is the q-quantile of the row minimums
    and beta the q-quantile of the column minimums (one shared q). The cost
    matrix is first restricted to retention ``K_search``.
    """
    pairs = pseudo.pairs() if isinstance(pseudo, PseudoPairSet) else list(pseudo)
    if not pairs:
        raise ValueError("calibration needs at least one pseudo pair")
    C = restrict_topk(C_base, K_search) if K_search is not None else C_base
    points = _quantile_points(C, grid_size, paired, include_zero)
    return _search(C, points, lambda r: pseudo_pair_hits(r, pairs), C.K, "hits1_on_pseudo_pairs")


def grid_search_gold(C_base: SparseCostMatrix, train_gold, grid_size: int = DEFAULT_GRID_SIZE,
                     K_search: Optional[int] = DEFAULT_K_SEARCH, paired: bool = True) -> CalibrationReport:
    """Same grid, scored by pooled dangling-detection F1 on labelled training entities.

    ``train_gold`` is a GoldLabels holding the training pairs and training
    dangling entities; only those entities enter the F1.
    """
    uni_s = {i for i, _ in train_gold.pairs} | set(train_gold.dangling_src)
    uni_t = {j for _, j in train_gold.pairs} | set(train_gold.dangling_tgt)
    if not (train_gold.dangling_src or train_gold.dangling_tgt) or not train_gold.pairs:
        raise ValueError("gold calibration needs both dangling and matchable training entities")
    C = restrict_topk(C_base, K_search) if K_search is not None else C_base
    points = _quantile_points(C, grid_size, paired, False)

    def score(res):
        return ded_metrics(res.dangling_src & uni_s, res.dangling_tgt & uni_t,
                           train_gold.dangling_src, train_gold.dangling_tgt).pooled.f1

    return _search(C, points, score, C.K, "ded_f1_on_training_labels")
