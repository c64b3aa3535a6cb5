"""Alignment and dangling-detection metrics."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .similarity import DEFAULT_BLOCK_ELEMS, distance_blocks

RELAXED = "relaxed"
PRACTICAL = "practical"


@dataclass(frozen=True)
class EvalSetting:
    mode: str = PRACTICAL
    ks: tuple = (1, 10)

    def __post_init__(self):
        if self.mode not in (RELAXED, PRACTICAL):
            raise ValueError(f"unknown evaluation mode {self.mode!r}")
        if not self.ks or any(k < 1 for k in self.ks):
            raise ValueError("ks must be non-empty with every cutoff >= 1")


@dataclass
class RankMetrics:
    hits: dict
    mrr: float
    n_evaluated: int
    n_skipped: int = 0
    mode: str = PRACTICAL


def _metrics_from_ranks(ranks: np.ndarray, setting: EvalSetting, skipped: int = 0) -> RankMetrics:
    n = len(ranks)
    if n == 0:
        return RankMetrics({k: 0.0 for k in setting.ks}, 0.0, 0, skipped, setting.mode)
    hits = {k: float(np.count_nonzero(ranks <= k)) / n for k in sorted(setting.ks)}
    mrr = float(np.sum(1.0 / ranks)) / n  # 1/inf == 0 for absent gold targets
    return RankMetrics(hits, mrr, n, skipped, setting.mode)


def rank_based_metrics(rankings: dict, gold_pairs: Iterable, setting: EvalSetting = EvalSetting(),
                       test_targets: Optional[set] = None) -> RankMetrics:
    """Hits@k and MRR from explicit ranked candidate lists.

    ``rankings`` maps a source index to its ranked target list. In relaxed mode
    the lists are filtered to ``test_targets`` (default: the gold targets)
    before ranking. A gold target missing from a list has rank infinity.
    Sources without a ranking are skipped and counted.
    """
    gold_pairs = list(gold_pairs)
    if setting.mode == RELAXED and test_targets is None:
        test_targets = {j for _, j in gold_pairs}
    ranks, skipped = [], 0
    for i, j in gold_pairs:
        if i not in rankings:
            skipped += 1
            continue
        cands = rankings[i]
        if setting.mode == RELAXED:
            cands = [c for c in cands if c in test_targets]
        try:
            ranks.append(cands.index(j) + 1)
        except ValueError:
            ranks.append(math.inf)
    return _metrics_from_ranks(np.asarray(ranks, dtype=np.float64), setting, skipped)


def gold_ranks(src_X, tgt_X, gold_pairs: Sequence, candidates: Optional[np.ndarray] = None,
               metric: str = "manhattan", block_elems: int = DEFAULT_BLOCK_ELEMS) -> np.ndarray:
    """Rank of each gold target among ``candidates`` (all targets by default).

    Rank = 1 + #closer candidates + #equally close candidates with a lower
    index, i.e. distance ties are broken by entity index.
    """
    pairs = np.asarray(gold_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pairs) == 0:
        return np.zeros(0)
    src_X, tgt_X = np.asarray(src_X), np.asarray(tgt_X)
    cand = np.arange(len(tgt_X)) if candidates is None else np.asarray(sorted(set(candidates)), dtype=np.int64)
    pos_in_cand = {int(c): k for k, c in enumerate(cand)}
    ranks = np.empty(len(pairs))
    for lo, block in distance_blocks(src_X[pairs[:, 0]], tgt_X[cand], metric, block_elems):
        for r in range(len(block)):
            i, j = pairs[lo + r]
            row = block[r]
            if int(j) not in pos_in_cand:
                ranks[lo + r] = math.inf
                continue
            g = pos_in_cand[int(j)]
            dg = row[g]
            ranks[lo + r] = 1 + np.count_nonzero(row < dg) + np.count_nonzero(row[:g] == dg)
    return ranks


def embedding_rank_metrics(src_X, tgt_X, gold_pairs, setting: EvalSetting = EvalSetting(),
                           metric: str = "manhattan") -> RankMetrics:
    """Hits@k / MRR of distance-ranked targets; relaxed mode ranks only the gold test targets."""
    cands = [j for _, j in gold_pairs] if setting.mode == RELAXED else None
    return _metrics_from_ranks(gold_ranks(src_X, tgt_X, gold_pairs, cands, metric), setting)


def matching_hits1(result, gold_pairs) -> float:
    gold = [tuple(p) for p in gold_pairs]
    if not gold:
        return 0.0
    matches = set(map(tuple, result.matches))
    return sum(1 for p in gold if p in matches) / len(gold)


@dataclass
class PRF:
    precision: float
    recall: float
    f1: float
    tp: int
    n_predicted: int
    n_gold: int
    no_predictions: bool = False


def _prf(pred: set, gold: set) -> PRF:
    tp = len(pred & gold)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gold) if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return PRF(p, r, f, tp, len(pred), len(gold), no_predictions=not pred)


@dataclass
class DEDScores:
    src: PRF
    tgt: PRF
    pooled: PRF


def ded_metrics(pred_src, pred_tgt, gold_src, gold_tgt) -> DEDScores:
    """Precision/recall/F1 with dangling as the positive class.

    Zero predicted positives give precision 0 and set ``no_predictions``.
    Pooled scores tag entities by side so both KGs count together.
    """
    ps, pt, gs, gt = set(pred_src), set(pred_tgt), set(gold_src), set(gold_tgt)
    pooled_pred = {("s", i) for i in ps} | {("t", j) for j in pt}
    pooled_gold = {("s", i) for i in gs} | {("t", j) for j in gt}
    return DEDScores(_prf(ps, gs), _prf(pt, gt), _prf(pooled_pred, pooled_gold))


def restrict_to_universe(pred: set, universe: set) -> set:
    return set(pred) & set(universe)


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    setting: str
    hits: dict = field(default_factory=dict)
    mrr: Optional[float] = None
    matching_hits1: Optional[float] = None
    ded_precision: Optional[float] = None
    ded_recall: Optional[float] = None
    ded_f1: Optional[float] = None
    counts: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hits"] = {str(k): v for k, v in sorted(self.hits.items())}
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def csv_row(self, config_hash: str) -> str:
        def fmt(x):
            return "" if x is None else repr(float(x))
        h1 = self.matching_hits1 if self.matching_hits1 is not None else self.hits.get(1)
        return ",".join([config_hash, self.setting, fmt(h1), fmt(self.hits.get(10)), fmt(self.mrr),
                         fmt(self.ded_precision), fmt(self.ded_recall), fmt(self.ded_f1)]) + "\n"


CSV_HEADER = "config_hash,setting,hits1,hits10,mrr,ded_p,ded_r,ded_f1\n"


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]
