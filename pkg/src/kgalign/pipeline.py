"""End-to-end orchestration: mine -> train -> build cost -> calibrate -> solve -> evaluate."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import baselines
from .calibrate import CalibrationReport, grid_search, grid_search_gold
from .evaluate import (PRACTICAL, RELAXED, EvalSetting, MetricsReport, ded_metrics,
                       embedding_rank_metrics, matching_hits1)
from .kg import GoldLabels, KnowledgeGraph, l2_normalize
from .otp import AlignmentResult, SparseCostMatrix, build_cost, solve_joint, solve_no_empty
from .similarity import (CandidateSet, PseudoPairSet, build_candidate_set, min_cross_distances,
                         mine_pseudo_pairs)
from .trainer import RefinedEmbeddings, TrainConfig, train

log = logging.getLogger(__name__)

MODES = ("ued", "ued_star", "no_Lg", "no_decay", "no_otp", "no_empty", "daa", "distance_baseline",
         "gold_alpha_beta")
ROUTING = ("no_otp", "no_empty", "daa")
NEEDS_TRAIN_GOLD = ("ued_star", "distance_baseline", "gold_alpha_beta")


class ModeError(ValueError):
    pass


def validate_modes(modes) -> frozenset:
    modes = frozenset(modes) or frozenset({"ued"})
    unknown = modes - set(MODES)
    if unknown:
        raise ModeError(f"unknown mode(s): {sorted(unknown)}")
    routed = modes & set(ROUTING)
    if len(routed) > 1:
        raise ModeError(f"alignment modes are mutually exclusive: {sorted(routed)}")
    if {"no_Lg", "no_decay"} <= modes:
        raise ModeError("no_decay has nothing to act on when no_Lg removes the guidance loss")
    if "gold_alpha_beta" in modes and routed:
        raise ModeError("gold_alpha_beta calibrates the empty-entity solver; it cannot combine with "
                        + ", ".join(sorted(routed)))
    if "ued" in modes and "ued_star" in modes:
        raise ModeError("choose one of ued and ued_star")
    return modes


@dataclass
class PipelineConfig:
    epsilon: float = 0.99
    k_guidance: int = 3
    K: int = 100
    K_search: int = 10
    grid_size: int = 100
    train: TrainConfig = field(default_factory=TrainConfig)
    modes: frozenset = frozenset({"ued"})
    normalize: bool = True

    def __post_init__(self):
        self.modes = validate_modes(self.modes)

    def effective_train_config(self, train_gold: Optional[GoldLabels]) -> TrainConfig:
        tc = dataclasses.replace(self.train, k_guidance=self.k_guidance)
        if "no_Lg" in self.modes:
            tc = dataclasses.replace(tc, w0=0.0)
        if "no_decay" in self.modes:
            tc = dataclasses.replace(tc, decay=False)
        if "ued_star" in self.modes:
            if train_gold is None:
                raise ModeError("ued_star needs training pairs")
            tc = dataclasses.replace(tc, supervised_pairs=[tuple(p) for p in train_gold.pairs])
        return tc


@dataclass
class PipelineOutput:
    pseudo: PseudoPairSet
    guidance: CandidateSet
    refined: RefinedEmbeddings
    result: AlignmentResult
    cost: Optional[SparseCostMatrix] = None
    calibration: Optional[CalibrationReport] = None


class EmptyPseudoPairsError(ValueError):
    pass


def mine_stage(src_emb, tgt_emb, cfg: PipelineConfig):
    """Returns (normalised src, normalised tgt, pseudo pairs, guidance set)."""
    if cfg.normalize:
        src_emb, tgt_emb = l2_normalize(src_emb), l2_normalize(tgt_emb)
    return src_emb, tgt_emb, mine_pseudo_pairs(src_emb, tgt_emb, cfg.epsilon), \
        build_candidate_set(src_emb, tgt_emb, cfg.k_guidance)


def calibrate_stage(X, Y, pseudo, cfg: PipelineConfig,
                    train_gold: Optional[GoldLabels] = None) -> Optional[CalibrationReport]:
    """None for modes that do not use dangling costs."""
    if cfg.modes & set(ROUTING):
        return None
    C = build_cost(X, Y, cfg.K_search)
    if "gold_alpha_beta" in cfg.modes:
        if train_gold is None:
            raise ModeError("gold_alpha_beta needs training labels")
        return grid_search_gold(C, train_gold, cfg.grid_size, cfg.K_search)
    pairs = pseudo.pairs() if isinstance(pseudo, PseudoPairSet) else list(pseudo)
    if not pairs:
        raise EmptyPseudoPairsError(
            f"no pseudo pairs at epsilon={cfg.epsilon}; calibration has nothing to score (try a lower epsilon)")
    return grid_search(C, pairs, cfg.grid_size, cfg.K_search)


def align_stage(X, Y, cfg: PipelineConfig, calibration: Optional[CalibrationReport] = None):
    """Final alignment of refined embeddings; returns (result, cost matrix at K or None)."""
    modes = cfg.modes
    if "no_empty" in modes:
        from scipy.spatial.distance import cdist
        return solve_no_empty(cdist(X, Y, metric="cityblock")), None
    C = build_cost(X, Y, cfg.K)
    if "no_otp" in modes:
        return baselines.greedy_result(C), C
    if "daa" in modes:
        return baselines.daa_align(C), C
    if calibration is None:
        raise ModeError("the joint solver needs a calibration report")
    return solve_joint(C.with_dangling_costs(calibration.alpha, calibration.beta)), C


def run_pipeline(src_kg: KnowledgeGraph, tgt_kg: KnowledgeGraph, src_emb, tgt_emb, cfg: PipelineConfig,
                 train_gold: Optional[GoldLabels] = None) -> PipelineOutput:
    """Unsupervised unless a supervised mode asks for ``train_gold``."""
    if not cfg.modes & set(NEEDS_TRAIN_GOLD):
        train_gold = None  # keep the core stages label-free
    src_n, tgt_n, pseudo, guidance = mine_stage(src_emb, tgt_emb, cfg)
    log.info("mined %d pseudo pairs at epsilon=%s", len(pseudo), cfg.epsilon)
    refined = train(src_n, tgt_n, src_kg, tgt_kg, pseudo, guidance, cfg.effective_train_config(train_gold))
    calib = calibrate_stage(refined.src, refined.tgt, pseudo, cfg, train_gold)
    result, C = align_stage(refined.src, refined.tgt, cfg, calib)
    return PipelineOutput(pseudo, guidance, refined, result, C, calib)


def test_universe(gold: GoldLabels) -> tuple[set, set]:
    return ({i for i, _ in gold.pairs} | set(gold.dangling_src),
            {j for _, j in gold.pairs} | set(gold.dangling_tgt))


def distance_baseline(src_X, tgt_X, train_gold: GoldLabels, test_gold: GoldLabels):
    """Fit the nearest-distance threshold on training entities, predict on test entities."""
    row_min, col_min = min_cross_distances(src_X, tgt_X)
    tr_s, tr_t = test_universe(train_gold)
    tr_s, tr_t = sorted(tr_s), sorted(tr_t)
    d = np.concatenate([row_min[tr_s], col_min[tr_t]])
    y = np.array([i in train_gold.dangling_src for i in tr_s] + [j in train_gold.dangling_tgt for j in tr_t])
    model = baselines.fit_distance_threshold(d, y)
    te_s, te_t = test_universe(test_gold)
    pred_s = {i for i in te_s if row_min[i] > model.tau}
    pred_t = {j for j in te_t if col_min[j] > model.tau}
    return model, ded_metrics(pred_s, pred_t, test_gold.dangling_src, test_gold.dangling_tgt)


def evaluate_run(out: PipelineOutput, test_gold: GoldLabels, cfg: PipelineConfig,
                 train_gold: Optional[GoldLabels] = None) -> MetricsReport:
    calib = out.calibration.summary() if out.calibration is not None else None
    return evaluate_arrays(out.refined.src, out.refined.tgt, out.result, test_gold, cfg, train_gold,
                           n_pseudo=len(out.pseudo), calibration=calib)


def evaluate_arrays(X, Y, res: AlignmentResult, test_gold: GoldLabels, cfg: PipelineConfig,
                    train_gold: Optional[GoldLabels] = None, n_pseudo: Optional[int] = None,
                    calibration: Optional[dict] = None) -> MetricsReport:
    """Alignment metrics over gold test pairs; dangling metrics over test entities only."""
    pairs = list(test_gold.pairs)
    practical = embedding_rank_metrics(X, Y, pairs, EvalSetting(PRACTICAL, (1, 10)))
    relaxed = embedding_rank_metrics(X, Y, pairs, EvalSetting(RELAXED, (1, 10)))
    uni_s, uni_t = test_universe(test_gold)
    report = MetricsReport(
        setting=PRACTICAL,
        hits=dict(practical.hits),
        mrr=practical.mrr,
        matching_hits1=matching_hits1(res, pairs),
        counts={"test_pairs": len(pairs), "test_dangling_src": len(test_gold.dangling_src),
                "test_dangling_tgt": len(test_gold.dangling_tgt), "pseudo_pairs": n_pseudo,
                "matches": len(res.matches)},
        extra={"relaxed": {"hits": {str(k): v for k, v in relaxed.hits.items()}, "mrr": relaxed.mrr}},
        metadata={"modes": sorted(cfg.modes), "K": cfg.K,
                  "ea_denominator": "gold matchable test sources only",
                  "ded_universe": "test pairs' entities plus test dangling entities"},
    )
    if not cfg.modes & {"no_otp", "daa", "no_empty"}:
        ded = ded_metrics(res.dangling_src & uni_s, res.dangling_tgt & uni_t,
                          test_gold.dangling_src, test_gold.dangling_tgt)
        report.ded_precision, report.ded_recall, report.ded_f1 = ded.pooled.precision, ded.pooled.recall, ded.pooled.f1
        report.extra["ded"] = {side: dataclasses.asdict(getattr(ded, side)) for side in ("src", "tgt", "pooled")}
    if calibration is not None:
        report.extra["calibration"] = calibration
    if "distance_baseline" in cfg.modes:
        if train_gold is None:
            raise ModeError("distance_baseline needs training labels")
        model, ded = distance_baseline(X, Y, train_gold, test_gold)
        report.extra["distance_baseline"] = {"tau": model.tau, "train_f1": model.train_f1,
                                             **dataclasses.asdict(ded.pooled)}
    return report
