"""Embedding refinement with a margin hinge loss over pseudo pairs plus a
similarity-weighted guidance loss whose weight decays linearly to zero.

Parameters are per-entity vectors on both sides. The forward view X is the
parameter matrix pushed through a graph aggregator; the default aggregator
mixes each entity with the mean of its graph neighbours. Losses return their
value together with the subgradient with respect to X; the aggregator's
``backward`` maps that onto the parameters.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .kg import KnowledgeGraph
from .similarity import CandidateSet, PseudoPairSet, same_kg_neighbors

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    def __init__(self, step: int, value: float):
        super().__init__(f"loss became non-finite ({value}) at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# aggregation


class Aggregator(Protocol):
    def forward(self, params: np.ndarray) -> np.ndarray: ...

    def backward(self, grad_out: np.ndarray) -> np.ndarray: ...


class MeanNeighborAggregator:
    """X_i = (1 - gamma) p_i + gamma * mean_{j in N(i)} p_j; isolated entities pass through."""

    def __init__(self, kg: KnowledgeGraph, gamma_mix: float):
        if not 0.0 <= gamma_mix <= 1.0:
            raise ValueError("gamma_mix must lie in [0, 1]")
        n = kg.n_entities
        self.gamma = gamma_mix
        rows, cols, vals = [], [], []
        for i, nb in enumerate(kg.adjacency):
            if len(nb) and gamma_mix > 0:
                rows.append(np.full(len(nb), i))
                cols.append(nb)
                vals.append(np.full(len(nb), gamma_mix / len(nb)))
                rows.append([i]); cols.append([i]); vals.append([1.0 - gamma_mix])
            else:
                rows.append([i]); cols.append([i]); vals.append([1.0])
        if n:
            self.matrix = sp.csr_matrix(
                (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        else:
            self.matrix = sp.csr_matrix((0, 0))
        self._t = self.matrix.T.tocsr()

    def forward(self, params: np.ndarray) -> np.ndarray:
        if self.gamma == 0:
            return params.copy()
        return np.asarray(self.matrix @ params)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self.gamma == 0:
            return grad_out.copy()
        return np.asarray(self._t @ grad_out)


def aggregate(params: np.ndarray, kg: KnowledgeGraph, gamma_mix: float) -> np.ndarray:
    return MeanNeighborAggregator(kg, gamma_mix).forward(np.asarray(params, dtype=np.float64))


def manhattan(u, v) -> float:
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return float(np.abs(u - v).sum())


# ---------------------------------------------------------------------------
# negatives


class NegativeSampler:
    """Corrupts one side of a pair with a same-KG neighbour of the replaced entity.

    ``source="embedding"`` uses the nearest same-KG entities by cosine on the
    initial embeddings (hard negatives); ``source="graph"`` uses graph
    adjacency and falls back to embedding neighbours for isolated entities.
    """

    def __init__(self, src_kg: KnowledgeGraph, tgt_kg: KnowledgeGraph, src_emb, tgt_emb,
                 n_candidates: int = 10, source: str = "embedding"):
        if source not in ("embedding", "graph"):
            raise ValueError(f"unknown negative source {source!r}")
        self.lists = []
        for kg, emb in ((src_kg, src_emb), (tgt_kg, tgt_emb)):
            near = same_kg_neighbors(emb, n_candidates)
            if source == "graph":
                lists = [kg.adjacency[i] if len(kg.adjacency[i]) else near[i] for i in range(kg.n_entities)]
            else:
                lists = list(near)
            self.lists.append(_pad(lists))

    def sample(self, src_idx, tgt_idx, neg_per_pair: int, rng: np.random.Generator):
        """Return (neg_src, neg_tgt), each of shape (len(src_idx), neg_per_pair)."""
        if neg_per_pair < 1:
            raise ValueError("neg_per_pair must be >= 1")
        src_idx = np.asarray(src_idx, dtype=np.int64)
        tgt_idx = np.asarray(tgt_idx, dtype=np.int64)
        shape = (len(src_idx), neg_per_pair)
        (tab_s, len_s), (tab_t, len_t) = self.lists
        ls = np.broadcast_to(len_s[src_idx][:, None], shape)
        lt = np.broadcast_to(len_t[tgt_idx][:, None], shape)
        if np.any((ls == 0) & (lt == 0)):
            raise ValueError("both entities of a pair have no same-KG neighbour")
        replace_src = rng.integers(0, 2, size=shape) == 0
        replace_src = np.where(ls == 0, False, np.where(lt == 0, True, replace_src))
        pick = rng.random(shape)
        neg_s = np.repeat(src_idx[:, None], neg_per_pair, axis=1)
        neg_t = np.repeat(tgt_idx[:, None], neg_per_pair, axis=1)
        rows_s = np.broadcast_to(src_idx[:, None], shape)
        rows_t = np.broadcast_to(tgt_idx[:, None], shape)
        col_s = (pick * ls).astype(np.int64)
        col_t = (pick * lt).astype(np.int64)
        neg_s = np.where(replace_src, tab_s[rows_s, np.minimum(col_s, tab_s.shape[1] - 1)], neg_s)
        neg_t = np.where(replace_src, neg_t, tab_t[rows_t, np.minimum(col_t, tab_t.shape[1] - 1)])
        return neg_s, neg_t


def _pad(lists) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(x) for x in lists], dtype=np.int64)
    width = max(1, int(lengths.max(initial=0)))
    table = np.zeros((len(lists), width), dtype=np.int64)
    for i, x in enumerate(lists):
        table[i, :len(x)] = x
    return table, lengths


def sample_negatives(pair, sampler: NegativeSampler, neg_per_pair: int, rng: np.random.Generator):
    neg_s, neg_t = sampler.sample([pair[0]], [pair[1]], neg_per_pair, rng)
    return list(zip(neg_s[0].tolist(), neg_t[0].tolist()))


# ---------------------------------------------------------------------------
# losses


def hinge_loss(Xs: np.ndarray, Xt: np.ndarray, pos_s, pos_t, neg_s, neg_t, margin: float,
               weights=None, with_grad: bool = True):
    """Sum over positives p and their negatives q of w_p * max(d(p) - d(q) + margin, 0).

    ``d`` is the Manhattan distance between Xs[src] and Xt[tgt]. Returns
    ``(loss, grad_Xs, grad_Xt)``; the gradients are ``None`` when
    ``with_grad`` is false. Subgradient conventions: sign(0) = 0 and a hinge
    whose argument is exactly 0 is treated as inactive.
    """
    pos_s = np.asarray(pos_s, dtype=np.int64)
    pos_t = np.asarray(pos_t, dtype=np.int64)
    neg_s = np.asarray(neg_s, dtype=np.int64).reshape(len(pos_s), -1)
    neg_t = np.asarray(neg_t, dtype=np.int64).reshape(len(pos_s), -1)
    w = np.ones(len(pos_s)) if weights is None else np.asarray(weights, dtype=np.float64)
    if len(pos_s) == 0:
        zero = (np.zeros_like(Xs), np.zeros_like(Xt)) if with_grad else (None, None)
        return 0.0, *zero
    diff_p = Xs[pos_s] - Xt[pos_t]                    # (B, d)
    diff_n = Xs[neg_s] - Xt[neg_t]                    # (B, N, d)
    d_p = np.abs(diff_p).sum(axis=1)
    d_n = np.abs(diff_n).sum(axis=2)
    arg = d_p[:, None] - d_n + margin
    active = arg > 0
    loss = float((w[:, None] * np.where(active, arg, 0.0)).sum())
    if not with_grad:
        return loss, None, None
    coef = w[:, None] * active                        # (B, N)
    g_p = coef.sum(axis=1)[:, None] * np.sign(diff_p)  # d/dXs[pos_s]; minus for Xt[pos_t]
    g_n = -coef[:, :, None] * np.sign(diff_n)         # d/dXs[neg_s]; minus for Xt[neg_t]
    gs = np.zeros_like(Xs)
    gt = np.zeros_like(Xt)
    np.add.at(gs, pos_s, g_p)
    np.add.at(gt, pos_t, -g_p)
    d = Xs.shape[1]
    np.add.at(gs, neg_s.ravel(), g_n.reshape(-1, d))
    np.add.at(gt, neg_t.ravel(), -g_n.reshape(-1, d))
    return loss, gs, gt


def align_loss(Xs, Xt, pairs: PseudoPairSet | Sequence, negatives, margin: float, with_grad: bool = True):
    """Unweighted hinge loss over positive pairs; ``negatives`` is (neg_src, neg_tgt)."""
    ps, pt = _pair_arrays(pairs)
    return hinge_loss(Xs, Xt, ps, pt, negatives[0], negatives[1], margin, None, with_grad)


def guided_loss(Xs, Xt, guidance, negatives, margin: float, with_grad: bool = True):
    """Hinge loss over guidance pairs, each pair's terms scaled by its initial similarity.

    ``guidance`` is a CandidateSet or a (src, tgt, weight) triple of arrays.
    """
    gs, gt, gw = guidance.flat() if isinstance(guidance, CandidateSet) else guidance
    return hinge_loss(Xs, Xt, gs, gt, negatives[0], negatives[1], margin, gw, with_grad)


def _pair_arrays(pairs):
    if isinstance(pairs, PseudoPairSet):
        return pairs.src, pairs.tgt
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def weight_schedule(t, w0, decay_end_fraction, total_steps):
    """Guidance weight at step t: w0 falling linearly to 0 at decay_end_fraction * total_steps."""
    end = decay_end_fraction * total_steps
    if end <= 0:
        return w0 * 0
    return w0 * max(0, 1 - t / end)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lambda_margin: float = 1.0
    w0: float = 0.3
    decay_end_fraction: float = 0.25
    decay: bool = True
    total_steps: int = 300
    learning_rate: float = 0.01
    neg_per_pair: int = 5
    gamma_mix: float = 0.3
    k_guidance: int = 3
    batch_size: int = 512
    negative_source: str = "embedding"
    n_negative_candidates: int = 10
    seed: int = 0
    supervised_pairs: Optional[list] = None

    def __post_init__(self):
        if not 0 < self.decay_end_fraction <= 1:
            raise ValueError("decay_end_fraction must lie in (0, 1]")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.neg_per_pair < 1:
            raise ValueError("neg_per_pair must be >= 1")
        if self.total_steps < 0 or self.batch_size < 1:
            raise ValueError("total_steps must be >= 0 and batch_size >= 1")

    def weight(self, t: int) -> float:
        if not self.decay:
            return self.w0
        return weight_schedule(t, self.w0, self.decay_end_fraction, self.total_steps)


@dataclass
class RefinedEmbeddings:
    params_src: np.ndarray
    params_tgt: np.ndarray
    src: np.ndarray  # aggregated forward view
    tgt: np.ndarray
    trace: list = field(default_factory=list)  # (step, loss_a, loss_g, w)

    def write_trace(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("step,loss_a,loss_g,w\n")
            for step, la, lg, w in self.trace:
                fh.write(f"{step},{la!r},{lg!r},{w!r}\n")


class _EpochBatches:
    """Deterministic reshuffled mini-batches over range(n)."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        self.n, self.size, self.rng = n, batch_size, rng
        self.order = np.zeros(0, np.int64)
        self.pos = 0

    def next(self) -> np.ndarray:
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos:self.pos + self.size]
        self.pos += self.size
        return out


def train(src_emb, tgt_emb, src_kg: KnowledgeGraph, tgt_kg: KnowledgeGraph,
          pseudo: PseudoPairSet | Sequence, guidance: Optional[CandidateSet], cfg: TrainConfig,
          aggregators: Optional[tuple[Aggregator, Aggregator]] = None) -> RefinedEmbeddings:
    """Subgradient descent on L = L_align + w(t) * L_guided.

    Each step draws one mini-batch of positive pairs and one of guidance
    pairs. The guidance batch is rescaled by |Q| / |P| so the step is an
    unbiased estimate of the full-loss gradient divided by |P|.
    """
    src_emb = np.asarray(src_emb, dtype=np.float64)
    tgt_emb = np.asarray(tgt_emb, dtype=np.float64)
    if aggregators is None:
        aggregators = (MeanNeighborAggregator(src_kg, cfg.gamma_mix),
                       MeanNeighborAggregator(tgt_kg, cfg.gamma_mix))
    agg_s, agg_t = aggregators
    ps = src_emb.copy()
    pt = tgt_emb.copy()

    pos_s, pos_t = _pair_arrays(pseudo)
    if cfg.supervised_pairs:
        merged = set(zip(pos_s.tolist(), pos_t.tolist())) | {tuple(map(int, p)) for p in cfg.supervised_pairs}
        merged = sorted(merged)
        pos_s = np.array([p[0] for p in merged], dtype=np.int64)
        pos_t = np.array([p[1] for p in merged], dtype=np.int64)

    def result(trace):
        return RefinedEmbeddings(ps, pt, agg_s.forward(ps), agg_t.forward(pt), trace)

    if len(pos_s) == 0:
        warnings.warn("no positive pairs; returning initial embeddings unchanged", RuntimeWarning)
        return result([])
    if cfg.total_steps == 0:
        return result([])

    rng = np.random.default_rng(cfg.seed)
    sampler = NegativeSampler(src_kg, tgt_kg, src_emb, tgt_emb, cfg.n_negative_candidates, cfg.negative_source)
    if guidance is not None:
        q_s, q_t, q_w = guidance.flat()
    else:
        q_s = q_t = np.zeros(0, np.int64)
        q_w = np.zeros(0)
    p_batches = _EpochBatches(len(pos_s), cfg.batch_size, rng)
    q_batches = _EpochBatches(len(q_s), cfg.batch_size, rng) if len(q_s) else None
    q_scale = len(q_s) / len(pos_s)

    trace = []
    for step in range(cfg.total_steps):
        w = cfg.weight(step)
        Xs, Xt = agg_s.forward(ps), agg_t.forward(pt)
        bp = p_batches.next()
        negs = sampler.sample(pos_s[bp], pos_t[bp], cfg.neg_per_pair, rng)
        la, gs, gt = hinge_loss(Xs, Xt, pos_s[bp], pos_t[bp], *negs, cfg.lambda_margin)
        gs /= len(bp)
        gt /= len(bp)
        lg = 0.0
        if w > 0 and q_batches is not None:
            bq = q_batches.next()
            qnegs = sampler.sample(q_s[bq], q_t[bq], cfg.neg_per_pair, rng)
            lg, hs, ht = hinge_loss(Xs, Xt, q_s[bq], q_t[bq], *qnegs, cfg.lambda_margin, q_w[bq])
            scale = w * q_scale / len(bq)
            gs += scale * hs
            gt += scale * ht
        total = la + w * lg
        if not np.isfinite(total):
            raise DivergenceError(step, total)
        trace.append((step, la, lg, w))
        ps -= cfg.learning_rate * agg_s.backward(gs)
        pt -= cfg.learning_rate * agg_t.backward(gt)
        if not (np.all(np.isfinite(ps)) and np.all(np.isfinite(pt))):
            raise DivergenceError(step, float("nan"))
        if step % 100 == 0:
            log.debug("step %d loss_a=%.4f loss_g=%.4f w=%.4f", step, la, lg, w)
    return result(trace)


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradientReport:
    max_rel_error: float
    passed: bool
    inconclusive: bool
    attempts: int
    tolerance: float


def finite_difference_check(fn: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray,
                            step: float = 1e-5) -> float:
    """Max component-wise gap between analytic and central-difference gradients,
    relative to the larger of the two gradients' max-norms."""
    x = np.asarray(x, dtype=np.float64)
    _, g = fn(x)
    g = np.asarray(g, dtype=np.float64).ravel()
    num = np.empty_like(g)
    flat = x.ravel().copy()
    for c in range(len(flat)):
        orig = flat[c]
        flat[c] = orig + step
        fp, _ = fn(flat.reshape(x.shape))
        flat[c] = orig - step
        fm, _ = fn(flat.reshape(x.shape))
        flat[c] = orig
        num[c] = (fp - fm) / (2 * step)
    scale = max(np.abs(g).max(initial=0.0), np.abs(num).max(initial=0.0))
    if scale == 0:
        return 0.0
    return float(np.abs(g - num).max() / scale)


@dataclass
class HingeProblem:
    """A fixed hinge-loss instance over parameters of both KGs, for gradient checks."""

    agg_s: Aggregator
    agg_t: Aggregator
    n_src: int
    n_tgt: int
    dim: int
    pos: tuple  # (src, tgt)
    pos_negs: tuple
    guide: tuple  # (src, tgt, weight)
    guide_negs: tuple
    margin: float = 1.0
    w: float = 0.3

    def split(self, x):
        k = self.n_src * self.dim
        return x[:k].reshape(self.n_src, self.dim), x[k:].reshape(self.n_tgt, self.dim)

    def forward(self, x):
        ps, pt = self.split(x)
        return self.agg_s.forward(ps), self.agg_t.forward(pt)

    def loss(self, kind: str):
        def fn(x):
            Xs, Xt = self.forward(x)
            total, gs, gt = 0.0, np.zeros_like(Xs), np.zeros_like(Xt)
            if kind in ("align", "combined"):
                la, a_s, a_t = hinge_loss(Xs, Xt, *self.pos, *self.pos_negs, self.margin)
                total += la; gs += a_s; gt += a_t
            if kind in ("guided", "combined"):
                wt = 1.0 if kind == "guided" else self.w
                lg, g_s, g_t = hinge_loss(Xs, Xt, self.guide[0], self.guide[1], *self.guide_negs,
                                          self.margin, self.guide[2])
                total += wt * lg; gs += wt * g_s; gt += wt * g_t
            return total, np.concatenate([self.agg_s.backward(gs).ravel(), self.agg_t.backward(gt).ravel()])
        return fn

    def kink_margin(self, x, kind: str) -> float:
        """Smallest |hinge argument| or |coordinate difference| over the terms in play."""
        Xs, Xt = self.forward(x)
        sets = []
        if kind in ("align", "combined"):
            sets.append((self.pos, self.pos_negs))
        if kind in ("guided", "combined"):
            sets.append(((self.guide[0], self.guide[1]), self.guide_negs))
        best = np.inf
        for (s, t), (ns, nt) in sets:
            s, t = np.asarray(s), np.asarray(t)
            ns, nt = np.asarray(ns).reshape(len(s), -1), np.asarray(nt).reshape(len(s), -1)
            dp = Xs[s] - Xt[t]
            dn = Xs[ns] - Xt[nt]
            arg = np.abs(dp).sum(1)[:, None] - np.abs(dn).sum(2) + self.margin
            best = min(best, np.abs(dp).min(initial=np.inf), np.abs(dn).min(initial=np.inf),
                       np.abs(arg).min(initial=np.inf))
        return float(best)


def gradient_check(problem: HingeProblem, kind: str, tolerance: float = 1e-4, step: float = 1e-5,
                   kink_delta: float = 1e-4, retries: int = 50, rng=None, scale: float = 1.0) -> GradientReport:
    """Compare analytic subgradients to central differences at a random non-kink point.

    Points closer than ``kink_delta`` to a hinge or absolute-value kink are
    resampled up to ``retries`` times before the check is declared inconclusive.
    """
    if kind not in ("align", "guided", "combined"):
        raise ValueError(f"unknown loss {kind!r}")
    rng = np.random.default_rng(rng)
    size = (problem.n_src + problem.n_tgt) * problem.dim
    for attempt in range(1, retries + 1):
        x = scale * rng.standard_normal(size)
        if problem.kink_margin(x, kind) <= kink_delta:
            continue
        err = finite_difference_check(problem.loss(kind), x, step)
        return GradientReport(err, err < tolerance, False, attempt, tolerance)
    return GradientReport(float("nan"), False, True, retries, tolerance)
