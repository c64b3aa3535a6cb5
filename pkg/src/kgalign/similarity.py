"""Cosine similarity, pseudo-pair mining, guidance sets and cross-KG top-K retention.

Every routine that scans the full source x target similarity or distance
matrix works tile-by-tile over source rows, so peak memory is bounded by
``block_elems`` regardless of KG size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
from scipy.spatial.distance import cdist

from .kg import l2_normalize

DEFAULT_EPSILON = 0.99
DEFAULT_K_GUIDANCE = 3
DEFAULT_K_RETENTION = 100
DEFAULT_BLOCK_ELEMS = 1 << 22


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def _row_blocks(n: int, m: int, block_elems: int) -> Iterator[tuple[int, int]]:
    step = max(1, block_elems // max(m, 1))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def similarity_blocks(src, tgt, block_elems: int = DEFAULT_BLOCK_ELEMS):
    """Yield ``(row_start, S_block)`` tiles of the cosine similarity matrix."""
    a, b = l2_normalize(np.asarray(src, float)), l2_normalize(np.asarray(tgt, float))
    for lo, hi in _row_blocks(len(a), len(b), block_elems):
        yield lo, np.clip(a[lo:hi] @ b.T, -1.0, 1.0)


def distance_blocks(src, tgt, metric: str = "manhattan", block_elems: int = DEFAULT_BLOCK_ELEMS):
    """Yield ``(row_start, D_block)`` tiles where smaller means closer.

    ``manhattan`` gives L1 distances; ``cosine`` gives negated cosine similarity
    so that the same smallest-first logic applies.
    """
    if metric == "manhattan":
        a, b = np.asarray(src, float), np.asarray(tgt, float)
        for lo, hi in _row_blocks(len(a), len(b), block_elems):
            yield lo, cdist(a[lo:hi], b, metric="cityblock")
    elif metric == "cosine":
        for lo, block in similarity_blocks(src, tgt, block_elems):
            yield lo, -block
    else:
        raise ValueError(f"unknown metric {metric!r}")


def similarity_matrix(src, tgt) -> np.ndarray:
    return np.concatenate([blk for _, blk in similarity_blocks(src, tgt)]) if len(src) else np.zeros((0, len(tgt)))


# ---------------------------------------------------------------------------
# pseudo pairs


@dataclass(frozen=True)
class PseudoPairSet:
    src: np.ndarray
    tgt: np.ndarray
    sim: np.ndarray
    epsilon: float

    def __len__(self) -> int:
        return len(self.src)

    def pairs(self) -> list[tuple[int, int]]:
        return list(zip(self.src.tolist(), self.tgt.tolist()))


def mine_pseudo_pairs_from_similarity(sim_blocks, n_tgt: int, epsilon: float) -> PseudoPairSet:
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    col_count = np.zeros(n_tgt, dtype=np.int64)
    cand_i, cand_j, cand_s = [], [], []
    for lo, block in sim_blocks:
        above = block > epsilon
        col_count += above.sum(axis=0)
        rows = np.flatnonzero(above.sum(axis=1) == 1)
        if len(rows):
            cols = above[rows].argmax(axis=1)
            cand_i.append(rows + lo)
            cand_j.append(cols)
            cand_s.append(block[rows, cols])
    if cand_i:
        i, j, s = np.concatenate(cand_i), np.concatenate(cand_j), np.concatenate(cand_s)
        keep = col_count[j] == 1
        i, j, s = i[keep], j[keep], s[keep]
    else:
        i = j = np.zeros(0, np.int64)
        s = np.zeros(0)
    return PseudoPairSet(i.astype(np.int64), j.astype(np.int64), s.astype(np.float64), float(epsilon))


def mine_pseudo_pairs(src_emb, tgt_emb, epsilon: float = DEFAULT_EPSILON,
                      block_elems: int = DEFAULT_BLOCK_ELEMS) -> PseudoPairSet:
    """Pairs (i, j) with s_ij > epsilon where j is i's only partner above
    epsilon and i is j's only partner above epsilon."""
    return mine_pseudo_pairs_from_similarity(
        similarity_blocks(src_emb, tgt_emb, block_elems), len(tgt_emb), epsilon)


# ---------------------------------------------------------------------------
# top-k selection helpers


def _topk_mask(values: np.ndarray, k: int, axis: int) -> np.ndarray:
    """Boolean mask of the k smallest entries along ``axis``; ties go to the lower position."""
    size = values.shape[axis]
    if k >= size:
        return np.ones(values.shape, dtype=bool)
    kth = np.take(np.partition(values, k - 1, axis=axis), [k - 1], axis=axis)
    less = values < kth
    need = k - less.sum(axis=axis, keepdims=True)
    eq = values == kth
    return less | (eq & (np.cumsum(eq, axis=axis) <= need))


def _sorted_topk(values: np.ndarray, k: int) -> np.ndarray:
    """Per-row indices of the k smallest values, ordered by (value, index)."""
    k = min(k, values.shape[1])
    mask = _topk_mask(values, k, axis=1)
    rows, cols = np.nonzero(mask)
    vals = values[rows, cols]
    order = np.lexsort((cols, vals, rows))
    return cols[order].reshape(values.shape[0], k)


@dataclass(frozen=True)
class CandidateSet:
    """Per-source top-k targets by initial similarity, with s_ij as weight."""

    targets: np.ndarray  # (n_src, k) ordered by descending similarity
    weights: np.ndarray  # (n_src, k)
    k: int

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n, k = self.targets.shape
        return np.repeat(np.arange(n), k), self.targets.ravel(), self.weights.ravel()


def build_candidate_set(src_emb, tgt_emb, k: int = DEFAULT_K_GUIDANCE,
                        block_elems: int = DEFAULT_BLOCK_ELEMS) -> CandidateSet:
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(tgt_emb))
    targets = np.zeros((len(src_emb), k), dtype=np.int64)
    weights = np.zeros((len(src_emb), k))
    for lo, block in similarity_blocks(src_emb, tgt_emb, block_elems):
        top = _sorted_topk(-block, k)
        targets[lo:lo + len(block)] = top
        weights[lo:lo + len(block)] = np.take_along_axis(block, top, axis=1)
    return CandidateSet(targets, weights, k)


def same_kg_neighbors(emb, n_neighbors: int, block_elems: int = DEFAULT_BLOCK_ELEMS) -> np.ndarray:
    """Nearest same-KG entities by cosine similarity, excluding the entity itself.

    Returns an (n, min(n_neighbors, n-1)) index array.
    """
    n = len(emb)
    k = min(n_neighbors, n - 1)
    out = np.zeros((n, max(k, 0)), dtype=np.int64)
    if k <= 0:
        return out
    for lo, block in similarity_blocks(emb, emb, block_elems):
        dist = -block
        dist[np.arange(len(block)), np.arange(lo, lo + len(block))] = np.inf
        out[lo:lo + len(block)] = _sorted_topk(dist, k)
    return out


@dataclass(frozen=True)
class CrossNeighbors:
    """Sparse union of row-wise and column-wise top-K cross-KG pairs, sorted by (row, col)."""

    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray  # distance (manhattan) or negated cosine
    n: int
    m: int
    K: int
    metric: str

    def __len__(self) -> int:
        return len(self.rows)


def topk_cross_neighbors(src_emb, tgt_emb, K: int = DEFAULT_K_RETENTION, metric: str = "manhattan",
                         block_elems: int = DEFAULT_BLOCK_ELEMS) -> CrossNeighbors:
    """Keep (i, j) when j is among i's K closest targets or i among j's K closest sources."""
    if K < 1:
        raise ValueError("K must be >= 1")
    n, m = len(src_emb), len(tgt_emb)
    kr, kc = min(K, m), min(K, n)
    row_parts = []
    # running per-column best: candidate row indices and values, kept in ascending row order
    col_rows = np.zeros((0, m), dtype=np.int64)
    col_vals = np.zeros((0, m))
    for lo, block in distance_blocks(src_emb, tgt_emb, metric, block_elems):
        b = len(block)
        if kr:
            mask = _topk_mask(block, kr, axis=1)
            r, c = np.nonzero(mask)
            row_parts.append((r + lo, c, block[r, c]))
        if kc:
            stack_vals = np.concatenate([col_vals, block])
            stack_rows = np.concatenate([col_rows, np.broadcast_to(np.arange(lo, lo + b)[:, None], (b, m))])
            keep = _topk_mask(stack_vals, min(kc, len(stack_vals)), axis=0)
            # positions of kept entries in stack order (which is ascending row order)
            pos = np.where(keep, np.arange(len(stack_vals))[:, None], len(stack_vals))
            pos = np.sort(pos, axis=0)[: min(kc, len(stack_vals))]
            col_rows = np.take_along_axis(stack_rows, pos, axis=0)
            col_vals = np.take_along_axis(stack_vals, pos, axis=0)
    parts_r = [p[0] for p in row_parts] + [col_rows.ravel()]
    parts_c = [p[1] for p in row_parts] + [np.tile(np.arange(m), len(col_rows))]
    parts_v = [p[2] for p in row_parts] + [col_vals.ravel()]
    r = np.concatenate(parts_r).astype(np.int64) if parts_r else np.zeros(0, np.int64)
    c = np.concatenate(parts_c).astype(np.int64)
    v = np.concatenate(parts_v).astype(np.float64)
    key = r * max(m, 1) + c
    _, first = np.unique(key, return_index=True)
    return CrossNeighbors(r[first], c[first], v[first], n, m, K, metric)


def min_cross_distances(src_emb, tgt_emb, metric: str = "manhattan",
                        block_elems: int = DEFAULT_BLOCK_ELEMS) -> tuple[np.ndarray, np.ndarray]:
    """Smallest cross-KG distance for every source and every target entity."""
    n, m = len(src_emb), len(tgt_emb)
    row_min = np.full(n, np.inf)
    col_min = np.full(m, np.inf)
    for lo, block in distance_blocks(src_emb, tgt_emb, metric, block_elems):
        row_min[lo:lo + len(block)] = block.min(axis=1)
        np.minimum(col_min, block.min(axis=0), out=col_min)
    return row_min, col_min
