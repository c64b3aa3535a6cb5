"""Joint global alignment and dangling detection as sparse optimal transport.

Both KGs get a virtual empty entity. A source entity sent to the empty target
costs ``beta`` (it is declared dangling), a target entity fed by the empty
source costs ``alpha``; every other unit of transport pays the Manhattan
distance of a retained cross-KG pair. Starting from the all-dangling plan,
matching (i, j) changes the objective by ``C_ij - alpha - beta``, so the
optimum is a maximum-weight partial matching on weights ``alpha + beta - C_ij``.

The solver writes that partial matching as a row-saturating assignment on
the source rows: row i pays ``C_ij - alpha`` to take target column j (the
target no longer pays alpha) or ``beta`` to take its private dangling column.
Adding the constant ``m * alpha`` recovers the transport objective exactly.
The assignment is solved by shortest augmenting paths with column potentials,
one Dijkstra per row that exits at the first free column it settles.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .similarity import DEFAULT_BLOCK_ELEMS, topk_cross_neighbors


class ConfigurationError(ValueError):
    pass


class InfeasibleError(ValueError):
    pass


@dataclass(frozen=True)
class SparseCostMatrix:
    n: int
    m: int
    rows: np.ndarray
    cols: np.ndarray
    costs: np.ndarray
    alpha: Optional[float] = None  # cost of a dangling target (empty source row)
    beta: Optional[float] = None   # cost of a dangling source (empty target column)
    K: Optional[int] = None

    def __post_init__(self):
        if not (len(self.rows) == len(self.cols) == len(self.costs)):
            raise ValueError("rows, cols and costs must have equal length")
        if len(self.costs) and (not np.all(np.isfinite(self.costs)) or self.costs.min() < 0):
            raise ValueError("costs must be finite and >= 0")
        for name in ("alpha", "beta"):
            val = getattr(self, name)
            if val is not None and not (math.isfinite(val) and val >= 0):
                raise ValueError(f"{name} must be finite and >= 0")

    @classmethod
    def from_dense(cls, C, alpha=None, beta=None) -> "SparseCostMatrix":
        C = np.asarray(C, dtype=np.float64)
        n, m = C.shape
        r, c = np.divmod(np.arange(n * m), max(m, 1))
        return cls(n, m, r.astype(np.int64), c.astype(np.int64), C.ravel().copy(), alpha, beta)

    @classmethod
    def from_entries(cls, n, m, entries, alpha=None, beta=None) -> "SparseCostMatrix":
        entries = sorted((int(i), int(j), float(c)) for i, j, c in entries)
        keys = [(i, j) for i, j, _ in entries]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (i, j) entry")
        arr = np.array(entries, dtype=np.float64).reshape(-1, 3)
        return cls(n, m, arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2].copy(), alpha, beta)

    def with_dangling_costs(self, alpha: float, beta: float) -> "SparseCostMatrix":
        return replace(self, alpha=float(alpha), beta=float(beta))

    def __len__(self) -> int:
        return len(self.costs)

    def row_minimums(self) -> np.ndarray:
        out = np.full(self.n, np.inf)
        np.minimum.at(out, self.rows, self.costs)
        return out

    def col_minimums(self) -> np.ndarray:
        out = np.full(self.m, np.inf)
        np.minimum.at(out, self.cols, self.costs)
        return out

    def lookup(self) -> dict:
        return {(int(i), int(j)): float(c) for i, j, c in zip(self.rows, self.cols, self.costs)}

    def dense(self, fill=np.inf) -> np.ndarray:
        out = np.full((self.n, self.m), fill, dtype=np.float64)
        out[self.rows, self.cols] = self.costs
        return out


@dataclass
class AlignmentResult:
    matches: list
    dangling_src: set
    dangling_tgt: set
    objective: float
    n: int = 0
    m: int = 0
    alpha: Optional[float] = None
    beta: Optional[float] = None
    K: Optional[int] = None
    extra: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "objective": self.objective,
            "n_src": self.n,
            "n_tgt": self.m,
            "n_matches": len(self.matches),
            "n_dangling_src": len(self.dangling_src),
            "n_dangling_tgt": len(self.dangling_tgt),
            "alpha": self.alpha,
            "beta": self.beta,
            "K": self.K,
            **self.extra,
        }

    def write(self, out_dir, src_ids: Sequence[str], tgt_ids: Sequence[str], prefix: str = "") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"{prefix}matches.tsv", "w", encoding="utf-8") as fh:
            for i, j in self.matches:
                fh.write(f"{src_ids[i]}\t{tgt_ids[j]}\n")
        with open(out / f"{prefix}dangling_src.txt", "w", encoding="utf-8") as fh:
            fh.writelines(src_ids[i] + "\n" for i in sorted(self.dangling_src))
        with open(out / f"{prefix}dangling_tgt.txt", "w", encoding="utf-8") as fh:
            fh.writelines(tgt_ids[j] + "\n" for j in sorted(self.dangling_tgt))
        with open(out / f"{prefix}alignment.json", "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def joint_objective(matches, costs: dict, n: int, m: int, alpha: float, beta: float) -> float:
    """Correctly rounded objective of a partial matching (order independent)."""
    return math.fsum([costs[p] for p in matches] + [beta] * (n - len(matches)) + [alpha] * (m - len(matches)))


# ---------------------------------------------------------------------------
# construction


def build_cost(src_X, tgt_X, K: int, block_elems: int = DEFAULT_BLOCK_ELEMS) -> SparseCostMatrix:
    """Manhattan costs on the union of row-wise and column-wise top-K neighbours."""
    nb = topk_cross_neighbors(src_X, tgt_X, K, "manhattan", block_elems)
    return SparseCostMatrix(nb.n, nb.m, nb.rows, nb.cols, nb.values, K=K)


def restrict_topk(C: SparseCostMatrix, K: int) -> SparseCostMatrix:
    """Keep entries that are in their row's or column's K cheapest retained entries.

    If C was built with retention >= K this equals building at K directly,
    since every row's and column's true top-K is already retained.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    keep = np.zeros(len(C), dtype=bool)
    for key, other in ((C.rows, C.cols), (C.cols, C.rows)):
        order = np.lexsort((other, C.costs, key))
        k_sorted = key[order]
        starts = np.searchsorted(k_sorted, k_sorted, side="left")
        rank = np.arange(len(order)) - starts
        keep[order[rank < K]] = True
    return replace(C, rows=C.rows[keep], cols=C.cols[keep], costs=C.costs[keep], K=K)


# ---------------------------------------------------------------------------
# assignment core


def _min_cost_assignment(adj_cols: list, adj_costs: list, n_cols: int) -> list:
    """Min-cost assignment saturating every row of a sparse bipartite graph.

    Columns may outnumber rows and stay free. Rows are processed in index
    order; for each, Dijkstra on reduced costs ``c_ij - v_j`` (column
    potentials ``v``, row potentials implicit) stops at the first free column
    popped. Potentials start at 0 and only decrease on scanned columns, so free
    columns keep v = 0 as rectangular optimality requires. Heap ties resolve
    by column index.
    """
    inf = math.inf
    n_rows = len(adj_cols)
    row_of = [-1] * n_cols
    col_of = [-1] * n_rows
    match_cost = [0.0] * n_rows

    v = [0.0] * n_cols

    dist = [inf] * n_cols
    pred = [-1] * n_cols
    pred_cost = [0.0] * n_cols
    done = [False] * n_cols
    heappush, heappop = heapq.heappush, heapq.heappop

    for r in range(n_rows):
        touched = []
        heap = []
        for j, c in zip(adj_cols[r], adj_costs[r]):
            d = c - v[j]
            if d < dist[j]:
                if dist[j] == inf:
                    touched.append(j)
                dist[j] = d
                pred[j] = r
                pred_cost[j] = c
                heappush(heap, (d, j))
        scanned = []
        sink = -1
        while heap:
            d, j = heappop(heap)
            if done[j] or d > dist[j]:
                continue
            done[j] = True
            scanned.append(j)
            i = row_of[j]
            if i < 0:
                sink = j
                break
            base = d - match_cost[i] + v[j]
            for k, c in zip(adj_cols[i], adj_costs[i]):
                if done[k]:
                    continue
                nd = base + c - v[k]
                if nd < dist[k]:
                    if dist[k] == inf:
                        touched.append(k)
                    dist[k] = nd
                    pred[k] = i
                    pred_cost[k] = c
                    heappush(heap, (nd, k))
        if sink < 0:
            raise InfeasibleError(f"row {r} cannot be assigned")
        mu = dist[sink]
        for j in scanned:
            v[j] += dist[j] - mu
        j = sink
        while True:
            i = pred[j]
            prev = col_of[i]
            row_of[j] = i
            col_of[i] = j
            match_cost[i] = pred_cost[j]
            if i == r:
                break
            j = prev
        for j in touched:
            dist[j] = inf
            done[j] = False
    return col_of


def _adjacency(n: int, rows: np.ndarray, cols: np.ndarray, costs: np.ndarray):
    order = np.lexsort((cols, rows))
    rows, cols, costs = rows[order], cols[order], costs[order]
    bounds = np.searchsorted(rows, np.arange(n + 1))
    cl, co = cols.tolist(), costs.tolist()
    return ([cl[bounds[i]:bounds[i + 1]] for i in range(n)],
            [co[bounds[i]:bounds[i + 1]] for i in range(n)])


def solve_joint(C: SparseCostMatrix) -> AlignmentResult:
    """Exact optimum of the transport problem with empty entities on retained entries."""
    if C.alpha is None or C.beta is None:
        raise ConfigurationError("alpha and beta must be set before solving")
    n, m, alpha, beta = C.n, C.m, float(C.alpha), float(C.beta)
    keep = C.costs < alpha + beta  # weight alpha + beta - C_ij must be strictly positive
    rows, cols, costs = C.rows[keep], C.cols[keep], C.costs[keep]

    # Row i pays C_ij - alpha for target j (the target stops being dangling)
    # or beta for its private dangling column m + i; the constant m * alpha
    # is added back in the objective.
    adj_cols, adj_costs = _adjacency(n, rows, cols, costs - alpha)
    for i in range(n):
        adj_cols[i].append(m + i)
        adj_costs[i].append(beta)
    col_of = _min_cost_assignment(adj_cols, adj_costs, n + m)

    matches = [(i, col_of[i]) for i in range(n) if col_of[i] < m]
    matched_tgt = {j for _, j in matches}
    lookup = dict(zip(zip(rows.tolist(), cols.tolist()), costs.tolist()))
    result = AlignmentResult(
        matches=matches,
        dangling_src={i for i in range(n) if col_of[i] >= m},
        dangling_tgt={j for j in range(m) if j not in matched_tgt},
        objective=joint_objective(matches, lookup, n, m, alpha, beta),
        n=n, m=m, alpha=alpha, beta=beta, K=C.K,
    )
    return result


def solve_no_empty(C) -> AlignmentResult:
    """Min-cost perfect matching without empty entities; requires n == m."""
    if isinstance(C, SparseCostMatrix):
        C = C.dense()
    C = np.asarray(C, dtype=np.float64)
    n, m = C.shape
    if n != m:
        raise InfeasibleError(f"one-to-one transport needs equal sizes, got {n} x {m}")
    finite = np.isfinite(C)
    adj_cols = [np.flatnonzero(finite[i]).tolist() for i in range(n)]
    adj_costs = [C[i, finite[i]].tolist() for i in range(n)]
    col_of = _min_cost_assignment(adj_cols, adj_costs, m)
    matches = [(i, col_of[i]) for i in range(n)]
    return AlignmentResult(matches, set(), set(), math.fsum(C[i, j] for i, j in matches), n=n, m=m)
