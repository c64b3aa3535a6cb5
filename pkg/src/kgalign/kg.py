"""Knowledge-graph data model, TSV ingestion and a synthetic paired-KG generator."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np


class DataError(ValueError):
    """Base class for malformed or inconsistent input data."""


class ParseError(DataError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = str(path)
        self.lineno = lineno


class UnknownEntityError(DataError):
    """A triple or pair references an entity id that is not declared."""


class ValidationError(DataError):
    pass


class CoverageError(DataError):
    def __init__(self, missing: Sequence[str]):
        shown = ", ".join(missing[:10])
        more = f" (+{len(missing) - 10} more)" if len(missing) > 10 else ""
        super().__init__(f"embeddings missing for {len(missing)} entities: {shown}{more}")
        self.missing = list(missing)


class DimensionError(DataError):
    pass


@dataclass(frozen=True, eq=False)
class KnowledgeGraph:
    entity_ids: tuple[str, ...]
    relation_ids: tuple[str, ...]
    triples: np.ndarray  # (T, 3) int64 rows of (head, relation, tail)
    adjacency: tuple[np.ndarray, ...] = field(repr=False)
    index: dict[str, int] = field(repr=False, compare=False)

    @classmethod
    def build(cls, entity_ids: Iterable[str], relation_ids: Iterable[str], triples) -> "KnowledgeGraph":
        entity_ids = tuple(entity_ids)
        relation_ids = tuple(relation_ids)
        index: dict[str, int] = {}
        for k, e in enumerate(entity_ids):
            if e in index:
                raise ValidationError(f"duplicate entity id {e!r}")
            index[e] = k
        if len(set(relation_ids)) != len(relation_ids):
            raise ValidationError("duplicate relation id")
        t = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        n, r = len(entity_ids), len(relation_ids)
        if t.size:
            if t[:, [0, 2]].min() < 0 or t[:, [0, 2]].max() >= n:
                raise ValidationError("triple entity index out of range")
            if t[:, 1].min() < 0 or t[:, 1].max() >= r:
                raise ValidationError("triple relation index out of range")
            if len(np.unique(t, axis=0)) != len(t):
                raise ValidationError("duplicate triple")
        t.setflags(write=False)
        return cls(entity_ids, relation_ids, t, _adjacency(n, t), index)

    def __eq__(self, other) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (self.entity_ids == other.entity_ids and self.relation_ids == other.relation_ids
                and np.array_equal(self.triples, other.triples))

    __hash__ = None

    @property
    def n_entities(self) -> int:
        return len(self.entity_ids)

    def neighbors(self, i: int) -> np.ndarray:
        return self.adjacency[i]


def _adjacency(n: int, triples: np.ndarray) -> tuple[np.ndarray, ...]:
    if n == 0:
        return ()
    h, t = triples[:, 0], triples[:, 2]
    keep = h != t
    a = np.concatenate([h[keep], t[keep]])
    b = np.concatenate([t[keep], h[keep]])
    pairs = np.unique(np.stack([a, b], axis=1), axis=0) if len(a) else np.zeros((0, 2), np.int64)
    bounds = np.searchsorted(pairs[:, 0], np.arange(n + 1))
    out = []
    for i in range(n):
        nb = pairs[bounds[i]:bounds[i + 1], 1].copy()
        nb.setflags(write=False)
        out.append(nb)
    return tuple(out)


@dataclass(frozen=True)
class GoldLabels:
    pairs: tuple[tuple[int, int], ...]
    dangling_src: frozenset[int]
    dangling_tgt: frozenset[int]

    def __post_init__(self):
        src = [i for i, _ in self.pairs]
        tgt = [j for _, j in self.pairs]
        if len(set(src)) != len(src) or len(set(tgt)) != len(tgt):
            raise ValidationError("gold pairs are not one-to-one")
        if set(src) & self.dangling_src or set(tgt) & self.dangling_tgt:
            raise ValidationError("entity is both paired and dangling")

    def split(self, train_fraction: float, seed: int) -> tuple["GoldLabels", "GoldLabels"]:
        """Random (train, test) split of pairs and of each dangling set."""
        rng = np.random.default_rng(seed)

        def cut(items):
            items = sorted(items)
            perm = rng.permutation(len(items))
            k = int(round(train_fraction * len(items)))
            return [items[p] for p in sorted(perm[:k])], [items[p] for p in sorted(perm[k:])]

        p_tr, p_te = cut(self.pairs)
        ds_tr, ds_te = cut(self.dangling_src)
        dt_tr, dt_te = cut(self.dangling_tgt)
        return (
            GoldLabels(tuple(map(tuple, p_tr)), frozenset(ds_tr), frozenset(dt_tr)),
            GoldLabels(tuple(map(tuple, p_te)), frozenset(ds_te), frozenset(dt_te)),
        )


@dataclass(frozen=True)
class SynthConfig:
    n_matchable: int = 500
    n_dangling_src: int = 125
    n_dangling_tgt: int = 125
    dim: int = 32
    noise_sigma: float = 0.1
    edge_prob: float = 0.01
    seed: int = 0
    n_relations: int = 4

    def __post_init__(self):
        if min(self.n_matchable, self.n_dangling_src, self.n_dangling_tgt) < 0:
            raise ValidationError("entity counts must be >= 0")
        if not 0.0 <= self.edge_prob <= 1.0:
            raise ValidationError("edge_prob must lie in [0, 1]")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if self.dim < 1 or self.n_relations < 1:
            raise ValidationError("dim and n_relations must be >= 1")


# ---------------------------------------------------------------------------
# file formats


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if line.strip():
                yield lineno, line


def read_entities(path) -> list[str]:
    ids = []
    for lineno, line in _read_lines(path):
        if "\t" in line:
            raise ParseError(path, lineno, "entity line contains a tab")
        ids.append(line)
    return ids


def load_kg(triples_path, entities_path) -> KnowledgeGraph:
    entity_ids = read_entities(entities_path)
    seen: set[str] = set()
    for e in entity_ids:
        if e in seen:
            raise ValidationError(f"duplicate entity id {e!r} in {entities_path}")
        seen.add(e)
    index = {e: k for k, e in enumerate(entity_ids)}
    relations: dict[str, int] = {}
    triples = []
    for lineno, line in _read_lines(triples_path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(triples_path, lineno, f"expected 3 tab-separated fields, got {len(parts)}")
        h, r, t = parts
        for e in (h, t):
            if e not in index:
                raise UnknownEntityError(f"{triples_path}:{lineno}: unknown entity id {e!r}")
        triples.append((index[h], relations.setdefault(r, len(relations)), index[t]))
    return KnowledgeGraph.build(entity_ids, relations, triples)


def write_kg(kg: KnowledgeGraph, triples_path, entities_path) -> None:
    with open(entities_path, "w", encoding="utf-8") as fh:
        fh.writelines(e + "\n" for e in kg.entity_ids)
    with open(triples_path, "w", encoding="utf-8") as fh:
        for h, r, t in kg.triples:
            fh.write(f"{kg.entity_ids[h]}\t{kg.relation_ids[r]}\t{kg.entity_ids[t]}\n")


def load_embeddings(path, kg: KnowledgeGraph) -> np.ndarray:
    """Read an embeddings TSV into an (n_entities, dim) float64 array in KG order."""
    rows: dict[str, np.ndarray] = {}
    dim = None
    for lineno, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(path, lineno, "expected 'entity_id<TAB>values'")
        eid, values = parts
        try:
            vec = np.array([float(tok) for tok in values.split()], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(path, lineno, str(exc)) from None
        if not np.all(np.isfinite(vec)):
            raise ParseError(path, lineno, "non-finite value")
        if dim is None:
            dim = len(vec)
            if dim == 0:
                raise DimensionError(f"{path}:{lineno}: empty vector")
        elif len(vec) != dim:
            raise DimensionError(f"{path}:{lineno}: vector length {len(vec)} != {dim}")
        if eid in rows:
            raise ValidationError(f"{path}:{lineno}: entity {eid!r} listed twice")
        if eid not in kg.index:
            raise UnknownEntityError(f"{path}:{lineno}: unknown entity id {eid!r}")
        rows[eid] = vec
    missing = [e for e in kg.entity_ids if e not in rows]
    if missing:
        raise CoverageError(missing)
    if dim is None:
        return np.zeros((0, 0))
    return np.stack([rows[e] for e in kg.entity_ids])


def write_embeddings(path, entity_ids: Sequence[str], emb: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for eid, row in zip(entity_ids, emb):
            fh.write(eid + "\t" + " ".join(repr(float(x)) for x in row) + "\n")


def check_embeddings(emb: np.ndarray, kg: KnowledgeGraph) -> None:
    if emb.ndim != 2 or emb.shape[0] != kg.n_entities:
        raise DimensionError(f"embedding shape {emb.shape} does not match {kg.n_entities} entities")
    if not np.all(np.isfinite(emb)):
        raise ValidationError("embeddings contain non-finite values")


def l2_normalize(emb: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(emb, axis=1, keepdims=True)
    return np.divide(emb, norms, out=np.zeros_like(emb, dtype=np.float64), where=norms > 0)


def read_pairs(path, src: KnowledgeGraph, tgt: KnowledgeGraph, with_score: bool = False):
    out = []
    for lineno, line in _read_lines(path):
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise ParseError(path, lineno, "expected 'src_id<TAB>tgt_id[<TAB>score]'")
        s, t = parts[0], parts[1]
        if s not in src.index:
            raise UnknownEntityError(f"{path}:{lineno}: unknown source entity {s!r}")
        if t not in tgt.index:
            raise UnknownEntityError(f"{path}:{lineno}: unknown target entity {t!r}")
        item = (src.index[s], tgt.index[t])
        if with_score:
            try:
                item += (float(parts[2]) if len(parts) == 3 else float("nan"),)
            except ValueError as exc:
                raise ParseError(path, lineno, str(exc)) from None
        out.append(item)
    return out


def write_pairs(path, pairs, src_ids: Sequence[str], tgt_ids: Sequence[str], scores=None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for k, (i, j) in enumerate(pairs):
            line = f"{src_ids[i]}\t{tgt_ids[j]}"
            if scores is not None:
                line += f"\t{float(scores[k])!r}"
            fh.write(line + "\n")


def read_dangling(path, kg: KnowledgeGraph) -> set[int]:
    out = set()
    for lineno, e in _read_lines(path):
        if e not in kg.index:
            raise UnknownEntityError(f"{path}:{lineno}: unknown entity id {e!r}")
        out.add(kg.index[e])
    return out


def write_dangling(path, indices, entity_ids: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(entity_ids[i] + "\n" for i in sorted(indices))


# ---------------------------------------------------------------------------
# synthetic data


def _unrank_pairs(idx: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Map linear indices over {(a, b): 0 <= a < b < n} (row-major) back to (a, b)."""
    # number of pairs preceding row a: a*n - a*(a+1)/2
    idx = idx.astype(np.float64)
    a = np.floor((2 * n - 1 - np.sqrt((2 * n - 1) ** 2 - 8 * idx)) / 2).astype(np.int64)
    a = np.clip(a, 0, max(n - 2, 0))
    start = a * n - a * (a + 1) // 2
    # float rounding can land one row off
    over = start > idx
    a[over] -= 1
    start = a * n - a * (a + 1) // 2
    nxt = (a + 1) * n - (a + 1) * (a + 2) // 2
    under = idx >= nxt
    a[under] += 1
    start = a * n - a * (a + 1) // 2
    b = (idx - start).astype(np.int64) + a + 1
    return a, b


def _sample_edges(rng: np.random.Generator, n: int, p: float) -> tuple[np.ndarray, np.ndarray]:
    total = n * (n - 1) // 2
    if total == 0 or p == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    count = int(rng.binomial(total, p))
    chosen = np.sort(rng.choice(total, size=count, replace=False))
    return _unrank_pairs(chosen, n)


def synth_kg_pair(cfg: SynthConfig):
    """Generate two aligned KGs with dangling entities on both sides.

    Matchable pairs share a latent vector; each side adds its own Gaussian noise
    of scale ``noise_sigma``. Edges among matchable entities are drawn once and
    copied to both graphs with the same relation, so structure correlates. Edges
    touching a dangling entity are drawn independently per side. Entity order is
    shuffled per side so gold pairs are not the identity map.

    Returns ``(src_kg, tgt_kg, src_emb, tgt_emb, gold)``.
    """
    rng = np.random.default_rng(cfg.seed)
    nm, ds, dt, d = cfg.n_matchable, cfg.n_dangling_src, cfg.n_dangling_tgt, cfg.dim
    latent = rng.standard_normal((nm, d))
    src_raw = np.concatenate([latent + cfg.noise_sigma * rng.standard_normal((nm, d)),
                              rng.standard_normal((ds, d))])
    tgt_raw = np.concatenate([latent + cfg.noise_sigma * rng.standard_normal((nm, d)),
                              rng.standard_normal((dt, d))])

    core_a, core_b = _sample_edges(rng, nm, cfg.edge_prob)
    core_rel = rng.integers(cfg.n_relations, size=len(core_a))

    def side_triples(n_total):
        a, b = _sample_edges(rng, n_total, cfg.edge_prob)
        extra = (a >= nm) | (b >= nm)  # core-core edges come from the shared draw
        a, b = a[extra], b[extra]
        rel = rng.integers(cfg.n_relations, size=len(a))
        heads = np.concatenate([core_a, a])
        tails = np.concatenate([core_b, b])
        rels = np.concatenate([core_rel, rel])
        flip = rng.random(len(heads)) < 0.5
        heads, tails = np.where(flip, tails, heads), np.where(flip, heads, tails)
        return heads, rels, tails

    sh, sr, st = side_triples(nm + ds)
    th, tr, tt = side_triples(nm + dt)

    perm_s = rng.permutation(nm + ds)  # perm_s[raw] = new position
    perm_t = rng.permutation(nm + dt)
    src_emb = np.empty_like(src_raw)
    src_emb[perm_s] = src_raw
    tgt_emb = np.empty_like(tgt_raw)
    tgt_emb[perm_t] = tgt_raw

    rel_ids = [f"r{k}" for k in range(cfg.n_relations)]
    src_kg = KnowledgeGraph.build([f"s{k}" for k in range(nm + ds)], rel_ids,
                                  np.stack([perm_s[sh], sr, perm_s[st]], axis=1))
    tgt_kg = KnowledgeGraph.build([f"t{k}" for k in range(nm + dt)], rel_ids,
                                  np.stack([perm_t[th], tr, perm_t[tt]], axis=1))
    gold = GoldLabels(
        pairs=tuple(sorted((int(perm_s[k]), int(perm_t[k])) for k in range(nm))),
        dangling_src=frozenset(int(perm_s[k]) for k in range(nm, nm + ds)),
        dangling_tgt=frozenset(int(perm_t[k]) for k in range(nm, nm + dt)),
    )
    return src_kg, tgt_kg, src_emb, tgt_emb, gold
