"""Offline metrics (recall@k, MRR, RCE, ROC-AUC), link-prediction splits and
planted-community synthetic graphs for desk-scale experiments."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Collection, Mapping, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata

from .graph import Coverage, HinGraph, RelationType, Schema
from .store import EmbeddingStore
from .trainer import score_many

log = logging.getLogger(__name__)

CE_CLIP = 1e-9


# -- ranking metrics --------------------------------------------------------


def _queries_with_positives(ranked, positives):
    if len(ranked) != len(positives):
        raise ValueError("ranked lists and positive sets differ in length")
    keep = [(r, set(p)) for r, p in zip(ranked, positives) if len(p)]
    dropped = len(ranked) - len(keep)
    if dropped:
        log.info("excluded %d queries with no held-out positives", dropped)
    return keep


def recall_at_k(ranked: Sequence[Sequence], positives: Sequence[Collection], k: int) -> float:
    """Mean over queries of |top-k & positives| / |positives|; queries without positives are skipped."""
    if k < 1:
        raise ValueError("k must be >= 1")
    keep = _queries_with_positives(ranked, positives)
    if not keep:
        raise ValueError("no query has a positive")
    return float(np.mean([len(set(list(r)[:k]) & p) / len(p) for r, p in keep]))


def mrr(ranked: Sequence[Sequence], positives: Sequence[Collection]) -> float:
    """Mean reciprocal rank of the first positive; 0 when none is retrieved."""
    keep = _queries_with_positives(ranked, positives)
    if not keep:
        raise ValueError("empty query set")
    total = 0.0
    for r, p in keep:
        for n, x in enumerate(r, 1):
            if x in p:
                total += 1.0 / n
                break
    return total / len(keep)


# -- calibration metrics ----------------------------------------------------


def _mean_bce(y: np.ndarray, p: np.ndarray) -> float:
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def rce(labels, predictions, prior: float | None = None) -> float:
    """100 * (CE(prior) - CE(predictions)) / CE(prior), natural-log binary cross entropy.

    ``prior`` defaults to the label mean. Predictions are clipped to
    [1e-9, 1 - 1e-9]; clipping is logged.
    """
    y = np.asarray(labels, dtype=np.float64)
    p = np.asarray(predictions, dtype=np.float64)
    if y.shape != p.shape or y.ndim != 1 or len(y) == 0:
        raise ValueError("labels and predictions must be equal-length non-empty vectors")
    if not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("labels must be 0 or 1")
    prior = float(y.mean()) if prior is None else float(prior)
    if not 0.0 < prior < 1.0:
        raise ValueError(f"prior {prior} must lie strictly inside (0, 1); all labels equal?")
    clipped = np.clip(p, CE_CLIP, 1.0 - CE_CLIP)
    if (clipped != p).any():
        log.warning("clipped %d predictions to [%g, 1-%g]", int((clipped != p).sum()), CE_CLIP, CE_CLIP)
    ref = _mean_bce(y, np.full_like(y, prior))
    ce = _mean_bce(y, clipped)
    return 100.0 * (ref - ce) / ref


def roc_auc(labels, scores) -> float:
    """Mann-Whitney AUC with mid-ranks for ties."""
    y = np.asarray(labels).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    npos, nneg = int(y.sum()), int((~y).sum())
    if npos == 0 or nneg == 0:
        raise ValueError("need both classes")
    r = rankdata(s)
    return float((r[y].sum() - npos * (npos + 1) / 2) / (npos * nneg))


@dataclass
class LinearScorer:
    """L2-regularised logistic regression fitted by Newton steps."""

    weights: np.ndarray
    bias: float

    @classmethod
    def fit(cls, X, y, l2: float = 1e-3, iters: int = 25) -> "LinearScorer":
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        Xb = np.hstack([X, np.ones((len(X), 1))])
        w = np.zeros(Xb.shape[1])
        reg = l2 * len(X) * np.eye(len(w))
        reg[-1, -1] = 0.0
        for _ in range(iters):
            z = Xb @ w
            p = expit(z)
            g = Xb.T @ (p - y) + reg @ w
            H = (Xb * (p * (1 - p))[:, None]).T @ Xb + reg
            step = np.linalg.solve(H, g)
            w -= step
            if np.abs(step).max() < 1e-10:
                break
        return cls(w[:-1], float(w[-1]))

    def decision(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias


# -- link prediction --------------------------------------------------------


@dataclass
class EvalSplit:
    train: HinGraph
    relation: str
    heldout: dict[int, set[int]]
    candidates: np.ndarray

    @property
    def num_heldout(self) -> int:
        return sum(len(v) for v in self.heldout.values())


def split_edges(graph: HinGraph, relation: str, fraction: float = 0.1, seed: int = 0) -> EvalSplit:
    """Hold out a random ``fraction`` of the relation's distinct (source, target) pairs.

    Every copy of a held-out pair leaves the training graph, so held-out and
    training edges are disjoint. The id space is unchanged.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    k = graph.schema.relation_index(relation)
    r = graph.schema.relations[k]
    m = graph.rel == k
    pairs = np.unique(np.stack([graph.src[m], graph.dst[m]], axis=1), axis=0)
    rng = np.random.default_rng(seed)
    n_out = max(1, int(round(fraction * len(pairs))))
    out = pairs[np.sort(rng.choice(len(pairs), size=n_out, replace=False))]
    n_t = graph.counts[r.target_type]
    code_out = out[:, 0] * n_t + out[:, 1]
    code_all = graph.src * n_t + graph.dst
    drop = m & np.isin(code_all, code_out)
    train = graph.with_edges(graph.rel[~drop], graph.src[~drop], graph.dst[~drop])
    heldout: dict[int, set[int]] = {}
    for s, t in out.tolist():
        heldout.setdefault(s, set()).add(t)
    return EvalSplit(train, relation, heldout, np.arange(n_t))


def split_from_graph(train: HinGraph, heldout: HinGraph, relation: str) -> EvalSplit:
    """Build a split from a held-out edge graph whose ids resolve in ``train``'s id space."""
    r = train.schema.relation(relation)
    k = heldout.schema.relation_index(relation)
    m = heldout.rel == k
    out: dict[int, set[int]] = {}
    for s, t in zip(heldout.src[m], heldout.dst[m]):
        sx, tx = heldout.ids[r.source_type][s], heldout.ids[r.target_type][t]
        if not (train.has_entity(r.source_type, sx) and train.has_entity(r.target_type, tx)):
            continue
        out.setdefault(train.local_id(r.source_type, sx), set()).add(train.local_id(r.target_type, tx))
    return EvalSplit(train, relation, out, np.arange(train.counts[r.target_type]))


def rank_targets(store: EmbeddingStore, split: EvalSplit, filter_train: bool = False, translate: bool = True):
    """Full-universe ranking of candidate targets for every query source (best first)."""
    r = split.train.schema.relation(split.relation)
    queries = sorted(split.heldout)
    S = store.gather(r.source_type, queries).astype(np.float64)
    if translate:
        S = S + store.relation(split.relation).astype(np.float64)
    T = store.gather(r.target_type, split.candidates).astype(np.float64)
    scores = S @ T.T
    if filter_train:
        k = split.train.schema.relation_index(split.relation)
        m = split.train.rel == k
        qpos = {q: i for i, q in enumerate(queries)}
        cpos = np.full(split.train.counts[r.target_type], -1)
        cpos[split.candidates] = np.arange(len(split.candidates))
        for s, t in zip(split.train.src[m], split.train.dst[m]):
            if s in qpos and cpos[t] >= 0 and t not in split.heldout[s]:
                scores[qpos[s], cpos[t]] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")
    ranked = []
    for i in range(len(queries)):
        o = order[i]
        if filter_train:
            o = o[np.isfinite(scores[i, o])]
        ranked.append(split.candidates[o].tolist())
    return queries, ranked


def link_prediction(store: EmbeddingStore, split: EvalSplit, ks=(10,), filter_train: bool = False) -> dict[str, float]:
    queries, ranked = rank_targets(store, split, filter_train=filter_train)
    positives = [split.heldout[q] for q in queries]
    out = {f"recall@{k}": recall_at_k(ranked, positives, k) for k in ks}
    out["mrr"] = mrr(ranked, positives)
    out["queries"] = float(len(queries))
    return out


def heldout_auc(store: EmbeddingStore, split: EvalSplit, seed: int = 0, negatives_per_positive: int = 1) -> float:
    """AUC of held-out true edges against uniformly drawn non-edges of the same relation."""
    g = split.train
    r = g.schema.relation(split.relation)
    pos = np.array([(s, t) for s, ts in sorted(split.heldout.items()) for t in sorted(ts)])
    k = g.schema.relation_index(split.relation)
    m = g.rel == k
    n_t = g.counts[r.target_type]
    known = set((g.src[m] * n_t + g.dst[m]).tolist()) | set((pos[:, 0] * n_t + pos[:, 1]).tolist())
    rng = np.random.default_rng(seed)
    need = len(pos) * negatives_per_positive
    neg = []
    while len(neg) < need:
        s = int(rng.integers(g.counts[r.source_type]))
        t = int(rng.integers(n_t))
        if s * n_t + t not in known and not (r.source_type == r.target_type and s == t):
            neg.append((s, t))
    neg = np.array(neg)
    sp = score_many(store, r.name, r.source_type, r.target_type, pos[:, 0], pos[:, 1])
    sn = score_many(store, r.name, r.source_type, r.target_type, neg[:, 0], neg[:, 1])
    return roc_auc(np.r_[np.ones(len(sp)), np.zeros(len(sn))], np.r_[sp, sn])


# -- synthetic data ---------------------------------------------------------


@dataclass
class RelationSpec:
    name: str
    source_type: str
    target_type: str
    density: float = 0.1  # edge probability between entities sharing a community
    inter_density: float = 0.0  # edge probability otherwise
    coverage: Coverage = Coverage.HIGH
    participation: float = 1.0  # fraction of source entities taking part
    # which endpoints link through secondary interests: "both", "source" or "none"
    interest_sides: str = "both"


@dataclass
class SyntheticSpec:
    entity_counts: Mapping[str, int]
    relations: Sequence[RelationSpec]
    communities: int = 2
    multi_interest: float = 0.0  # fraction of entities (of multi_interest_types) with extra communities
    interests: int = 2
    multi_interest_types: Sequence[str] | None = None
    popularity: float = 0.0  # sigma of lognormal per-entity weights; 0 gives equal degrees
    seed: int = 0


@dataclass
class GroundTruth:
    community: dict[str, np.ndarray]
    memberships: dict[str, np.ndarray]  # bool (n, communities)
    participants: dict[str, np.ndarray] = field(default_factory=dict)
    weights: dict[str, np.ndarray] = field(default_factory=dict)


def generate_synthetic_hin(spec: SyntheticSpec) -> tuple[HinGraph, GroundTruth]:
    """Degree-corrected planted-partition heterogeneous graph.

    Pair (s, t) is linked with probability ``min(1, p * w_s * w_t)`` where p is the
    relation's ``density`` when s and t share a community and ``inter_density``
    otherwise, and w are unit-mean lognormal weights. Local ids equal generation
    order and external ids are ``<type><index>``.
    """
    rng = np.random.default_rng(spec.seed)
    C = spec.communities
    if C < 1:
        raise ValueError("need at least one community")
    if not 1 <= spec.interests <= C:
        raise ValueError("interests must lie in [1, communities]")
    types = tuple(spec.entity_counts)
    multi_types = set(types if spec.multi_interest_types is None else spec.multi_interest_types)
    community, member, weight = {}, {}, {}
    for t in types:
        n = spec.entity_counts[t]
        comm = np.empty(n, dtype=np.int64)
        comm[rng.permutation(n)] = np.arange(n) % C
        M = np.zeros((n, C), dtype=bool)
        M[np.arange(n), comm] = True
        if t in multi_types and spec.multi_interest > 0:
            multi = np.flatnonzero(rng.random(n) < spec.multi_interest)
            for i in multi:
                others = np.setdiff1d(np.arange(C), [comm[i]])
                M[i, rng.choice(others, size=spec.interests - 1, replace=False)] = True
        community[t], member[t] = comm, M
        if spec.popularity > 0:
            w = rng.lognormal(0.0, spec.popularity, size=n)
            weight[t] = w / w.mean()
        else:
            weight[t] = np.ones(n)
    rels, src, dst, participants = [], [], [], {}
    schema_rels = []
    for k, rs in enumerate(spec.relations):
        if not 0.0 < rs.density <= 1.0:
            raise ValueError(f"relation {rs.name!r}: density must lie in (0, 1]")
        if not 0.0 <= rs.inter_density <= 1.0:
            raise ValueError(f"relation {rs.name!r}: inter_density must lie in [0, 1]")
        schema_rels.append(RelationType(rs.name, rs.source_type, rs.target_type, Coverage(rs.coverage)))
        Ms, Mt = member[rs.source_type], member[rs.target_type]
        if rs.interest_sides not in ("both", "source", "none"):
            raise ValueError(f"relation {rs.name!r}: interest_sides must be both, source or none")
        if rs.interest_sides == "none":
            Ms = np.eye(C, dtype=bool)[community[rs.source_type]]
        if rs.interest_sides != "both":
            Mt = np.eye(C, dtype=bool)[community[rs.target_type]]
        shared = (Ms.astype(np.int64) @ Mt.T.astype(np.int64)) > 0
        prob = np.where(shared, rs.density, rs.inter_density)
        prob = np.minimum(1.0, prob * np.outer(weight[rs.source_type], weight[rs.target_type]))
        part = rng.random(len(Ms)) < rs.participation
        participants[rs.name] = part
        hit = (rng.random(prob.shape) < prob) & part[:, None]
        if rs.source_type == rs.target_type:
            np.fill_diagonal(hit, False)
        s, t = np.nonzero(hit)
        rels.append(np.full(len(s), k))
        src.append(s)
        dst.append(t)
    schema = Schema(types, tuple(schema_rels))
    ids = {t: [f"{t}{i}" for i in range(spec.entity_counts[t])] for t in types}
    graph = HinGraph(schema, ids, np.concatenate(rels), np.concatenate(src), np.concatenate(dst))
    return graph, GroundTruth(community, member, participants, weight)


def _mixture_rows(n, dim, seed, clusters, spread):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((clusters, dim))
    labels = rng.integers(clusters, size=n)
    return rng, centers, labels, centers[labels] + spread * rng.standard_normal((n, dim))


def synthetic_embedding_table(n: int, dim: int, seed: int = 0, clusters: int = 64, spread: float = 1.0) -> np.ndarray:
    """Gaussian-mixture rows, a stand-in for a trained embedding table."""
    return _mixture_rows(n, dim, seed, clusters, spread)[3]


def synthetic_embedding_task(
    n: int, dim: int, seed: int = 0, clusters: int = 64, spread: float = 1.0, signal: float = 2.0
) -> tuple[np.ndarray, np.ndarray]:
    """Embedding-like rows plus binary labels for a downstream scorer.

    The label of a row depends on its latent cluster only: it is Bernoulli with
    probability ``sigmoid(signal * <w, center>)`` for a random ``w`` of norm about
    sqrt(dim)/8. Rows equal ``synthetic_embedding_table(n, dim, seed, ...)``.
    """
    rng, centers, labels, X = _mixture_rows(n, dim, seed, clusters, spread)
    w = rng.standard_normal(dim) / 8
    y = (rng.random(n) < expit(signal * centers[labels] @ w)).astype(np.int64)
    return X, y
