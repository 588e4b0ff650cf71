"""Global target clustering and per-entity cluster-engagement mixtures."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import EntityRef, HinGraph
from .store import EmbeddingStore, read_container, write_container


class NoEngagementError(ValueError):
    pass


def sq_distances(X: np.ndarray, C: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """Exact squared Euclidean distances (no norm expansion), row-chunked.

    Accumulates one coordinate at a time, so the work is O(n k d) without an
    (n, k, d) temporary."""
    out = np.zeros((len(X), len(C)), dtype=np.float64)
    tmp = np.empty((min(chunk, len(X)), len(C)))
    for a in range(0, len(X), chunk):
        blk = out[a:a + chunk]
        t = tmp[:len(blk)]
        for j in range(X.shape[1]):
            np.subtract(X[a:a + chunk, j, None], C[None, :, j], out=t)
            np.square(t, out=t)
            blk += t
    return out


def _fast_assign(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    # argmin of |x|^2 - 2 x.c + |c|^2; the |x|^2 term is constant per row
    d = X @ C.T
    d *= -2.0
    d += np.einsum("ij,ij->i", C, C)[None, :]
    return d.argmin(axis=1)


def nearest(X: np.ndarray, C: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Index of the nearest row of C for every row of X (ties: lowest index) and its squared distance."""
    d = sq_distances(np.asarray(X, dtype=np.float64), np.asarray(C, dtype=np.float64))
    idx = d.argmin(axis=1)
    return idx, d[np.arange(len(X)), idx]


@dataclass
class ClusterModel:
    centroids: np.ndarray
    assignment: np.ndarray
    inertia: float
    inertia_history: list[float] = field(default_factory=list)
    target_type: str | None = None

    @property
    def k(self) -> int:
        return len(self.centroids)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return nearest(X, self.centroids)[0]

    def save(self, path) -> None:
        tables = [("centroids", self.centroids.astype(np.float32)), ("assignment", self.assignment.astype(np.int64)[None, :])]
        if self.target_type:
            tables.append((f"target_type:{self.target_type}", np.zeros((1, 0), dtype=np.uint8)))
        write_container(path, self.centroids.shape[1], tables)

    @classmethod
    def load(cls, path) -> "ClusterModel":
        _, tables = read_container(path)
        C = tables["centroids"].astype(np.float64)
        a = tables["assignment"][0]
        ttype = next((n.split(":", 1)[1] for n in tables if n.startswith("target_type:")), None)
        return cls(C, a, float("nan"), target_type=ttype)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    d2 = np.einsum("ij,ij->i", X - X[chosen[0]], X - X[chosen[0]])
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            c = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            c = min(c, n - 1)
        else:
            rest = np.setdiff1d(np.arange(n), chosen)
            c = int(rng.choice(rest))
        chosen.append(c)
        diff = X - X[c]
        np.minimum(d2, np.einsum("ij,ij->i", diff, diff), out=d2)
    return X[chosen].copy()


def _cluster_sums(X: np.ndarray, a: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    sums = np.empty((k, X.shape[1]))
    for j in range(X.shape[1]):
        sums[:, j] = np.bincount(a, weights=X[:, j], minlength=k)
    return sums, np.bincount(a, minlength=k)


def _lloyd_update(X: np.ndarray, a: np.ndarray, C: np.ndarray) -> np.ndarray:
    sums, cnt = _cluster_sums(X, a, len(C))
    newC = C.copy()
    nz = cnt > 0
    newC[nz] = sums[nz] / cnt[nz, None]
    return newC


def kmeans(
    targets: np.ndarray,
    k: int,
    seed: int = 0,
    max_iters: int = 100,
    batch_size: int | None = None,
    tol: float = 1e-4,
    refine_iters: int = 2,
) -> ClusterModel:
    """k-means++ seeding followed by Lloyd (``batch_size=None``) or mini-batch updates.

    Mini-batch mode uses per-centre running means (step 1/count) and finishes with
    ``refine_iters`` full-batch Lloyd passes; ``inertia_history`` records the
    inertia after each full-batch pass, which can only go down.
    """
    X = np.asarray(targets, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("need a non-empty 2-d target matrix")
    n = len(X)
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    C = _kmeans_pp(X, k, rng)
    full = batch_size is None or batch_size >= n
    if full:
        passes = max_iters
    else:
        passes = refine_iters
        v = np.zeros(k)
        for _ in range(max_iters):
            idx = rng.choice(n, size=batch_size, replace=False)
            M = X[idx]
            sums, cnt = _cluster_sums(M, _fast_assign(M, C), k)
            nz = cnt > 0
            newC = C.copy()
            newC[nz] = (v[nz, None] * C[nz] + sums[nz]) / (v[nz] + cnt[nz])[:, None]
            v += cnt
            shift = float(np.sqrt(((newC - C) ** 2).sum(1)).max())
            C = newC
            if shift < tol:
                break
    # full-batch Lloyd passes with exact assignments; each accepted pass is recorded
    assign, d2 = nearest(X, C)
    history = [float(d2.sum())]
    for _ in range(passes):
        newC = _lloyd_update(X, assign, C)
        shift = float(np.sqrt(((newC - C) ** 2).sum(1)).max())
        a2, e2 = nearest(X, newC)
        if float(e2.sum()) > history[-1]:
            break  # only float rounding can get here; keep the better centroids
        C, assign, d2 = newC, a2, e2
        history.append(float(d2.sum()))
        if shift < tol:
            break
    return ClusterModel(C, assign, float(d2.sum()), history)


@dataclass(frozen=True)
class MixtureComponent:
    cluster: int
    weight: float
    count: int
    centroid: np.ndarray = field(compare=False, repr=False)


@dataclass
class MixtureRepresentation:
    components: list[MixtureComponent]

    def __len__(self) -> int:
        return len(self.components)

    @property
    def weights(self) -> list[float]:
        return [c.weight for c in self.components]

    @property
    def clusters(self) -> list[int]:
        return [c.cluster for c in self.components]

    def format(self) -> str:
        return ",".join(f"{c.cluster}:{c.weight!r}" for c in self.components)


def _top_m(clusters: np.ndarray, counts: np.ndarray, m: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((clusters, -counts))[:m]
    return clusters[order], counts[order]


def _mixture_from_counts(clusters, counts, m, centroids) -> MixtureRepresentation:
    cl, ct = _top_m(np.asarray(clusters), np.asarray(counts), m)
    total = int(ct.sum())
    return MixtureRepresentation(
        [MixtureComponent(int(c), int(n) / total, int(n), centroids[c]) for c, n in zip(cl, ct)]
    )


def _engagement_edges(graph: HinGraph, source_type: str, target_type: str, relations=None) -> np.ndarray:
    keep = np.zeros(graph.num_edges, dtype=bool)
    for k, r in enumerate(graph.schema.relations):
        if r.source_type == source_type and r.target_type == target_type and (relations is None or r.name in relations):
            keep |= graph.rel == k
    return keep


def engaged_targets(graph: HinGraph, source_type: str, target_type: str, relations: Sequence[str] | None = None) -> np.ndarray:
    """Sorted local ids of ``target_type`` entities with at least one engagement from ``source_type``."""
    keep = _engagement_edges(graph, source_type, target_type, relations)
    return np.unique(graph.dst[keep])


def fit_target_clusters(
    store: EmbeddingStore,
    graph: HinGraph,
    k: int,
    source_type: str,
    target_type: str,
    relations: Sequence[str] | None = None,
    seed: int = 0,
    max_iters: int = 100,
    batch_size: int | None = None,
) -> ClusterModel:
    """k-means over the embeddings of engaged targets only.

    The returned assignment covers every entity of ``target_type`` (nearest centroid),
    so mixtures and out-of-vocabulary lookups can address any target; inertia and
    its history refer to the fitted set.
    """
    fit = engaged_targets(graph, source_type, target_type, relations)
    if len(fit) == 0:
        raise NoEngagementError(f"no {target_type} entity is engaged by {source_type}")
    table = store.entity_table(target_type).astype(np.float64)
    model = kmeans(table[fit], min(k, len(fit)), seed=seed, max_iters=max_iters, batch_size=batch_size)
    model.assignment = model.predict(table)
    model.target_type = target_type
    return model


def engagement_distribution(
    source: EntityRef,
    graph: HinGraph,
    model: ClusterModel,
    m: int,
    target_type: str | None = None,
    relations: Sequence[str] | None = None,
) -> MixtureRepresentation:
    """Count the source's engagements per target cluster, keep the top ``m`` (ties to the
    lower cluster index) and renormalise over the kept clusters."""
    if m < 1:
        raise ValueError("m must be >= 1")
    ttype = target_type or model.target_type
    if ttype is None:
        raise ValueError("cluster model does not record its target type; pass target_type")
    keep = _engagement_edges(graph, source.entity_type, ttype, relations) & (graph.src == source.local_id)
    targets = graph.dst[keep]
    if len(targets) == 0:
        raise NoEngagementError(f"{source.entity_type} {source.local_id} has no engagements with {ttype}")
    counts = np.bincount(model.assignment[targets], minlength=model.k)
    clusters = np.flatnonzero(counts)
    return _mixture_from_counts(clusters, counts[clusters], m, model.centroids)


def build_mixtures(
    graph: HinGraph,
    model: ClusterModel,
    source_type: str,
    m: int,
    store: EmbeddingStore | None = None,
    target_type: str | None = None,
    relations: Sequence[str] | None = None,
) -> dict[int, MixtureRepresentation]:
    """Mixtures for every entity of ``source_type``. Entities without engagements get a
    single weight-1 component holding their own embedding (cluster -1) when ``store``
    is given, and are omitted otherwise."""
    ttype = target_type or model.target_type
    keep = _engagement_edges(graph, source_type, ttype, relations)
    src, cl = graph.src[keep], model.assignment[graph.dst[keep]]
    pairs, counts = np.unique(np.stack([src, cl], axis=1), axis=0, return_counts=True) if len(src) else (
        np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))
    out: dict[int, MixtureRepresentation] = {}
    bounds = np.flatnonzero(np.diff(pairs[:, 0])) + 1
    for grp, cnt in zip(np.split(pairs, bounds), np.split(counts, bounds)):
        if len(grp):
            out[int(grp[0, 0])] = _mixture_from_counts(grp[:, 1], cnt, m, model.centroids)
    if store is not None:
        table = store.entity_table(source_type)
        for i in range(graph.counts[source_type]):
            if i not in out:
                out[i] = MixtureRepresentation([MixtureComponent(-1, 1.0, 0, table[i].astype(np.float64))])
    return dict(sorted(out.items()))


def embed_oov_target(neighbors: Sequence[EntityRef], store: EmbeddingStore, model: ClusterModel) -> tuple[int, np.ndarray]:
    """Represent an unseen entity by the centroid nearest to the mean of its known neighbours."""
    if not neighbors:
        raise NoEngagementError("out-of-vocabulary entity has no known neighbours")
    vecs = np.stack([store.gather(n.entity_type, [n.local_id])[0].astype(np.float64) for n in neighbors])
    c, _ = nearest(vecs.mean(axis=0, keepdims=True), model.centroids)
    return int(c[0]), model.centroids[int(c[0])].copy()


def write_mixtures(path, graph: HinGraph, source_type: str, mixtures: dict[int, MixtureRepresentation]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for i, mix in mixtures.items():
            fh.write(f"{source_type}\t{graph.ids[source_type][i]}\t{mix.format()}\n")


def read_mixtures(path) -> dict[tuple[str, str], list[tuple[int, float]]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if not line:
                continue
            t, x, comps = line.split("\t")
            out[(t, x)] = [(int(c), float(w)) for c, w in (p.split(":") for p in comps.split(","))]
    return out
