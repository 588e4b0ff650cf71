"""Inner-product candidate retrieval: exact scan, inverted-file index, mixture multi-querying.

Similarity is the plain inner product, the same geometry as the training score.
The approximate index reduces inner-product search to Euclidean search by
appending one coordinate ``sqrt(R^2 - |x|^2)`` to every item (R = max norm) and
clustering the augmented vectors; a query probes the ``nprobe`` coarse lists whose
centroids are closest to ``(q, 0)`` and scans them exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mixture import MixtureRepresentation, kmeans
from .store import read_container, write_container

DEFAULT_NLIST = 64
DEFAULT_NPROBE = 12


@dataclass(frozen=True)
class Candidate:
    id: str
    score: float
    component: int = -1


@dataclass
class CandidateList:
    items: list[Candidate] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def ids(self) -> list[str]:
        return [c.id for c in self.items]

    def to_tsv(self) -> str:
        lines = ["rank\tid\tscore\tcomponent"]
        lines += [f"{n}\t{c.id}\t{c.score:.6f}\t{c.component}" for n, c in enumerate(self.items, 1)]
        return "\n".join(lines) + "\n"


@dataclass
class IndexParams:
    mode: str = "exact"  # "exact" or "ivf"
    nlist: int = DEFAULT_NLIST
    nprobe: int = DEFAULT_NPROBE
    seed: int = 0
    train_iters: int = 25

    def __post_init__(self):
        if self.mode not in ("exact", "ivf"):
            raise ValueError(f"unknown index mode {self.mode!r}")
        if self.nlist < 1 or self.nprobe < 1:
            raise ValueError("nlist and nprobe must be >= 1")


@dataclass
class AnnIndex:
    entity_type: str
    ids: list[str]
    vectors: np.ndarray
    params: IndexParams
    coarse: np.ndarray | None = None  # (nlist, d + 1) augmented centroids
    lists: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def save(self, path) -> None:
        blob = np.frombuffer("\n".join(self.ids).encode("utf-8"), dtype=np.uint8)
        tables = [
            (f"type:{self.entity_type}", np.zeros((1, 0), dtype=np.uint8)),
            ("ids", blob[None, :]),
            ("vectors", self.vectors.astype(np.float32)),
            ("params", np.array([[self.params.nlist, self.params.nprobe, self.params.seed, self.params.train_iters,
                                  int(self.params.mode == "ivf")]], dtype=np.int64)),
        ]
        if self.coarse is not None:
            assign = np.empty(len(self.ids), dtype=np.int64)
            for c, members in enumerate(self.lists):
                assign[members] = c
            tables += [("coarse", self.coarse.astype(np.float64)), ("assign", assign[None, :])]
        write_container(path, self.dim, tables)

    @classmethod
    def load(cls, path) -> "AnnIndex":
        _, t = read_container(path)
        etype = next(n.split(":", 1)[1] for n in t if n.startswith("type:"))
        raw = t["ids"].tobytes().decode("utf-8")
        ids = raw.split("\n") if raw else []
        nlist, nprobe, seed, iters, ivf = (int(x) for x in t["params"][0])
        params = IndexParams("ivf" if ivf else "exact", nlist, nprobe, seed, iters)
        idx = cls(etype, ids, t["vectors"], params)
        if "coarse" in t:
            idx.coarse = t["coarse"]
            a = t["assign"][0]
            idx.lists = [np.flatnonzero(a == c) for c in range(len(idx.coarse))]
        return idx


def build_index(vectors: np.ndarray, ids=None, params: IndexParams | None = None, entity_type: str = "item") -> AnnIndex:
    params = params or IndexParams()
    V = np.asarray(vectors)
    if V.ndim != 2 or len(V) == 0:
        raise ValueError("need a non-empty 2-d vector set")
    ids = [str(i) for i in range(len(V))] if ids is None else [str(i) for i in ids]
    if len(ids) != len(V):
        raise ValueError("ids and vectors differ in length")
    index = AnnIndex(entity_type, ids, V.astype(np.float32), params)
    if params.mode == "ivf":
        aug = _augment_items(index.vectors.astype(np.float64))
        nlist = min(params.nlist, len(V))
        sample = min(len(V), max(256 * nlist // 4, 4096))
        batch = None if sample >= len(V) else sample
        model = kmeans(aug, nlist, seed=params.seed, max_iters=params.train_iters, batch_size=batch)
        index.coarse = model.centroids
        index.lists = [np.flatnonzero(model.assignment == c) for c in range(nlist)]
    return index


def _augment_items(V: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", V, V)
    extra = np.sqrt(np.maximum(sq.max() - sq, 0.0))
    return np.hstack([V, extra[:, None]])


def _ranked(rows: np.ndarray, scores: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    # descending score, ties to the lower row
    order = np.lexsort((rows, -scores))[:k]
    return rows[order], scores[order]


def _search(index: AnnIndex, q: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    if index.params.mode == "exact" or index.coarse is None:
        rows = np.arange(len(index))
    else:
        qa = np.append(q, 0.0)
        d = ((index.coarse - qa) ** 2).sum(1)
        probe = np.lexsort((np.arange(len(d)), d))[: index.params.nprobe]
        rows = np.sort(np.concatenate([index.lists[c] for c in probe]))
    scores = index.vectors[rows].astype(np.float64) @ q
    return _ranked(rows, scores, k)


def query_topk(index: AnnIndex, query: np.ndarray, k: int, component: int = -1, exclude=()) -> CandidateList:
    """Top-k items by inner product, best first. Ids in ``exclude`` (e.g. the querying
    entity itself, or items it already engaged with) are skipped, not counted."""
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64).ravel()
    if q.shape[0] != index.dim:
        raise ValueError(f"query has dim {q.shape[0]}, index has {index.dim}")
    exclude = set(map(str, exclude))
    rows, scores = _search(index, q, k + len(exclude))
    out = [Candidate(index.ids[r], float(s), component) for r, s in zip(rows, scores) if index.ids[r] not in exclude]
    return CandidateList(out[:k])


def allocate(weights, total: int) -> list[int]:
    """Largest-remainder split of ``total`` proportional to ``weights`` (ties to earlier entries)."""
    w = np.asarray(weights, dtype=np.float64)
    if len(w) == 0:
        raise ValueError("empty weight vector")
    if (w < 0).any() or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    quota = w / w.sum() * total
    base = np.floor(quota).astype(np.int64)
    short = total - int(base.sum())
    rem = quota - base
    order = np.lexsort((np.arange(len(w)), -rem))
    base[order[:short]] += 1
    return base.tolist()


def multi_query(index: AnnIndex, mixture: MixtureRepresentation, K: int, exclude=()) -> CandidateList:
    """Query each mixture centroid for its proportional share of ``K`` and merge.

    Duplicate ids keep their highest-scoring provenance; the merged list is
    sorted by score and has at most ``K`` entries. ``exclude`` is passed to every
    component query.
    """
    if len(mixture) == 0:
        raise ValueError("empty mixture")
    if K < len(mixture):
        raise ValueError(f"K={K} is smaller than the number of mixture components {len(mixture)}")
    best: dict[str, Candidate] = {}
    for comp, n in zip(mixture.components, allocate(mixture.weights, K)):
        if n == 0:
            continue
        for c in query_topk(index, comp.centroid, n, component=comp.cluster, exclude=exclude):
            if c.id not in best or c.score > best[c.id].score:
                best[c.id] = c
    pos = {x: i for i, x in enumerate(index.ids)}
    merged = sorted(best.values(), key=lambda c: (-c.score, pos[c.id]))
    return CandidateList(merged)


def brute_force_topk(vectors: np.ndarray, query: np.ndarray, k: int) -> np.ndarray:
    """Reference ranking: float64 scores, stable sort by descending score."""
    s = np.asarray(vectors, dtype=np.float64) @ np.asarray(query, dtype=np.float64)
    return np.lexsort((np.arange(len(s)), -s))[:k]
