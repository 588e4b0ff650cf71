"""Translation-dot scoring, negative-sampling loss, Adagrad and bucket-sweep training."""

from __future__ import annotations

import enum
import logging
import threading
import warnings
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .graph import Coverage, Edge, EntityRef, HinGraph, Partitioning, Schema, bucketize
from .store import BucketView, EmbeddingStore, LeaseError

log = logging.getLogger(__name__)

ADAGRAD_EPS = 1e-10


class CorruptSide(str, enum.Enum):
    BOTH = "both"
    SOURCE = "source"
    TARGET = "target"


@dataclass
class TrainConfig:
    epochs: int = 10
    negatives: int = 10
    neg_mix: float = 0.5  # fraction of negatives drawn proportional to degree
    lr: float = 0.03
    batch_size: int = 128
    seed: int = 0
    partitions: int = 1
    corrupt_side: CorruptSide = CorruptSide.BOTH
    workers: int = 1

    def __post_init__(self):
        self.corrupt_side = CorruptSide(self.corrupt_side)
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("negatives", "batch_size", "partitions", "workers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0.0 <= self.neg_mix <= 1.0:
            raise ValueError("neg_mix must lie in [0, 1]")


@dataclass
class Anchor:
    """L2 pull toward a previous version: adds alpha * ||theta_v - prev_v||^2 for every
    touched entity with ``mask`` set."""

    alpha: float
    prev: dict[str, np.ndarray]
    mask: dict[str, np.ndarray]

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


@dataclass
class TripletBatch:
    """Positives as columns (rel, src, dst); negatives as (B, K) source/target id arrays."""

    schema: Schema
    rel: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    neg_src: np.ndarray
    neg_dst: np.ndarray

    def __len__(self) -> int:
        return len(self.rel)

    @classmethod
    def from_edges(cls, schema: Schema, positives: list[Edge], negatives: list[list[Edge]]) -> "TripletBatch":
        if len(positives) != len(negatives) or len({len(n) for n in negatives}) > 1:
            raise ValueError("need the same number of negatives for every positive")
        for e, negs in zip(positives, negatives):
            for n in negs:
                if n.relation != e.relation:
                    raise ValueError("negative must share the relation of its positive")
        rel = np.array([schema.relation_index(e.relation) for e in positives], dtype=np.int64)
        src = np.array([e.source.local_id for e in positives], dtype=np.int64)
        dst = np.array([e.target.local_id for e in positives], dtype=np.int64)
        k = len(negatives[0]) if negatives else 0
        ns = np.array([[n.source.local_id for n in negs] for negs in negatives], dtype=np.int64).reshape(len(positives), k)
        nd = np.array([[n.target.local_id for n in negs] for negs in negatives], dtype=np.int64).reshape(len(positives), k)
        return cls(schema, rel, src, dst, ns, nd)

    def positives(self) -> list[Edge]:
        out = []
        for k, s, t in zip(self.rel, self.src, self.dst):
            r = self.schema.relations[k]
            out.append(Edge(EntityRef(r.source_type, int(s)), r.name, EntityRef(r.target_type, int(t))))
        return out

    def negatives(self) -> list[list[Edge]]:
        out = []
        for b, k in enumerate(self.rel):
            r = self.schema.relations[k]
            out.append([
                Edge(EntityRef(r.source_type, int(s)), r.name, EntityRef(r.target_type, int(t)))
                for s, t in zip(self.neg_src[b], self.neg_dst[b])
            ])
        return out


@dataclass
class SparseGrads:
    entities: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    relations: tuple[np.ndarray, np.ndarray] | None = None


def _bounds_check(params, entity_type: str, i: int) -> None:
    n = params.store.counts[entity_type] if isinstance(params, BucketView) else params.counts[entity_type]
    if not 0 <= i < n:
        raise IndexError(f"{entity_type} id {i} out of range [0, {n})")


def score(params, edge: Edge) -> float:
    """(theta_s + theta_r) . theta_t, evaluated in float64."""
    _bounds_check(params, edge.source.entity_type, edge.source.local_id)
    _bounds_check(params, edge.target.entity_type, edge.target.local_id)
    s = params.gather(edge.source.entity_type, [edge.source.local_id])[0].astype(np.float64)
    t = params.gather(edge.target.entity_type, [edge.target.local_id])[0].astype(np.float64)
    r = params.gather_relations([params.relation_index(edge.relation)])[0].astype(np.float64)
    return float((s + r) @ t)


def score_many(store: EmbeddingStore, relation: str, src_type: str, dst_type: str, src, dst) -> np.ndarray:
    s = store.gather(src_type, src).astype(np.float64)
    t = store.gather(dst_type, dst).astype(np.float64)
    r = store.relation(relation).astype(np.float64)
    return np.einsum("ij,ij->i", s + r, t)


class NegativeSampler:
    """Type-consistent corruption of one endpoint.

    ``source_pools`` and ``target_pools`` restrict replacement candidates per
    entity type for corrupted sources and targets respectively (in a bucket:
    the source and the target partition). Default is graph-wide.
    """

    def __init__(
        self,
        graph: HinGraph,
        config: TrainConfig,
        source_pools: dict[str, np.ndarray] | None = None,
        target_pools: dict[str, np.ndarray] | None = None,
    ):
        self.graph = graph
        self.config = config
        self.sides = {"source": self._side(graph, source_pools), "target": self._side(graph, target_pools)}

    @staticmethod
    def _side(graph: HinGraph, pools) -> dict:
        side = {}
        for t, n in graph.counts.items():
            ids = np.arange(n) if pools is None else np.asarray(pools[t], dtype=np.int64)
            pos = np.full(n, -1, dtype=np.int64)
            pos[ids] = np.arange(len(ids))
            side[t] = (ids, pos, np.cumsum(graph.degrees[t][ids].astype(np.float64)))
        return side

    def pool(self, side: str, entity_type: str) -> np.ndarray:
        return self.sides[side][entity_type][0]

    def _draw(self, side: str, t: str, orig: np.ndarray, prop: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        pool, pos, cum = self.sides[side][t]
        n = len(pool)
        op = pos[orig]
        if (op < 0).any():
            raise LeaseError(f"original {t} entity outside the sampling pool")
        u = rng.integers(0, n - 1, size=len(orig))
        u += u >= op
        out = u
        cnt = int(prop.sum())
        if cnt:
            total = cum[-1]
            opp = op[prop]
            pick = np.searchsorted(cum, rng.random(cnt) * total, side="right")
            for _ in range(64):
                bad = pick == opp
                if not bad.any():
                    break
                pick[bad] = np.searchsorted(cum, rng.random(int(bad.sum())) * total, side="right")
            # all remaining mass on the original endpoint: keep the uniform draw
            bad = pick == opp
            pick[bad] = u[prop][bad]
            out = u.copy()
            out[prop] = pick
        return pool[out]

    def sample(self, rel, src, dst, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        rel, src, dst = (np.asarray(a, dtype=np.int64) for a in (rel, src, dst))
        B, K = len(rel), self.config.negatives
        side = self.config.corrupt_side
        if side is CorruptSide.BOTH:
            tgt = rng.random((B, K)) < 0.5
        else:
            tgt = np.full((B, K), side is CorruptSide.TARGET)
        prop = rng.random((B, K)) < self.config.neg_mix
        neg_src = np.repeat(src[:, None], K, axis=1)
        neg_dst = np.repeat(dst[:, None], K, axis=1)
        for k in np.unique(rel):
            r = self.graph.schema.relations[k]
            m = rel == k
            ok_t = len(self.pool("target", r.target_type)) >= 2
            ok_s = len(self.pool("source", r.source_type)) >= 2
            t_side = tgt[m]
            if not ok_t and not ok_s:
                raise ValueError(f"relation {r.name!r}: both endpoint types have fewer than two candidates")
            if not ok_t:
                if side is CorruptSide.TARGET:
                    raise ValueError(f"type {r.target_type!r} has fewer than two candidates to corrupt")
                t_side[:] = False
            if not ok_s:
                if side is CorruptSide.SOURCE:
                    raise ValueError(f"type {r.source_type!r} has fewer than two candidates to corrupt")
                t_side[:] = True
            rows = np.flatnonzero(m)
            sub_t = np.zeros((B, K), dtype=bool)
            sub_t[rows] = t_side
            sub_s = np.zeros((B, K), dtype=bool)
            sub_s[rows] = ~t_side
            if sub_t.any():
                neg_dst[sub_t] = self._draw("target", r.target_type, neg_dst[sub_t], prop[sub_t], rng)
            if sub_s.any():
                neg_src[sub_s] = self._draw("source", r.source_type, neg_src[sub_s], prop[sub_s], rng)
        return neg_src, neg_dst


def sample_negatives(edge: Edge, graph: HinGraph, config: TrainConfig, rng: np.random.Generator) -> list[Edge]:
    sampler = NegativeSampler(graph, config)
    k = graph.schema.relation_index(edge.relation)
    ns, nd = sampler.sample([k], [edge.source.local_id], [edge.target.local_id], rng)
    return [
        Edge(EntityRef(edge.source.entity_type, int(s)), edge.relation, EntityRef(edge.target.entity_type, int(t)))
        for s, t in zip(ns[0], nd[0])
    ]


def _reduce_rows(rows: list[np.ndarray], grads: list[np.ndarray], dim: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.concatenate(rows)
    g = np.concatenate(grads).reshape(-1, dim)
    uniq, inv = np.unique(r, return_inverse=True)
    out = np.zeros((len(uniq), dim), dtype=np.float64)
    np.add.at(out, inv, g)
    return uniq, out


def batch_loss_and_grads(params, batch: TripletBatch, anchor: Anchor | None = None) -> tuple[float, SparseGrads]:
    """Negated log-likelihood of positives vs negatives and its exact gradient.

    loss = -sum_e [log sigmoid(f(e)) + sum_e' log sigmoid(-f(e'))], all in float64.
    ``params`` is an :class:`EmbeddingStore` or a :class:`BucketView`.
    """
    schema = batch.schema
    d = params.dim
    loss = 0.0
    ent_rows: dict[str, list] = defaultdict(list)
    ent_grads: dict[str, list] = defaultdict(list)
    rel_rows, rel_grads = [], []
    for k in np.unique(batch.rel):
        r = schema.relations[k]
        m = batch.rel == k
        s, t = batch.src[m], batch.dst[m]
        ns, nt = batch.neg_src[m], batch.neg_dst[m]
        b, K = ns.shape
        ridx = params.relation_index(r.name)
        th_r = params.gather_relations([ridx])[0].astype(np.float64)
        S = params.gather(r.source_type, s).astype(np.float64)
        T = params.gather(r.target_type, t).astype(np.float64)
        NS = params.gather(r.source_type, ns.ravel()).astype(np.float64).reshape(b, K, d)
        NT = params.gather(r.target_type, nt.ravel()).astype(np.float64).reshape(b, K, d)
        Sr, NSr = S + th_r, NS + th_r
        f_pos = np.einsum("ij,ij->i", Sr, T)
        f_neg = np.einsum("ijk,ijk->ij", NSr, NT)
        loss += float(np.logaddexp(0.0, -f_pos).sum() + np.logaddexp(0.0, f_neg).sum())
        gp = -expit(-f_pos)[:, None]
        gn = expit(f_neg)[..., None]
        gS, gT = gp * T, gp * Sr
        gNS, gNT = gn * NT, gn * NSr
        ent_rows[r.source_type] += [s, ns.ravel()]
        ent_grads[r.source_type] += [gS, gNS.reshape(-1, d)]
        ent_rows[r.target_type] += [t, nt.ravel()]
        ent_grads[r.target_type] += [gT, gNT.reshape(-1, d)]
        rel_rows.append(np.array([ridx]))
        rel_grads.append(gS.sum(0) + gNS.sum((0, 1)))
    grads = SparseGrads()
    for et in ent_rows:
        uniq, g = _reduce_rows(ent_rows[et], ent_grads[et], d)
        if anchor is not None and et in anchor.mask:
            sel = anchor.mask[et][uniq]
            if sel.any():
                cur = params.gather(et, uniq[sel]).astype(np.float64)
                diff = cur - anchor.prev[et][uniq[sel]]
                loss += float(anchor.alpha * (diff * diff).sum())
                g[sel] += 2.0 * anchor.alpha * diff
        grads.entities[et] = (uniq, g)
    if rel_rows:
        grads.relations = _reduce_rows(rel_rows, rel_grads, d)
    return loss, grads


def adagrad_step(params, grads: SparseGrads, lr: float, eps: float = ADAGRAD_EPS) -> None:
    """acc += g^2; theta -= lr * g / (sqrt(acc) + eps), per coordinate, touched rows only."""
    for et, (rows, g) in grads.entities.items():
        params._adagrad_entities(et, rows, g, lr, eps)
    if grads.relations is not None:
        rows, g = grads.relations
        params._adagrad_relations(rows, g, lr, eps)


@dataclass
class BucketLoss:
    epoch: int
    source_partition: int
    target_partition: int
    mean_loss: float
    num_edges: int


@dataclass
class TrainReport:
    rows: list[BucketLoss] = field(default_factory=list)

    def epoch_losses(self) -> list[float]:
        """Edge-weighted mean loss per epoch."""
        tot: dict[int, float] = defaultdict(float)
        cnt: dict[int, int] = defaultdict(int)
        for r in self.rows:
            tot[r.epoch] += r.mean_loss * r.num_edges
            cnt[r.epoch] += r.num_edges
        return [tot[e] / cnt[e] for e in sorted(tot)]

    def to_tsv(self) -> str:
        lines = ["epoch\tbucket_i\tbucket_j\tmean_loss"]
        lines += [f"{r.epoch}\t{r.source_partition}\t{r.target_partition}\t{r.mean_loss:.6f}" for r in self.rows]
        return "\n".join(lines) + "\n"


def _check_shapes(graph: HinGraph, store: EmbeddingStore) -> None:
    if store.counts != graph.counts:
        raise ValueError(f"store shapes {store.counts} do not match graph counts {graph.counts}")
    missing = set(graph.schema.relation_names) - set(store.relation_names)
    if missing:
        raise ValueError(f"store lacks relations {sorted(missing)}")


def _train_bucket(graph, partitioning, store, config, bucket, epoch, anchor, samplers, view=None) -> BucketLoss:
    i, j = bucket.key
    rng = np.random.default_rng([config.seed, epoch, i, j])
    own = view is None
    view = view or BucketView(store, partitioning, bucket)
    try:
        sampler = samplers.get(bucket.key)
        if sampler is None:
            if partitioning.num_partitions == 1:
                sampler = NegativeSampler(graph, config)
            else:
                # corrupted sources stay in the source partition, targets in the target partition
                src_pool = {t: np.flatnonzero(a == i) for t, a in partitioning.assignment.items()}
                dst_pool = {t: np.flatnonzero(a == j) for t, a in partitioning.assignment.items()}
                sampler = NegativeSampler(graph, config, src_pool, dst_pool)
            samplers[bucket.key] = sampler
        perm = rng.permutation(bucket.edge_indices)
        total = 0.0
        for start in range(0, len(perm), config.batch_size):
            e = perm[start:start + config.batch_size]
            ns, nd = sampler.sample(graph.rel[e], graph.src[e], graph.dst[e], rng)
            batch = TripletBatch(graph.schema, graph.rel[e], graph.src[e], graph.dst[e], ns, nd)
            loss, grads = batch_loss_and_grads(view, batch, anchor)
            adagrad_step(view, grads, config.lr)
            total += loss
    finally:
        if own:
            view.release()
    return BucketLoss(epoch, i, j, total / len(perm), len(perm))


def train(
    graph: HinGraph,
    partitioning: Partitioning,
    store: EmbeddingStore,
    config: TrainConfig,
    anchor: Anchor | None = None,
) -> TrainReport:
    """Sweep every non-empty bucket once per epoch, in a per-epoch shuffled order.

    With ``config.workers > 1`` buckets over disjoint partition pairs run on
    separate threads; results are then only statistically reproducible.
    """
    if partitioning.num_partitions != config.partitions:
        raise ValueError(f"partitioning has P={partitioning.num_partitions}, config says {config.partitions}")
    _check_shapes(graph, store)
    P = partitioning.num_partitions
    buckets = bucketize(graph, partitioning)
    samplers: dict = {}
    report = TrainReport()
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(P * P)
        todo = [buckets[b] for b in order if len(buckets[b])]
        if config.workers == 1:
            for bucket in todo:
                report.rows.append(_train_bucket(graph, partitioning, store, config, bucket, epoch, anchor, samplers))
        else:
            report.rows += _parallel_epoch(graph, partitioning, store, config, todo, epoch, anchor, samplers)
        log.debug("epoch %d mean loss %.5f", epoch, report.epoch_losses()[-1] if report.rows else float("nan"))
    return report


def _parallel_epoch(graph, partitioning, store, config, todo, epoch, anchor, samplers) -> list[BucketLoss]:
    cond = threading.Condition()
    pending = list(todo)
    done: list[BucketLoss] = []
    errors: list[BaseException] = []

    def worker():
        while True:
            with cond:
                view = None
                while view is None:
                    if not pending or errors:
                        return
                    for n, bucket in enumerate(pending):
                        try:
                            view = BucketView(store, partitioning, bucket)
                        except LeaseError:
                            continue
                        pending.pop(n)
                        break
                    else:
                        cond.wait()
            try:
                res = _train_bucket(graph, partitioning, store, config, bucket, epoch, anchor, samplers, view=view)
            except BaseException as exc:  # surfaced after join
                errors.append(exc)
                res = None
            finally:
                view.release()
                with cond:
                    cond.notify_all()
            if res is not None:
                with cond:
                    done.append(res)

    threads = [threading.Thread(target=worker) for _ in range(config.workers)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise errors[0]
    return done


def build_coembedding_graphs(graph: HinGraph) -> list[HinGraph]:
    """One graph per high-coverage relation, each joined with every low-coverage relation."""
    highs = [r.name for r in graph.schema.relations if r.coverage is Coverage.HIGH]
    lows = [r.name for r in graph.schema.relations if r.coverage is Coverage.LOW]
    if not highs:
        raise ValueError("no high-coverage relation to anchor the low-coverage relations")
    counts = np.bincount(graph.rel, minlength=len(graph.schema.relations))
    for k, r in enumerate(graph.schema.relations):
        if counts[k] == 0:
            warnings.warn(f"relation {r.name!r} has no edges", stacklevel=2)
    return [graph.subgraph([h, *lows]) for h in highs]
