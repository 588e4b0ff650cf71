"""Re-training against an evolved graph with bounded drift from the previous version."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .graph import HinGraph, Partitioning, partition
from .store import EmbeddingStore, init_store
from .trainer import Anchor, TrainConfig, TrainReport, train

log = logging.getLogger(__name__)


class RetrainMode(str, enum.Enum):
    COLD = "cold"
    WARM = "warm"
    ANCHORED = "anchor"


class NewNodeInit(str, enum.Enum):
    RANDOM = "random"
    NEIGHBORHOOD = "neighborhood"


@dataclass
class RetrainPolicy:
    mode: RetrainMode = RetrainMode.WARM
    alpha: float = 0.1
    new_node_init: NewNodeInit = NewNodeInit.NEIGHBORHOOD
    # subtract the relation vector when the new node is the edge source
    directional: bool = False
    # carry Adagrad accumulators of surviving rows into the new version
    carry_accumulators: bool = True
    init_scale: float = 0.1

    def __post_init__(self):
        self.mode = RetrainMode(self.mode)
        self.new_node_init = NewNodeInit(self.new_node_init)
        if self.mode is RetrainMode.ANCHORED and not self.alpha > 0:
            raise ValueError("alpha must be positive for anchored retraining")


def shared_rows(graph: HinGraph, prev_ids: dict[str, list[str]]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """For each entity type: (local ids in ``graph``, local ids in the previous version) of
    entities present in both."""
    out = {}
    for t in graph.schema.entity_types:
        index = {x: i for i, x in enumerate(prev_ids.get(t, ()))}
        pairs = [(i, index[x]) for i, x in enumerate(graph.ids[t]) if x in index]
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        out[t] = (arr[:, 0], arr[:, 1])
    return out


def warm_start_init(
    graph: HinGraph,
    prev: EmbeddingStore,
    prev_ids: dict[str, list[str]],
    new_node_init: NewNodeInit | str = NewNodeInit.NEIGHBORHOOD,
    seed: int = 0,
    scale: float = 0.1,
    dim: int | None = None,
    directional: bool = False,
    carry_accumulators: bool = True,
) -> EmbeddingStore:
    """Copy surviving rows and relation vectors; initialise new entities.

    With the neighbourhood rule a new entity v gets the mean, over its edges to
    entities of the previous version, of theta_{v'} + theta_r. Entities with no such
    edge keep a uniform random row.
    """
    new_node_init = NewNodeInit(new_node_init)
    if dim is not None and dim != prev.dim:
        raise ValueError(f"dimension mismatch: previous version has {prev.dim}, requested {dim}")
    store = init_store(graph, prev.dim, seed=seed, scale=scale, dtype=prev.dtype)
    shared = shared_rows(graph, prev_ids)
    known = {}
    for t in graph.schema.entity_types:
        new_i, old_i = shared[t]
        tab = store._entities[t]
        known[t] = np.zeros(len(tab), dtype=bool)
        known[t][new_i] = True
        if t not in prev.counts:
            continue
        tab[new_i] = prev.entity_table(t)[old_i]
        if carry_accumulators:
            store._entity_acc[t][new_i] = prev.accumulator(t)[old_i]
    rel_vec = np.zeros((len(graph.schema.relations), prev.dim))
    for k, name in enumerate(graph.schema.relation_names):
        if name in prev.relation_names:
            j = prev.relation_index(name)
            store._relations[k] = prev.relations[j]
            if carry_accumulators:
                store._relation_acc[k] = prev.relation_accumulators[j]
            rel_vec[k] = prev.relations[j].astype(np.float64)
    if new_node_init is NewNodeInit.RANDOM:
        return store

    sums = {t: np.zeros((n, prev.dim)) for t, n in graph.counts.items()}
    cnts = {t: np.zeros(n, dtype=np.int64) for t, n in graph.counts.items()}
    # previous-version values aligned to the new id space
    old = {t: store._entities[t].astype(np.float64) for t in graph.schema.entity_types}
    for k, r in enumerate(graph.schema.relations):
        m = graph.rel == k
        s, d = graph.src[m], graph.dst[m]
        ks, kd = known[r.source_type][s], known[r.target_type][d]
        sel = ~kd & ks  # new target, known source
        np.add.at(sums[r.target_type], d[sel], old[r.source_type][s[sel]] + rel_vec[k])
        np.add.at(cnts[r.target_type], d[sel], 1)
        sel = ~ks & kd  # new source, known target
        sign = -1.0 if directional else 1.0
        np.add.at(sums[r.source_type], s[sel], old[r.target_type][d[sel]] + sign * rel_vec[k])
        np.add.at(cnts[r.source_type], s[sel], 1)
    for t in graph.schema.entity_types:
        hit = (cnts[t] > 0) & ~known[t]
        store._entities[t][hit] = (sums[t][hit] / cnts[t][hit, None]).astype(store.dtype)
    return store


@dataclass
class DecileStats:
    decile: int
    count: int
    mean_l2: float
    max_l2: float
    mean_relative: float
    min_degree: int
    max_degree: int


@dataclass
class DriftReport:
    entity_types: np.ndarray
    local_ids: np.ndarray
    deviation: np.ndarray
    relative: np.ndarray
    degree: np.ndarray
    deciles: list[DecileStats]

    @property
    def count(self) -> int:
        return len(self.deviation)

    @property
    def mean(self) -> float:
        return float(self.deviation.mean())

    @property
    def max(self) -> float:
        return float(self.deviation.max())

    @property
    def max_relative(self) -> float:
        return float(self.relative.max())

    def to_tsv(self) -> str:
        lines = ["decile\tcount\tmean_l2\tmax_l2"]
        lines += [f"{d.decile}\t{d.count}\t{d.mean_l2:.9g}\t{d.max_l2:.9g}" for d in self.deciles]
        return "\n".join(lines) + "\n"


def drift_report(
    store_a: EmbeddingStore,
    store_b: EmbeddingStore,
    graph: HinGraph,
    ids_a: dict[str, list[str]] | None = None,
    deciles: int = 10,
) -> DriftReport:
    """Per-entity ||theta_b - theta_a||_2 over entities in both versions.

    ``store_b`` and ``graph`` share an id space (the new version). ``ids_a`` maps the
    old store's local ids to external ids; without it both stores share local ids.
    Degree groups are equal-population slices of the new graph's degree order.
    """
    types, ids, dev, rel, deg = [], [], [], [], []
    for t in graph.schema.entity_types:
        if t not in store_a.counts or t not in store_b.counts:
            continue
        if ids_a is None:
            n = min(store_a.counts[t], store_b.counts[t])
            new_i = old_i = np.arange(n)
        else:
            new_i, old_i = shared_rows(graph, ids_a)[t]
        if not len(new_i):
            continue
        a = store_a.entity_table(t)[old_i].astype(np.float64)
        b = store_b.entity_table(t)[new_i].astype(np.float64)
        dv = np.sqrt(((b - a) ** 2).sum(1))
        na = np.sqrt((a * a).sum(1))
        types.append(np.full(len(new_i), t, dtype=object))
        ids.append(new_i)
        dev.append(dv)
        rel.append(np.divide(dv, na, out=np.zeros_like(dv), where=na > 0))
        deg.append(graph.degrees[t][new_i])
    if not dev:
        raise ValueError("no entities shared between the two versions")
    types, ids, dev, rel, deg = (np.concatenate(x) for x in (types, ids, dev, rel, deg))
    order = np.argsort(deg, kind="stable")
    stats = []
    for q, grp in enumerate(np.array_split(order, deciles)):
        if not len(grp):
            continue
        stats.append(
            DecileStats(q, len(grp), float(dev[grp].mean()), float(dev[grp].max()), float(rel[grp].mean()),
                        int(deg[grp].min()), int(deg[grp].max()))
        )
    return DriftReport(types, ids, dev, rel, deg, stats)


def anchor_for(graph: HinGraph, prev: EmbeddingStore, prev_ids: dict[str, list[str]], alpha: float) -> Anchor:
    prev_al, mask = {}, {}
    for t, (new_i, old_i) in shared_rows(graph, prev_ids).items():
        arr = np.zeros((graph.counts[t], prev.dim))
        m = np.zeros(graph.counts[t], dtype=bool)
        if t in prev.counts:
            arr[new_i] = prev.entity_table(t)[old_i]
            m[new_i] = True
        prev_al[t], mask[t] = arr, m
    return Anchor(alpha, prev_al, mask)


def retrain(
    graph: HinGraph,
    prev: EmbeddingStore,
    prev_ids: dict[str, list[str]],
    policy: RetrainPolicy,
    config: TrainConfig,
    partitioning: Partitioning | None = None,
    report: TrainReport | None = None,
) -> tuple[EmbeddingStore, DriftReport]:
    """Cold start, warm start, or warm start plus the L2 pull toward ``prev``.

    The training report is appended to ``report`` when one is passed.
    """
    if partitioning is None:
        partitioning = partition(graph, config.partitions, config.seed)
    anchor = None
    if policy.mode is RetrainMode.COLD:
        store = init_store(graph, prev.dim, seed=config.seed, scale=policy.init_scale, dtype=prev.dtype)
    else:
        store = warm_start_init(
            graph, prev, prev_ids, policy.new_node_init, seed=config.seed, scale=policy.init_scale,
            directional=policy.directional, carry_accumulators=policy.carry_accumulators,
        )
        if policy.mode is RetrainMode.ANCHORED:
            anchor = anchor_for(graph, prev, prev_ids, policy.alpha)
    rep = train(graph, partitioning, store, config, anchor=anchor)
    if report is not None:
        report.rows += rep.rows
    drift = drift_report(prev, store, graph, prev_ids)
    log.info("retrain %s: mean drift %.3g, max drift %.3g", policy.mode.value, drift.mean, drift.max)
    return store, drift
