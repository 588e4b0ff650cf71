"""Typed graph model: schema, edge ingestion, partitioning and edge buckets."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    pass


class EdgeFormatError(ValueError):
    """Raised for a bad edge-file line; carries the 1-based line number."""

    def __init__(self, lineno: int, message: str):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class Coverage(str, enum.Enum):
    HIGH = "high"
    LOW = "low"


@dataclass(frozen=True)
class EntityType:
    name: str


@dataclass(frozen=True)
class RelationType:
    name: str
    source_type: str
    target_type: str
    coverage: Coverage = Coverage.HIGH


@dataclass(frozen=True)
class EntityRef:
    entity_type: str
    local_id: int


@dataclass(frozen=True)
class Edge:
    source: EntityRef
    relation: str
    target: EntityRef


@dataclass(frozen=True)
class Schema:
    entity_types: tuple[str, ...]
    relations: tuple[RelationType, ...]

    def __post_init__(self):
        if len(set(self.entity_types)) != len(self.entity_types):
            raise SchemaError("duplicate entity type")
        if any(not t for t in self.entity_types):
            raise SchemaError("empty entity type name")
        names = [r.name for r in self.relations]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate relation name")
        for r in self.relations:
            for t in (r.source_type, r.target_type):
                if t not in self.entity_types:
                    raise SchemaError(f"relation {r.name!r} references unknown entity type {t!r}")

    @cached_property
    def _rel_index(self) -> dict[str, int]:
        return {r.name: i for i, r in enumerate(self.relations)}

    @property
    def relation_names(self) -> list[str]:
        return [r.name for r in self.relations]

    def relation(self, name: str) -> RelationType:
        try:
            return self.relations[self._rel_index[name]]
        except KeyError:
            raise SchemaError(f"unknown relation {name!r}") from None

    def relation_index(self, name: str) -> int:
        try:
            return self._rel_index[name]
        except KeyError:
            raise SchemaError(f"unknown relation {name!r}") from None

    def restrict(self, relation_names: Iterable[str]) -> "Schema":
        keep = set(relation_names)
        rels = tuple(r for r in self.relations if r.name in keep)
        used = {t for r in rels for t in (r.source_type, r.target_type)}
        return Schema(tuple(t for t in self.entity_types if t in used), rels)

    @classmethod
    def parse(cls, text: str) -> "Schema":
        """Parse ``entity <name>`` / ``relation <name> <src> <dst> <high|low>`` lines."""
        types: list[str] = []
        rels: list[RelationType] = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if parts[0] == "entity" and len(parts) == 2:
                types.append(parts[1])
            elif parts[0] == "relation" and len(parts) == 5:
                try:
                    cov = Coverage(parts[4].lower())
                except ValueError:
                    raise SchemaError(f"line {lineno}: coverage must be high or low") from None
                rels.append(RelationType(parts[1], parts[2], parts[3], cov))
            else:
                raise SchemaError(f"line {lineno}: cannot parse {raw!r}")
        return cls(tuple(types), tuple(rels))

    @classmethod
    def load(cls, path) -> "Schema":
        return cls.parse(Path(path).read_text(encoding="utf-8"))

    def dumps(self) -> str:
        lines = [f"entity {t}" for t in self.entity_types]
        lines += [
            f"relation {r.name} {r.source_type} {r.target_type} {r.coverage.value}" for r in self.relations
        ]
        return "\n".join(lines) + "\n"


@dataclass(eq=False)
class HinGraph:
    """Typed multigraph. Edges are stored column-wise as (relation, source id, target id).

    Local ids are dense per entity type; ``ids[t][i]`` is the external id of
    entity ``i`` of type ``t``.
    """

    schema: Schema
    ids: dict[str, list[str]]
    rel: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    _index: dict[str, dict[str, int]] = field(default=None, repr=False)

    def __post_init__(self):
        self.rel = np.asarray(self.rel, dtype=np.int64)
        self.src = np.asarray(self.src, dtype=np.int64)
        self.dst = np.asarray(self.dst, dtype=np.int64)
        if not (len(self.rel) == len(self.src) == len(self.dst)):
            raise ValueError("edge columns differ in length")
        for t in self.schema.entity_types:
            self.ids.setdefault(t, [])
        if self._index is None:
            self._index = {t: {x: i for i, x in enumerate(v)} for t, v in self.ids.items()}
        nrel = len(self.schema.relations)
        if len(self.rel) and (self.rel.min() < 0 or self.rel.max() >= nrel):
            raise ValueError("relation index out of range")
        for k, r in enumerate(self.schema.relations):
            m = self.rel == k
            for col, t in ((self.src, r.source_type), (self.dst, r.target_type)):
                v = col[m]
                if len(v) and (v.min() < 0 or v.max() >= len(self.ids[t])):
                    raise ValueError(f"entity id out of range for type {t!r} in relation {r.name!r}")

    @property
    def num_edges(self) -> int:
        return len(self.rel)

    @property
    def counts(self) -> dict[str, int]:
        return {t: len(self.ids[t]) for t in self.schema.entity_types}

    @property
    def num_entities(self) -> int:
        return sum(self.counts.values())

    def local_id(self, entity_type: str, external_id: str) -> int:
        return self._index[entity_type][external_id]

    def has_entity(self, entity_type: str, external_id: str) -> bool:
        return external_id in self._index.get(entity_type, ())

    def source_types(self) -> list[str]:
        return [self.schema.relations[k].source_type for k in range(len(self.schema.relations))]

    def edge(self, i: int) -> Edge:
        r = self.schema.relations[int(self.rel[i])]
        return Edge(EntityRef(r.source_type, int(self.src[i])), r.name, EntityRef(r.target_type, int(self.dst[i])))

    def edges(self) -> Iterable[Edge]:
        for i in range(self.num_edges):
            yield self.edge(i)

    def edge_types(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-edge (source type index, target type index) into ``schema.entity_types``."""
        tix = {t: i for i, t in enumerate(self.schema.entity_types)}
        s = np.array([tix[r.source_type] for r in self.schema.relations], dtype=np.int64)
        d = np.array([tix[r.target_type] for r in self.schema.relations], dtype=np.int64)
        return s[self.rel], d[self.rel]

    @cached_property
    def degrees(self) -> dict[str, np.ndarray]:
        deg = {t: np.zeros(n, dtype=np.int64) for t, n in self.counts.items()}
        for k, r in enumerate(self.schema.relations):
            m = self.rel == k
            deg[r.source_type] += np.bincount(self.src[m], minlength=len(deg[r.source_type]))
            deg[r.target_type] += np.bincount(self.dst[m], minlength=len(deg[r.target_type]))
        return deg

    def degree(self, ref: EntityRef) -> int:
        return int(self.degrees[ref.entity_type][ref.local_id])

    def relation_mask(self, name: str) -> np.ndarray:
        return self.rel == self.schema.relation_index(name)

    def subgraph(self, relation_names: Sequence[str]) -> "HinGraph":
        """Keep only the named relations; entities are re-indexed to those still referenced,
        preserving their relative order."""
        schema = self.schema.restrict(relation_names)
        old = self.schema
        keep = np.isin(self.rel, [old.relation_index(n) for n in schema.relation_names])
        rel_old, src, dst = self.rel[keep], self.src[keep], self.dst[keep]
        remap_rel = np.full(len(old.relations), -1, dtype=np.int64)
        for k, r in enumerate(schema.relations):
            remap_rel[old.relation_index(r.name)] = k
        rel = remap_rel[rel_old]
        used = {t: np.zeros(n, dtype=bool) for t, n in self.counts.items()}
        for k, r in enumerate(schema.relations):
            m = rel == k
            used[r.source_type][src[m]] = True
            used[r.target_type][dst[m]] = True
        ids, newid = {}, {}
        for t in schema.entity_types:
            idx = np.flatnonzero(used[t])
            ids[t] = [self.ids[t][i] for i in idx]
            mp = np.full(len(used[t]), -1, dtype=np.int64)
            mp[idx] = np.arange(len(idx))
            newid[t] = mp
        new_src = np.empty_like(src)
        new_dst = np.empty_like(dst)
        for k, r in enumerate(schema.relations):
            m = rel == k
            new_src[m] = newid[r.source_type][src[m]]
            new_dst[m] = newid[r.target_type][dst[m]]
        return HinGraph(schema, ids, rel, new_src, new_dst)

    def with_edges(self, rel, src, dst) -> "HinGraph":
        """Same schema and id space, different edge multiset."""
        return HinGraph(self.schema, {t: list(v) for t, v in self.ids.items()}, rel, src, dst, _index=self._index)

    def reindexed(self, ids: dict[str, list[str]]) -> "HinGraph":
        """The same edges expressed in another id space (e.g. a checkpoint's id map).

        Every entity referenced by an edge must exist in ``ids``; entities listed in
        ``ids`` but absent here simply have no edges.
        """
        new_ids = {t: list(ids.get(t, ())) for t in self.schema.entity_types}
        index = {t: {x: i for i, x in enumerate(v)} for t, v in new_ids.items()}
        maps = {}
        for t in self.schema.entity_types:
            mp = np.full(len(self.ids[t]), -1, dtype=np.int64)
            for i, x in enumerate(self.ids[t]):
                mp[i] = index[t].get(x, -1)
            maps[t] = mp
        src = np.empty_like(self.src)
        dst = np.empty_like(self.dst)
        for k, r in enumerate(self.schema.relations):
            m = self.rel == k
            for t, old, new in ((r.source_type, self.src[m], src), (r.target_type, self.dst[m], dst)):
                mapped = maps[t][old]
                if len(mapped) and mapped.min() < 0:
                    missing = self.ids[t][int(old[np.argmin(mapped)])]
                    raise SchemaError(f"{t} {missing!r} is not in the target id space")
                new[m] = mapped
        return HinGraph(self.schema, new_ids, self.rel.copy(), src, dst, _index=index)

    def write_edges(self, path, mask: np.ndarray | None = None) -> None:
        idx = np.arange(self.num_edges) if mask is None else np.flatnonzero(mask)
        with open(path, "w", encoding="utf-8") as fh:
            for i in idx:
                r = self.schema.relations[int(self.rel[i])]
                fh.write(
                    f"{r.source_type}\t{self.ids[r.source_type][self.src[i]]}\t{r.name}\t"
                    f"{r.target_type}\t{self.ids[r.target_type][self.dst[i]]}\n"
                )


class _GraphBuilder:
    def __init__(self, schema: Schema):
        self.schema = schema
        self.ids: dict[str, list[str]] = {t: [] for t in schema.entity_types}
        self.index: dict[str, dict[str, int]] = {t: {} for t in schema.entity_types}
        self.rel: list[int] = []
        self.src: list[int] = []
        self.dst: list[int] = []

    def intern(self, t: str, x: str) -> int:
        idx = self.index[t]
        i = idx.get(x)
        if i is None:
            i = idx[x] = len(self.ids[t])
            self.ids[t].append(x)
        return i

    def add(self, stype: str, sid: str, rname: str, ttype: str, tid: str, lineno: int = 0) -> None:
        try:
            k = self.schema.relation_index(rname)
        except SchemaError:
            raise EdgeFormatError(lineno, f"unknown relation {rname!r}") from None
        r = self.schema.relations[k]
        if stype != r.source_type or ttype != r.target_type:
            raise EdgeFormatError(
                lineno,
                f"relation {rname!r} expects {r.source_type}->{r.target_type}, got {stype}->{ttype}",
            )
        if not sid or not tid:
            raise EdgeFormatError(lineno, "empty entity id")
        self.rel.append(k)
        self.src.append(self.intern(stype, sid))
        self.dst.append(self.intern(ttype, tid))

    def build(self) -> HinGraph:
        return HinGraph(self.schema, self.ids, self.rel, self.src, self.dst, _index=self.index)


def parse_edges(lines: Iterable[str], schema: Schema) -> HinGraph:
    b = _GraphBuilder(schema)
    for lineno, raw in enumerate(lines, 1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 5:
            raise EdgeFormatError(lineno, f"expected 5 tab-separated fields, got {len(parts)}")
        b.add(*parts, lineno=lineno)
    return b.build()


def load_edges(path, schema: Schema) -> HinGraph:
    """Read a TSV edge file. Local ids follow first-seen order; duplicate lines are kept."""
    with open(path, encoding="utf-8") as fh:
        return parse_edges(fh, schema)


def graph_from_triples(schema: Schema, triples: Iterable[tuple[str, str, str]]) -> HinGraph:
    """Build from ``(source_id, relation, target_id)`` with types taken from the relation."""
    b = _GraphBuilder(schema)
    for sid, rname, tid in triples:
        r = schema.relation(rname)
        b.add(r.source_type, sid, rname, r.target_type, tid)
    return b.build()


def write_id_map(graph: HinGraph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in graph.schema.entity_types:
            for i, x in enumerate(graph.ids[t]):
                fh.write(f"{t}\t{x}\t{i}\n")


def read_id_map(path) -> dict[str, list[str]]:
    ids: dict[str, dict[int, str]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.rstrip("\r\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise EdgeFormatError(lineno, "id map lines need 3 fields")
            ids.setdefault(parts[0], {})[int(parts[2])] = parts[1]
    out = {}
    for t, m in ids.items():
        if sorted(m) != list(range(len(m))):
            raise ValueError(f"id map for {t!r} is not dense")
        out[t] = [m[i] for i in range(len(m))]
    return out


@dataclass
class Partitioning:
    num_partitions: int
    assignment: dict[str, np.ndarray]

    def partition_of(self, ref: EntityRef) -> int:
        return int(self.assignment[ref.entity_type][ref.local_id])

    def sizes(self) -> np.ndarray:
        tot = np.zeros(self.num_partitions, dtype=np.int64)
        for a in self.assignment.values():
            tot += np.bincount(a, minlength=self.num_partitions)
        return tot


_PARTITION_STREAM = 0x5041525449


def partition(graph: HinGraph, num_partitions: int, seed: int = 0) -> Partitioning:
    """Random balanced assignment: each type is shuffled, then dealt round-robin.

    Every entity is equally likely to land in any partition, and per-type
    partition sizes differ by at most one.
    """
    if num_partitions < 1:
        raise ValueError("number of partitions must be >= 1")
    # own stream, so a shuffle drawn elsewhere from the same seed is not replayed here
    rng = np.random.default_rng([seed, _PARTITION_STREAM])
    assignment = {}
    for t in graph.schema.entity_types:
        n = graph.counts[t]
        a = np.empty(n, dtype=np.int64)
        a[rng.permutation(n)] = np.arange(n) % num_partitions
        # rotate which partitions get the remainder so they don't all pile onto 0
        a = (a + rng.integers(num_partitions)) % num_partitions
        assignment[t] = a
    return Partitioning(num_partitions, assignment)


@dataclass
class Bucket:
    source_partition: int
    target_partition: int
    edge_indices: np.ndarray

    @property
    def key(self) -> tuple[int, int]:
        return self.source_partition, self.target_partition

    @property
    def partitions(self) -> frozenset[int]:
        return frozenset((self.source_partition, self.target_partition))

    def __len__(self) -> int:
        return len(self.edge_indices)


def edge_partitions(graph: HinGraph, partitioning: Partitioning) -> tuple[np.ndarray, np.ndarray]:
    ps = np.empty(graph.num_edges, dtype=np.int64)
    pt = np.empty(graph.num_edges, dtype=np.int64)
    for k, r in enumerate(graph.schema.relations):
        m = graph.rel == k
        for out, col, t in ((ps, graph.src, r.source_type), (pt, graph.dst, r.target_type)):
            a = partitioning.assignment.get(t)
            if a is None or len(a) < graph.counts[t]:
                raise ValueError(f"partitioning does not cover entity type {t!r}")
            out[m] = a[col[m]]
    return ps, pt


def bucketize(graph: HinGraph, partitioning: Partitioning) -> list[Bucket]:
    """All P*P buckets in row-major (i, j) order; some may be empty."""
    P = partitioning.num_partitions
    ps, pt = edge_partitions(graph, partitioning)
    key = ps * P + pt
    order = np.argsort(key, kind="stable")
    bounds = np.searchsorted(key[order], np.arange(P * P + 1))
    return [Bucket(b // P, b % P, order[bounds[b]:bounds[b + 1]]) for b in range(P * P)]
