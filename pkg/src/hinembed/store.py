"""Dense parameter tables, Adagrad state, checkpoint I/O and partition leases.

Checkpoint layout (all integers little-endian)::

    magic       4 bytes   b"HINE"
    version     u32       FORMAT_VERSION
    dim         u32
    ntables     u32
    ntables x descriptor:
        name_len u16, name utf-8, dtype u8, rows u64, cols u32
    table payloads, row-major, in descriptor order

dtype codes: 1 float32, 2 float64, 3 uint8, 4 int64.
"""

from __future__ import annotations

import os
import struct
import threading
from typing import Mapping

import numpy as np

from .graph import Bucket, HinGraph, Partitioning

MAGIC = b"HINE"
FORMAT_VERSION = 1

_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


class LeaseError(RuntimeError):
    pass


def write_container(path, dim: int, tables: list[tuple[str, np.ndarray]]) -> None:
    names = [n for n, _ in tables]
    if len(set(names)) != len(names):
        raise ValueError("duplicate table name")
    head = [MAGIC, struct.pack("<III", FORMAT_VERSION, dim, len(tables))]
    body = []
    for name, arr in tables:
        arr = np.asarray(arr)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        code = _CODES[arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype]
        raw = name.encode("utf-8")
        head.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BQI", code, arr.shape[0], arr.shape[1]))
        body.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(head))
        for b in body:
            fh.write(b)
    os.replace(tmp, path)


def read_container(path) -> tuple[int, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        data = fh.read()

    def take(off: int, n: int) -> bytes:
        if off + n > len(data):
            raise CheckpointError(f"{path}: truncated")
        return data[off:off + n]

    if len(data) >= 4 and data[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    version, dim, ntables = struct.unpack("<III", take(4, 12))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    off = 16
    descs = []
    for _ in range(ntables):
        (nlen,) = struct.unpack("<H", take(off, 2))
        name = take(off + 2, nlen).decode("utf-8")
        code, rows, cols = struct.unpack("<BQI", take(off + 2 + nlen, 13))
        off += 2 + nlen + 13
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for table {name!r}")
        descs.append((name, _DTYPES[code], rows, cols))
    if len({d[0] for d in descs}) != len(descs):
        raise CheckpointError(f"{path}: duplicate table descriptor")
    need = off + sum(dt.itemsize * r * c for _, dt, r, c in descs)
    if len(data) < need:
        raise CheckpointError(f"{path}: truncated ({len(data)} of {need} bytes)")
    if len(data) > need:
        raise CheckpointError(f"{path}: {len(data) - need} trailing bytes")
    tables = {}
    for name, dt, rows, cols in descs:
        n = dt.itemsize * rows * cols
        tables[name] = np.frombuffer(data, dtype=dt, count=rows * cols, offset=off).reshape(rows, cols).copy()
        off += n
    return dim, tables


class EmbeddingStore:
    """Entity tables (one per type), relation vectors and matching Adagrad accumulators.

    Direct reads through :meth:`entity_table` / :meth:`gather` are refused while a
    bucket view holds a lease; training goes through :class:`BucketView`.
    """

    def __init__(
        self,
        dim: int,
        entities: Mapping[str, np.ndarray],
        relation_names: list[str],
        relations: np.ndarray,
        entity_acc: Mapping[str, np.ndarray] | None = None,
        relation_acc: np.ndarray | None = None,
    ):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self._entities = {t: np.ascontiguousarray(v) for t, v in entities.items()}
        self.relation_names = list(relation_names)
        self._rel_index = {n: i for i, n in enumerate(self.relation_names)}
        self._relations = np.ascontiguousarray(relations).reshape(len(self.relation_names), dim)
        self.dtype = self._relations.dtype
        self._entity_acc = (
            {t: np.zeros_like(v) for t, v in self._entities.items()}
            if entity_acc is None
            else {t: np.ascontiguousarray(v) for t, v in entity_acc.items()}
        )
        self._relation_acc = np.zeros_like(self._relations) if relation_acc is None else np.ascontiguousarray(relation_acc)
        for t, v in self._entities.items():
            if v.ndim != 2 or v.shape[1] != dim:
                raise ValueError(f"entity table {t!r} has shape {v.shape}, expected (n, {dim})")
            if self._entity_acc[t].shape != v.shape:
                raise ValueError(f"accumulator shape mismatch for {t!r}")
        if self._relation_acc.shape != self._relations.shape:
            raise ValueError("relation accumulator shape mismatch")
        self._leased: set[int] = set()
        self._lease_lock = threading.Lock()
        self.relation_lock = threading.Lock()

    # -- construction -------------------------------------------------------

    @classmethod
    def zeros_like_graph(cls, graph: HinGraph, dim: int, dtype=np.float32) -> "EmbeddingStore":
        ents = {t: np.zeros((n, dim), dtype=dtype) for t, n in graph.counts.items()}
        return cls(dim, ents, graph.schema.relation_names, np.zeros((len(graph.schema.relations), dim), dtype=dtype))

    def copy(self) -> "EmbeddingStore":
        return EmbeddingStore(
            self.dim,
            {t: v.copy() for t, v in self._entities.items()},
            list(self.relation_names),
            self._relations.copy(),
            {t: v.copy() for t, v in self._entity_acc.items()},
            self._relation_acc.copy(),
        )

    def astype(self, dtype) -> "EmbeddingStore":
        return EmbeddingStore(
            self.dim,
            {t: v.astype(dtype) for t, v in self._entities.items()},
            list(self.relation_names),
            self._relations.astype(dtype),
            {t: v.astype(dtype) for t, v in self._entity_acc.items()},
            self._relation_acc.astype(dtype),
        )

    # -- reads --------------------------------------------------------------

    @property
    def entity_types(self) -> list[str]:
        return list(self._entities)

    @property
    def counts(self) -> dict[str, int]:
        return {t: len(v) for t, v in self._entities.items()}

    def _check_unleased(self) -> None:
        if self._leased:
            raise LeaseError(f"partitions {sorted(self._leased)} are leased; read through the bucket view")

    def entity_table(self, entity_type: str) -> np.ndarray:
        self._check_unleased()
        return self._entities[entity_type]

    def accumulator(self, entity_type: str) -> np.ndarray:
        self._check_unleased()
        return self._entity_acc[entity_type]

    @property
    def relations(self) -> np.ndarray:
        self._check_unleased()
        return self._relations

    @property
    def relation_accumulators(self) -> np.ndarray:
        self._check_unleased()
        return self._relation_acc

    def relation_index(self, name: str) -> int:
        return self._rel_index[name]

    def relation(self, name: str) -> np.ndarray:
        return self.relations[self._rel_index[name]]

    def gather(self, entity_type: str, ids) -> np.ndarray:
        self._check_unleased()
        return self._entities[entity_type][np.asarray(ids)]

    def gather_relations(self, idx) -> np.ndarray:
        self._check_unleased()
        return self._relations[np.asarray(idx)]

    def is_finite(self) -> bool:
        arrays = [*self._entities.values(), self._relations, *self._entity_acc.values(), self._relation_acc]
        return all(np.isfinite(a).all() for a in arrays)

    def equals(self, other: "EmbeddingStore") -> bool:
        """Bitwise equality of every table and accumulator."""
        if self.dim != other.dim or self.relation_names != other.relation_names:
            return False
        if self.entity_types != other.entity_types or self.dtype != other.dtype:
            return False
        pairs = [(self._relations, other._relations), (self._relation_acc, other._relation_acc)]
        for t in self._entities:
            pairs += [(self._entities[t], other._entities[t]), (self._entity_acc[t], other._entity_acc[t])]
        return all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in pairs)

    # -- writes used by the optimizer ---------------------------------------

    def _adagrad_rows(self, table, acc, rows, grad, lr, eps) -> None:
        g = grad.astype(table.dtype, copy=False)
        a = acc[rows] + g * g
        acc[rows] = a
        table[rows] -= (lr * g / (np.sqrt(a) + eps)).astype(table.dtype, copy=False)

    def _adagrad_entities(self, entity_type, rows, grad, lr, eps) -> None:
        self._check_unleased()
        self._adagrad_rows(self._entities[entity_type], self._entity_acc[entity_type], rows, grad, lr, eps)

    def _adagrad_relations(self, rows, grad, lr, eps) -> None:
        self._check_unleased()
        self._adagrad_rows(self._relations, self._relation_acc, rows, grad, lr, eps)

    # -- leases -------------------------------------------------------------

    def _acquire(self, parts: frozenset[int]) -> None:
        with self._lease_lock:
            held = parts & self._leased
            if held:
                raise LeaseError(f"partitions {sorted(held)} already leased")
            self._leased |= parts

    def try_acquire(self, parts: frozenset[int]) -> bool:
        with self._lease_lock:
            if parts & self._leased:
                return False
            self._leased |= parts
            return True

    def _release(self, parts: frozenset[int]) -> None:
        with self._lease_lock:
            self._leased -= parts

    @property
    def leased_partitions(self) -> frozenset[int]:
        return frozenset(self._leased)

    # -- persistence --------------------------------------------------------

    def tables(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for t in self._entities:
            out.append((f"entity:{t}", self._entities[t]))
            out.append((f"acc:entity:{t}", self._entity_acc[t]))
        for k, name in enumerate(self.relation_names):
            out.append((f"relation:{name}", self._relations[k:k + 1]))
            out.append((f"acc:relation:{name}", self._relation_acc[k:k + 1]))
        return out


def init_store(graph: HinGraph, dim: int = 64, seed: int = 0, scale: float = 0.1, dtype=np.float32) -> EmbeddingStore:
    """Entities uniform in [-scale, scale], relations zero, accumulators zero."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if scale <= 0:
        raise ValueError("scale must be positive")
    rng = np.random.default_rng(seed)
    ents = {t: rng.uniform(-scale, scale, size=(n, dim)).astype(dtype) for t, n in graph.counts.items()}
    rels = np.zeros((len(graph.schema.relations), dim), dtype=dtype)
    return EmbeddingStore(dim, ents, graph.schema.relation_names, rels)


def save_checkpoint(store: EmbeddingStore, path) -> None:
    write_container(path, store.dim, store.tables())


def load_checkpoint(path) -> EmbeddingStore:
    dim, tables = read_container(path)
    ents, accs, rel_names, rels, racc = {}, {}, [], [], []
    for name, arr in tables.items():
        kind, _, rest = name.partition(":")
        if kind == "entity":
            ents[rest] = arr
        elif kind == "relation":
            rel_names.append(rest)
            rels.append(arr)
        elif kind == "acc":
            sub, _, tname = rest.partition(":")
            if sub == "entity":
                accs[tname] = arr
            elif sub == "relation":
                racc.append((tname, arr))
            else:
                raise CheckpointError(f"{path}: unexpected table {name!r}")
        else:
            raise CheckpointError(f"{path}: unexpected table {name!r}")
    if set(accs) != set(ents) or [n for n, _ in racc] != rel_names:
        raise CheckpointError(f"{path}: accumulator tables do not match parameter tables")
    for t, v in ents.items():
        if v.shape[1] != dim or accs[t].shape != v.shape:
            raise CheckpointError(f"{path}: shape mismatch for entity table {t!r}")
    for a in rels + [a for _, a in racc]:
        if a.shape != (1, dim):
            raise CheckpointError(f"{path}: relation table shape {a.shape} != (1, {dim})")
    dtype = next(iter(ents.values())).dtype if ents else np.dtype("<f4")
    rel_arr = np.concatenate(rels).astype(dtype) if rels else np.zeros((0, dim), dtype=dtype)
    racc_arr = np.concatenate([a for _, a in racc]).astype(dtype) if racc else np.zeros((0, dim), dtype=dtype)
    return EmbeddingStore(dim, ents, rel_names, rel_arr, accs, racc_arr)


class BucketView:
    """Exclusive working set for one bucket: rows of its one or two partitions plus
    every relation vector. Use as a context manager; leases are released on exit."""

    def __init__(self, store: EmbeddingStore, partitioning: Partitioning, bucket: Bucket):
        self.store = store
        self.parts = bucket.partitions
        if max(self.parts) >= partitioning.num_partitions:
            raise ValueError("bucket does not belong to this partitioning")
        store._acquire(self.parts)
        self._open = True
        plist = sorted(self.parts)
        self.allowed = {t: np.isin(a, plist) for t, a in partitioning.assignment.items()}
        self.bucket = bucket

    def __enter__(self) -> "BucketView":
        return self

    def __exit__(self, *exc) -> None:
        self.release()

    def release(self) -> None:
        if self._open:
            self.store._release(self.parts)
            self._open = False

    @property
    def dim(self) -> int:
        return self.store.dim

    @property
    def dtype(self):
        return self.store.dtype

    @property
    def relation_names(self) -> list[str]:
        return self.store.relation_names

    def relation_index(self, name: str) -> int:
        return self.store.relation_index(name)

    def addressable_rows(self) -> int:
        return int(sum(m.sum() for m in self.allowed.values()))

    def member_ids(self, entity_type: str) -> np.ndarray:
        return np.flatnonzero(self.allowed[entity_type])

    def check(self, entity_type: str, ids) -> np.ndarray:
        if not self._open:
            raise LeaseError("view has been released")
        ids = np.asarray(ids, dtype=np.int64)
        ok = self.allowed.get(entity_type)
        if ok is None:
            raise LeaseError(f"entity type {entity_type!r} not covered by partitioning")
        if ids.size and (ids.min() < 0 or ids.max() >= len(ok)):
            raise IndexError(f"entity id out of range for {entity_type!r}")
        if ids.size and not ok[ids].all():
            bad = ids[~ok[ids]][:3]
            raise LeaseError(f"{entity_type} rows {bad.tolist()} are outside partitions {sorted(self.parts)}")
        return ids

    def gather(self, entity_type: str, ids) -> np.ndarray:
        return self.store._entities[entity_type][self.check(entity_type, ids)]

    def gather_relations(self, idx) -> np.ndarray:
        if not self._open:
            raise LeaseError("view has been released")
        return self.store._relations[np.asarray(idx)]

    def write(self, entity_type: str, ids, values) -> None:
        self.store._entities[entity_type][self.check(entity_type, ids)] = values

    def _adagrad_entities(self, entity_type, rows, grad, lr, eps) -> None:
        s = self.store
        s._adagrad_rows(s._entities[entity_type], s._entity_acc[entity_type], self.check(entity_type, rows), grad, lr, eps)

    def _adagrad_relations(self, rows, grad, lr, eps) -> None:
        s = self.store
        with s.relation_lock:
            s._adagrad_rows(s._relations, s._relation_acc, rows, grad, lr, eps)


def slice_for_bucket(store: EmbeddingStore, partitioning: Partitioning, bucket: Bucket) -> BucketView:
    return BucketView(store, partitioning, bucket)

