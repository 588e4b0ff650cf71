"""Product quantization of embedding tables (contiguous subspaces, one byte per code)."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .mixture import kmeans, nearest
from .store import read_container, write_container

KSUB = 256


@dataclass
class PQCodebook:
    centroids: list[np.ndarray]  # M tables of shape (ksub, subdim)

    @property
    def M(self) -> int:
        return len(self.centroids)

    @property
    def subdim(self) -> int:
        return self.centroids[0].shape[1]

    @property
    def dim(self) -> int:
        return self.M * self.subdim

    @property
    def ksub(self) -> int:
        return self.centroids[0].shape[0]

    def nbytes(self) -> int:
        return sum(c.size for c in self.centroids) * 4

    def save(self, path) -> None:
        write_container(path, self.subdim, [(f"pq_centroids_{m}", c.astype(np.float32)) for m, c in enumerate(self.centroids)])

    @classmethod
    def load(cls, path) -> "PQCodebook":
        _, tables = read_container(path)
        M = len(tables)
        return cls([tables[f"pq_centroids_{m}"].astype(np.float64) for m in range(M)])


def _split(table: np.ndarray, M: int) -> list[np.ndarray]:
    d = table.shape[1]
    if M < 1 or d % M:
        raise ValueError(f"M={M} does not divide dim {d}")
    s = d // M
    return [table[:, m * s:(m + 1) * s] for m in range(M)]


def train_codebook(table: np.ndarray, M: int, seed: int = 0, max_iters: int = 25, batch_size: int | None = None) -> PQCodebook:
    """Independent k-means per contiguous subspace; the centroid count is clamped to the row count."""
    X = np.asarray(table, dtype=np.float64)
    subs = _split(X, M)
    k = min(KSUB, len(X))
    cents = []
    for m, sub in enumerate(subs):
        model = kmeans(sub, k, seed=seed * 1_000_003 + m, max_iters=max_iters, batch_size=batch_size)
        cents.append(model.centroids)
    return PQCodebook(cents)


def encode(table: np.ndarray, codebook: PQCodebook) -> np.ndarray:
    X = np.asarray(table, dtype=np.float64)
    if X.shape[1] != codebook.dim:
        raise ValueError(f"table dim {X.shape[1]} != codebook dim {codebook.dim}")
    codes = np.empty((len(X), codebook.M), dtype=np.uint8)
    for m, sub in enumerate(_split(X, codebook.M)):
        codes[:, m] = nearest(sub, codebook.centroids[m])[0]
    return codes


def decode(codes: np.ndarray, codebook: PQCodebook) -> np.ndarray:
    codes = np.asarray(codes)
    if codes.ndim != 2 or codes.shape[1] != codebook.M:
        raise ValueError(f"codes must have shape (n, {codebook.M})")
    if codes.size and int(codes.max()) >= codebook.ksub:
        raise ValueError(f"code {int(codes.max())} >= centroid count {codebook.ksub}")
    return np.hstack([codebook.centroids[m][codes[:, m]] for m in range(codebook.M)])


@dataclass
class CompressionReport:
    factor: float
    mse: float
    max_row_error: float
    codebook_bytes: int
    code_bytes: int

    def to_tsv(self) -> str:
        return (
            "factor\tmse\tmax_row_error\tcodebook_bytes\tcode_bytes\n"
            f"{self.factor:g}\t{self.mse:.9g}\t{self.max_row_error:.9g}\t{self.codebook_bytes}\t{self.code_bytes}\n"
        )


def compression_report(table: np.ndarray, codebook: PQCodebook, codes: np.ndarray | None = None) -> CompressionReport:
    """Factor is float32 row bytes over code bytes; the codebook is reported separately.
    ``mse`` is the mean squared Euclidean reconstruction error per row, i.e. the sum
    of the per-subspace quantization errors; ``max_row_error`` is the largest
    row-wise Euclidean error."""
    X = np.asarray(table, dtype=np.float64)
    codes = encode(X, codebook) if codes is None else codes
    err = X - decode(codes, codebook)
    row_sq = (err * err).sum(1)
    return CompressionReport(
        factor=(X.shape[1] * 4) / codebook.M,
        mse=float(row_sq.mean()),
        max_row_error=float(np.sqrt(row_sq.max())) if len(X) else 0.0,
        codebook_bytes=codebook.nbytes(),
        code_bytes=codes.size,
    )


def write_codes(path, codes: np.ndarray) -> None:
    codes = np.ascontiguousarray(codes, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<IQ", codes.shape[1], codes.shape[0]))
        fh.write(codes.tobytes())


def read_codes(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12:
        raise ValueError(f"{path}: truncated header")
    M, rows = struct.unpack("<IQ", data[:12])
    if len(data) - 12 != M * rows:
        raise ValueError(f"{path}: expected {M * rows} code bytes, found {len(data) - 12}")
    return np.frombuffer(data, dtype=np.uint8, offset=12).reshape(rows, M).copy()
