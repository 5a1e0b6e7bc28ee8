"""Labeled embedding sets and their on-disk formats.

Two formats are supported:

* CSV with header ``label,f0,f1,...,f{D-1}``, one sample per line. Values are
  parsed as 64-bit floats and written with ``repr`` so they round-trip.
* Raw binary: a 64-byte little-endian header ``{b"APEX", u32 version=1,
  u64 N, u32 D, u32 C, 40 zero bytes}``, then ``N*D`` float32 features in
  row-major order, then ``N`` uint32 labels.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, LoadError, NumericalError

MAGIC = b"APEX"
VERSION = 1
HEADER = struct.Struct("<4sIQII40x")
NORM_TOL = 1e-6

assert HEADER.size == 64


@dataclass(frozen=True)
class EmbeddingSet:
    """N labeled D-dimensional feature vectors.

    ``features`` is stored as a read-only float64 array. ``normalized`` is
    computed by inspection and is never trusted from the caller.
    """

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    normalized: bool = field(init=False)

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, dtype=np.int64, copy=True)
        if feats.ndim != 2:
            raise ConfigError(f"features must be 2-D, got shape {feats.shape}")
        n, d = feats.shape
        if n < 1:
            raise ConfigError("an embedding set needs at least one row")
        if d < 2:
            raise ConfigError(f"dimension must be >= 2, got {d}")
        if labels.shape != (n,):
            raise ConfigError(f"expected {n} labels, got shape {labels.shape}")
        if self.class_count < 1:
            raise ConfigError("class_count must be >= 1")
        bad = np.flatnonzero(~np.isfinite(feats).all(axis=1))
        if bad.size:
            raise NumericalError(f"non-finite value at row {bad[0]}")
        bad = np.flatnonzero((labels < 0) | (labels >= self.class_count))
        if bad.size:
            raise ConfigError(
                f"label {labels[bad[0]]} at row {bad[0]} outside [0, {self.class_count})"
            )
        feats.flags.writeable = False
        labels.flags.writeable = False
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        norms = np.linalg.norm(feats, axis=1)
        object.__setattr__(self, "normalized", bool(np.all(np.abs(norms - 1.0) <= NORM_TOL)))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.class_count)

    def class_features(self, c: int) -> np.ndarray:
        return self.features[self.labels == c]

    def subset(self, index) -> "EmbeddingSet":
        return EmbeddingSet(self.features[index], self.labels[index], self.class_count)

    def with_features(self, features: np.ndarray) -> "EmbeddingSet":
        return EmbeddingSet(features, self.labels, self.class_count)


def normalize_rows(data: EmbeddingSet) -> EmbeddingSet:
    """Project every row onto the unit sphere.

    Rows that already have unit norm (within 1e-6) are left untouched so the
    operation is idempotent bit-for-bit.
    """
    feats = data.features
    norms = np.linalg.norm(feats, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise NumericalError(f"zero-norm row at index {zero[0]}")
    out = feats / norms[:, None]
    keep = np.abs(norms - 1.0) <= NORM_TOL
    out[keep] = feats[keep]
    return data.with_features(out)


# --------------------------------------------------------------------------
# CSV


def save_csv(data: EmbeddingSet, path) -> None:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{j}" for j in range(data.dim)])
        for label, row in zip(data.labels, data.features):
            writer.writerow([int(label)] + [repr(float(x)) for x in row])


def load_csv(path, class_count: int | None = None) -> EmbeddingSet:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"embedding file not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "label":
            raise LoadError("malformed header: first column must be 'label'")
        d = len(header) - 1
        expected = [f"f{j}" for j in range(d)]
        if [h.strip() for h in header[1:]] != expected:
            raise LoadError("malformed header: expected label,f0,f1,...")
        labels, rows = [], []
        for k, rec in enumerate(reader):
            if not rec:
                continue
            if len(rec) != d + 1:
                raise LoadError(f"dimension mismatch at row {k}: {len(rec) - 1} != {d}")
            try:
                label = int(rec[0])
                values = [float(x) for x in rec[1:]]
            except ValueError as exc:
                raise LoadError(f"unparseable value at row {k}: {exc}") from None
            if not all(math.isfinite(v) for v in values):
                raise LoadError(f"non-finite value at row {k}")
            if label < 0 or (class_count is not None and label >= class_count):
                raise LoadError(f"label {label} out of range at row {k}")
            labels.append(label)
            rows.append(values)
    if not rows:
        raise LoadError("no data rows")
    c = class_count if class_count is not None else max(labels) + 1
    try:
        return EmbeddingSet(np.asarray(rows, dtype=np.float64), np.asarray(labels), c)
    except (ConfigError, NumericalError) as exc:
        raise LoadError(str(exc)) from None


# --------------------------------------------------------------------------
# raw binary


def save_binary(data: EmbeddingSet, path) -> None:
    header = HEADER.pack(MAGIC, VERSION, data.n, data.dim, data.class_count)
    feats = np.ascontiguousarray(data.features, dtype="<f4")
    labels = np.ascontiguousarray(data.labels, dtype="<u4")
    with Path(path).open("wb") as fh:
        fh.write(header)
        fh.write(feats.tobytes())
        fh.write(labels.tobytes())


def load_binary(path) -> EmbeddingSet:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"embedding file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < HEADER.size:
        raise LoadError("malformed header: file shorter than 64 bytes")
    magic, version, n, d, c = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise LoadError(f"malformed header: bad magic {magic!r}")
    if version != VERSION:
        raise LoadError(f"malformed header: unsupported version {version}")
    if raw[24:64] != bytes(40):
        raise LoadError("malformed header: reserved bytes must be zero")
    expected = HEADER.size + 4 * n * d + 4 * n
    if len(raw) != expected:
        raise LoadError(f"dimension mismatch: expected {expected} bytes, found {len(raw)}")
    feats = np.frombuffer(raw, dtype="<f4", count=n * d, offset=HEADER.size)
    feats = feats.reshape(n, d).astype(np.float64)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=HEADER.size + 4 * n * d)
    bad = np.flatnonzero(~np.isfinite(feats).all(axis=1))
    if bad.size:
        raise LoadError(f"non-finite value at row {bad[0]}")
    bad = np.flatnonzero(labels >= c)
    if bad.size:
        raise LoadError(f"label {labels[bad[0]]} >= declared class count {c} at row {bad[0]}")
    try:
        return EmbeddingSet(feats, labels.astype(np.int64), c)
    except (ConfigError, NumericalError) as exc:
        raise LoadError(str(exc)) from None


def load_embeddings(path, format: str | None = None) -> EmbeddingSet:
    """Load an embedding file; ``format`` is inferred from the suffix if omitted."""
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "raw-binary")
    if fmt == "csv":
        return load_csv(path)
    if fmt in ("raw-binary", "binary", "bin"):
        return load_binary(path)
    raise ConfigError(f"unknown embedding format {fmt!r}")


def save_embeddings(data: EmbeddingSet, path, format: str | None = None) -> None:
    path = Path(path)
    fmt = format or ("csv" if path.suffix.lower() == ".csv" else "raw-binary")
    if fmt == "csv":
        save_csv(data, path)
    elif fmt in ("raw-binary", "binary", "bin"):
        save_binary(data, path)
    else:
        raise ConfigError(f"unknown embedding format {fmt!r}")
