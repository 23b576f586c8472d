"""Frozen-encoder embeddings: adapter contract, synthetic generator, cache I/O.

Embeddings are computed once and cached; training and evaluation only ever
see cached vectors.  The cache file layout is::

    magic "XDTE" | version u16 | dataset_name | encoder_id
    | count u64 | dim u32 | labels (count x u8) | ids
    | vectors (count*dim float64, row-major) | crc32 of the vector bytes

All multi-byte integers are little-endian; strings are u32-length-prefixed
UTF-8.  Files are written atomically (temp file + rename).
"""

from __future__ import annotations

import hashlib
import os
import struct
import zlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DatasetManifest
from .errors import AdapterError, CacheError, DataError

CACHE_MAGIC = b"XDTE"
CACHE_VERSION = 1

DEFAULT_ENCODER_DIM = 512


@dataclass(frozen=True, eq=False)
class EmbeddingSet:
    """Aligned ids, binary labels, and fixed-width embedding vectors."""

    dataset_name: str
    encoder_id: str
    ids: tuple[str, ...]
    labels: np.ndarray
    vectors: np.ndarray

    def __post_init__(self) -> None:
        labels = np.asarray(self.labels, dtype=np.uint8)
        vectors = np.asarray(self.vectors, dtype=np.float64)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "vectors", vectors)
        n = len(self.ids)
        if labels.shape != (n,) or vectors.ndim != 2 or vectors.shape[0] != n:
            raise DataError(
                f"embedding set {self.dataset_name!r}: ids/labels/vectors misaligned "
                f"({n} ids, labels {labels.shape}, vectors {vectors.shape})"
            )
        if n == 0:
            raise DataError(f"embedding set {self.dataset_name!r} is empty")
        if len(set(self.ids)) != n:
            raise DataError(f"embedding set {self.dataset_name!r}: duplicate ids")
        if not np.all((labels == 0) | (labels == 1)):
            raise DataError(f"embedding set {self.dataset_name!r}: labels must be 0 or 1")
        if not np.all(np.isfinite(vectors)):
            bad = int(np.argwhere(~np.isfinite(vectors).all(axis=1))[0, 0])
            raise DataError(
                f"embedding set {self.dataset_name!r}: non-finite vector for id {self.ids[bad]!r}"
            )

    @property
    def dim(self) -> int:
        return int(self.vectors.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def class_counts(self) -> tuple[int, int]:
        """(negative, positive) sample counts."""
        n_pos = int(self.labels.sum())
        return len(self) - n_pos, n_pos

    def subset(self, ids: Sequence[str], dataset_name: str | None = None) -> "EmbeddingSet":
        """Rows restricted to ``ids``, in the order given."""
        index = {i: k for k, i in enumerate(self.ids)}
        missing = [i for i in ids if i not in index]
        if missing:
            raise DataError(f"ids not in embedding set {self.dataset_name!r}: {missing[:3]}")
        rows = [index[i] for i in ids]
        return EmbeddingSet(
            dataset_name=dataset_name or self.dataset_name,
            encoder_id=self.encoder_id,
            ids=tuple(ids),
            labels=self.labels[rows].copy(),
            vectors=self.vectors[rows].copy(),
        )


class EncoderAdapter(ABC):
    """Batch interface to a frozen vision encoder.

    Implementations must be deterministic (same source, same vector) and
    stateless between calls; preprocessing choices belong to the adapter and
    should be reflected in ``encoder_id``.
    """

    encoder_id: str
    encoder_dim: int

    @abstractmethod
    def embed_batch(self, sources: Sequence[str]) -> np.ndarray:
        """Map source references to an (n, encoder_dim) float array."""


class HashEncoderAdapter(EncoderAdapter):
    """Deterministic stand-in encoder that derives vectors from file bytes.

    Each source file's SHA-256 digest seeds a unit-variance Gaussian draw, so
    identical files always map to identical vectors.  Useful for exercising
    the extraction pipeline without any pretrained weights.
    """

    def __init__(self, encoder_dim: int = DEFAULT_ENCODER_DIM) -> None:
        if encoder_dim < 1:
            raise AdapterError(f"encoder_dim must be positive, got {encoder_dim}")
        self.encoder_dim = encoder_dim
        self.encoder_id = f"hash-sha256-{encoder_dim}"

    def embed_batch(self, sources: Sequence[str]) -> np.ndarray:
        out = np.empty((len(sources), self.encoder_dim), dtype=np.float64)
        for row, source in enumerate(sources):
            try:
                payload = Path(source).read_bytes()
            except OSError as exc:
                raise AdapterError(f"cannot read source {source!r}: {exc}") from exc
            digest = hashlib.sha256(payload).digest()
            seed = int.from_bytes(digest[:8], "little")
            rng = np.random.default_rng(seed)
            out[row] = rng.standard_normal(self.encoder_dim)
        return out


class PrecomputedAdapter(EncoderAdapter):
    """Adapter that serves vectors computed elsewhere, keyed by source ref.

    ``table`` maps source references to 1-D vectors; this is how embeddings
    from a real pretrained encoder enter the pipeline without bundling the
    encoder itself.
    """

    def __init__(self, encoder_id: str, table: dict[str, np.ndarray]) -> None:
        if not table:
            raise AdapterError("precomputed table is empty")
        dims = {np.asarray(v).shape for v in table.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise AdapterError(f"precomputed vectors must share one 1-D shape, got {sorted(dims)}")
        self.encoder_id = encoder_id
        self.encoder_dim = int(next(iter(dims))[0])
        self._table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}

    def embed_batch(self, sources: Sequence[str]) -> np.ndarray:
        rows = []
        for source in sources:
            if source not in self._table:
                raise AdapterError(f"no precomputed vector for source {source!r}")
            rows.append(self._table[source])
        return np.stack(rows)


def extract_embeddings(
    manifest: DatasetManifest,
    adapter: EncoderAdapter,
    batch_size: int = 64,
) -> EmbeddingSet:
    """Run the adapter over every record, in manifest order.

    The result is independent of ``batch_size``; adapter failures and
    non-finite vectors are reported with the offending record id.
    """
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    records = manifest.records
    missing = [r.id for r in records if not Path(r.source).is_file()]
    if missing:
        raise DataError(
            f"manifest {manifest.name!r}: {len(missing)} unreadable source(s), "
            f"first offender id {missing[0]!r}"
        )
    blocks: list[np.ndarray] = []
    for start in range(0, len(records), batch_size):
        batch = records[start : start + batch_size]
        try:
            arr = np.asarray(adapter.embed_batch([r.source for r in batch]), dtype=np.float64)
        except AdapterError:
            raise
        except Exception as exc:
            raise AdapterError(
                f"adapter {adapter.encoder_id!r} failed on batch starting at "
                f"record {batch[0].id!r}: {exc}"
            ) from exc
        if arr.shape != (len(batch), adapter.encoder_dim):
            raise AdapterError(
                f"adapter {adapter.encoder_id!r} returned shape {arr.shape}, "
                f"expected {(len(batch), adapter.encoder_dim)}"
            )
        finite = np.isfinite(arr).all(axis=1)
        if not finite.all():
            bad = batch[int(np.argmin(finite))].id
            raise AdapterError(f"adapter {adapter.encoder_id!r} produced a non-finite vector for record {bad!r}")
        blocks.append(arr)
    return EmbeddingSet(
        dataset_name=manifest.name,
        encoder_id=adapter.encoder_id,
        ids=manifest.ids(),
        labels=manifest.labels(),
        vectors=np.vstack(blocks),
    )


@dataclass(frozen=True, eq=False)
class SyntheticSpec:
    """Two isotropic Gaussian clusters standing in for encoder output.

    ``healthy_center`` generates label-0 samples, ``disease_center`` label-1
    samples, each with ``n_per_class`` draws of standard deviation ``spread``.
    """

    dim: int
    healthy_center: np.ndarray
    disease_center: np.ndarray
    spread: float
    n_per_class: int
    seed: int
    name: str = "synthetic"

    def __post_init__(self) -> None:
        healthy = np.asarray(self.healthy_center, dtype=np.float64)
        disease = np.asarray(self.disease_center, dtype=np.float64)
        object.__setattr__(self, "healthy_center", healthy)
        object.__setattr__(self, "disease_center", disease)
        if self.dim < 1:
            raise DataError(f"synthetic dim must be positive, got {self.dim}")
        if healthy.shape != (self.dim,) or disease.shape != (self.dim,):
            raise DataError(
                f"synthetic centers must have shape ({self.dim},), got "
                f"{healthy.shape} and {disease.shape}"
            )
        if np.array_equal(healthy, disease):
            raise DataError("synthetic centers must be distinct")
        if not self.spread > 0.0:
            raise DataError(f"synthetic spread must be > 0, got {self.spread}")
        if self.n_per_class < 1:
            raise DataError(f"n_per_class must be >= 1, got {self.n_per_class}")


def synth_embeddings(spec: SyntheticSpec) -> EmbeddingSet:
    """Draw the two Gaussian clusters; labels follow the generating center."""
    rng = np.random.default_rng(spec.seed)
    healthy = spec.healthy_center + spec.spread * rng.standard_normal((spec.n_per_class, spec.dim))
    disease = spec.disease_center + spec.spread * rng.standard_normal((spec.n_per_class, spec.dim))
    ids = tuple(
        [f"{spec.name}-neg-{i:05d}" for i in range(spec.n_per_class)]
        + [f"{spec.name}-pos-{i:05d}" for i in range(spec.n_per_class)]
    )
    labels = np.concatenate(
        [np.zeros(spec.n_per_class, dtype=np.uint8), np.ones(spec.n_per_class, dtype=np.uint8)]
    )
    return EmbeddingSet(
        dataset_name=spec.name,
        encoder_id=f"synthetic-dim{spec.dim}",
        ids=ids,
        labels=labels,
        vectors=np.vstack([healthy, disease]),
    )


def disease_direction(dim: int, axis: int, shared_fraction: float, shared_axis: int = 0) -> np.ndarray:
    """Unit offset direction for a disease cluster.

    The direction mixes a component common to all diseases (``shared_axis``,
    weight ``shared_fraction``) with a disease-specific coordinate axis.  A
    shared component models the common appearance of diseases on one organ,
    which is what makes cross-dataset transfer possible at all; with
    ``shared_fraction=0`` the directions are orthogonal and transfer carries
    no signal.
    """
    if not 0.0 <= shared_fraction <= 1.0:
        raise DataError(f"shared_fraction must be in [0, 1], got {shared_fraction}")
    if not (0 <= axis < dim and 0 <= shared_axis < dim):
        raise DataError(f"axes ({axis}, {shared_axis}) out of range for dim {dim}")
    if axis == shared_axis and shared_fraction < 1.0:
        raise DataError("disease axis must differ from the shared axis")
    u = np.zeros(dim, dtype=np.float64)
    u[shared_axis] = shared_fraction
    u[axis] = np.sqrt(1.0 - shared_fraction**2)
    return u


def transfer_pair_specs(
    dim: int = 32,
    separation: float = 2.0,
    spread: float = 0.1,
    n_per_class: int = 200,
    seed: int = 0,
    axes: tuple[int, int] = (1, 2),
    shared_fraction: float = 0.866,
    names: tuple[str, str] = ("synthA", "synthB"),
) -> tuple[SyntheticSpec, SyntheticSpec]:
    """Two synthetic datasets sharing the healthy cluster at the origin.

    Each disease cluster sits ``separation`` away along its own direction
    (see :func:`disease_direction`); the two datasets use different draws
    (seeds ``seed`` and ``seed + 1``).
    """
    healthy = np.zeros(dim, dtype=np.float64)
    specs = []
    for k, (axis, name) in enumerate(zip(axes, names)):
        u = disease_direction(dim, axis, shared_fraction)
        specs.append(
            SyntheticSpec(
                dim=dim,
                healthy_center=healthy,
                disease_center=separation * u,
                spread=spread,
                n_per_class=n_per_class,
                seed=seed + k,
                name=name,
            )
        )
    return specs[0], specs[1]


def _pack_str(value: str) -> bytes:
    raw = value.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


class _Reader:
    """Sequential reader over cache bytes that fails loudly on truncation."""

    def __init__(self, blob: bytes, path: Path) -> None:
        self._blob = blob
        self._pos = 0
        self._path = path

    def take(self, n: int) -> bytes:
        if self._pos + n > len(self._blob):
            raise CacheError(f"{self._path}: truncated file (wanted {n} bytes at offset {self._pos})")
        chunk = self._blob[self._pos : self._pos + n]
        self._pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def at_end(self) -> bool:
        return self._pos == len(self._blob)


def save_cache(embedding_set: EmbeddingSet, path: str | Path) -> None:
    """Serialise an embedding set to the versioned cache format."""
    p = Path(path)
    payload = np.ascontiguousarray(embedding_set.vectors, dtype="<f8").tobytes()
    parts = [
        CACHE_MAGIC,
        struct.pack("<H", CACHE_VERSION),
        _pack_str(embedding_set.dataset_name),
        _pack_str(embedding_set.encoder_id),
        struct.pack("<Q", len(embedding_set)),
        struct.pack("<I", embedding_set.dim),
        np.asarray(embedding_set.labels, dtype=np.uint8).tobytes(),
    ]
    parts.extend(_pack_str(i) for i in embedding_set.ids)
    parts.append(payload)
    parts.append(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    tmp = p.with_name(p.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, p)


def load_cache(path: str | Path) -> EmbeddingSet:
    """Read a cache file back, verifying version and payload checksum."""
    p = Path(path)
    if not p.is_file():
        raise CacheError(f"cache file not found: {p}")
    reader = _Reader(p.read_bytes(), p)
    if reader.take(4) != CACHE_MAGIC:
        raise CacheError(f"{p}: not an embedding cache (bad magic)")
    version = reader.u16()
    if version != CACHE_VERSION:
        raise CacheError(f"{p}: unsupported cache version {version} (expected {CACHE_VERSION})")
    dataset_name = reader.string()
    encoder_id = reader.string()
    count = reader.u64()
    dim = reader.u32()
    labels = np.frombuffer(reader.take(count), dtype=np.uint8).copy()
    ids = tuple(reader.string() for _ in range(count))
    payload = reader.take(count * dim * 8)
    stored_crc = reader.u32()
    if not reader.at_end():
        raise CacheError(f"{p}: trailing bytes after checksum")
    if zlib.crc32(payload) & 0xFFFFFFFF != stored_crc:
        raise CacheError(f"{p}: checksum mismatch, file is corrupt")
    vectors = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(count, dim)
    return EmbeddingSet(
        dataset_name=dataset_name,
        encoder_id=encoder_id,
        ids=ids,
        labels=labels,
        vectors=vectors,
    )


def cache_checksum(path: str | Path) -> str:
    """Hex CRC-32 of the vector payload, as stored in the file trailer."""
    blob = Path(path).read_bytes()
    if len(blob) < 4:
        raise CacheError(f"{path}: truncated file")
    return f"{struct.unpack('<I', blob[-4:])[0]:08x}"
