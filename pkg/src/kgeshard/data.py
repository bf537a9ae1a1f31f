"""Knowledge-graph storage, binary file formats, synthetic generation,
entity partitioning and triple bucketing.

File formats (little-endian throughout):

* Triples ("KGT"): magic ``KGT1``, u64 entity_count, u64 relation_count,
  u64 triple_count, then triple_count records of (u32 head, u32 relation,
  u32 tail).
* Features ("KGF"): magic ``KGF1``, u64 row_count, u32 dim, u8 precision
  flag (0 = f32, 1 = f16), row-major values.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import ConfigError, IngestError
from .seeding import PURPOSE_PARTITION, PURPOSE_SYNTHETIC, derive_rng

log = logging.getLogger(__name__)

TRIPLES_MAGIC = b"KGT1"
FEATURES_MAGIC = b"KGF1"
TRIPLES_HEADER = struct.Struct("<4sQQQ")
FEATURES_HEADER = struct.Struct("<4sQIB")
TRIPLE_RECORD_BYTES = 12

# Sentinel for padded shard rows; never a valid entity id.
PADDING_ID = np.uint32(0xFFFFFFFF)


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


@dataclass
class KnowledgeGraph:
    """Dense-id knowledge graph with optional per-entity feature vectors."""

    entity_count: int
    relation_count: int
    triples: np.ndarray  # [T, 3] uint32 columns (head, relation, tail)
    features: np.ndarray | None = None  # [entity_count, F]
    relation_counts: np.ndarray = field(init=False)  # [relation_count] int64

    def __post_init__(self) -> None:
        self.triples = np.ascontiguousarray(self.triples, dtype=np.uint32)
        if self.triples.ndim != 2 or self.triples.shape[1] != 3:
            raise ValueError(f"triples must be [T, 3], got {self.triples.shape}")
        self.relation_counts = np.bincount(
            self.triples[:, 1], minlength=self.relation_count
        ).astype(np.int64)
        if self.features is not None and self.features.shape[0] != self.entity_count:
            raise ValueError(
                f"features rows ({self.features.shape[0]}) != entity_count "
                f"({self.entity_count})"
            )

    @property
    def triple_count(self) -> int:
        return int(self.triples.shape[0])

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else int(self.features.shape[1])

    def training_tails(self) -> np.ndarray:
        """Sorted unique entity ids appearing as tails."""
        return np.unique(self.triples[:, 2])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        same = (
            self.entity_count == other.entity_count
            and self.relation_count == other.relation_count
            and np.array_equal(self.triples, other.triples)
        )
        if not same:
            return False
        if (self.features is None) != (other.features is None):
            return False
        if self.features is not None:
            return (
                self.features.dtype == other.features.dtype
                and np.array_equal(self.features, other.features)
            )
        return True


def ingest_triples(
    path: str,
    entity_count: int | None = None,
    relation_count: int | None = None,
) -> KnowledgeGraph:
    """Read a KGT file in one pass, validating ids against the header.

    ``entity_count`` / ``relation_count``, when given, must match the file
    header (useful as an external consistency check on a downloaded file).
    Errors name the byte offset of the offending field.
    """
    with open(path, "rb") as fh:
        header = fh.read(TRIPLES_HEADER.size)
        if len(header) < TRIPLES_HEADER.size:
            raise IngestError(
                f"{path}: truncated header at byte offset {len(header)}"
            )
        magic, n_ent, n_rel, n_tri = TRIPLES_HEADER.unpack(header)
        if magic != TRIPLES_MAGIC:
            raise IngestError(f"{path}: bad magic {magic!r} at byte offset 0")
        if entity_count is not None and entity_count != n_ent:
            raise IngestError(
                f"{path}: header entity_count {n_ent} != expected {entity_count}"
            )
        if relation_count is not None and relation_count != n_rel:
            raise IngestError(
                f"{path}: header relation_count {n_rel} != expected {relation_count}"
            )
        raw = np.fromfile(fh, dtype="<u4", count=n_tri * 3)
    if raw.size < n_tri * 3:
        offset = TRIPLES_HEADER.size + raw.size * 4
        raise IngestError(
            f"{path}: truncated record section at byte offset {offset} "
            f"(expected {n_tri} records)"
        )
    triples = raw.reshape(n_tri, 3)
    _check_bounds(path, triples, n_ent, n_rel)
    return KnowledgeGraph(int(n_ent), int(n_rel), triples)


def _check_bounds(path: str, triples: np.ndarray, n_ent: int, n_rel: int) -> None:
    limits = (n_ent, n_rel, n_ent)
    names = ("head", "relation", "tail")
    for col in range(3):
        bad = np.nonzero(triples[:, col] >= limits[col])[0]
        if bad.size:
            idx = int(bad[0])
            offset = TRIPLES_HEADER.size + idx * TRIPLE_RECORD_BYTES + col * 4
            raise IngestError(
                f"{path}: {names[col]} id {int(triples[idx, col])} out of range "
                f"(record {idx}, byte offset {offset})"
            )


def read_triples_header(path: str) -> tuple[int, int, int]:
    """Return (entity_count, relation_count, triple_count) without reading records."""
    with open(path, "rb") as fh:
        header = fh.read(TRIPLES_HEADER.size)
    if len(header) < TRIPLES_HEADER.size:
        raise IngestError(f"{path}: truncated header at byte offset {len(header)}")
    magic, n_ent, n_rel, n_tri = TRIPLES_HEADER.unpack(header)
    if magic != TRIPLES_MAGIC:
        raise IngestError(f"{path}: bad magic {magic!r} at byte offset 0")
    return int(n_ent), int(n_rel), int(n_tri)


def write_triples(graph: KnowledgeGraph, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(
            TRIPLES_HEADER.pack(
                TRIPLES_MAGIC,
                graph.entity_count,
                graph.relation_count,
                graph.triple_count,
            )
        )
        fh.write(np.ascontiguousarray(graph.triples, dtype="<u4").tobytes())


def write_features(features: np.ndarray, path: str, half: bool = False) -> None:
    dtype = "<f2" if half else "<f4"
    rows, dim = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURES_HEADER.pack(FEATURES_MAGIC, rows, dim, 1 if half else 0))
        fh.write(np.ascontiguousarray(features, dtype=dtype).tobytes())


def read_features(path: str) -> np.ndarray:
    """Load a KGF file; returns f32 or f16 per the file's precision flag."""
    with open(path, "rb") as fh:
        header = fh.read(FEATURES_HEADER.size)
        if len(header) < FEATURES_HEADER.size:
            raise IngestError(f"{path}: truncated header at byte offset {len(header)}")
        magic, rows, dim, flag = FEATURES_HEADER.unpack(header)
        if magic != FEATURES_MAGIC:
            raise IngestError(f"{path}: bad magic {magic!r} at byte offset 0")
        if flag not in (0, 1):
            raise IngestError(f"{path}: unknown precision flag {flag} at byte offset 16")
        dtype = "<f2" if flag == 1 else "<f4"
        raw = np.fromfile(fh, dtype=dtype, count=rows * dim)
    if raw.size < rows * dim:
        offset = FEATURES_HEADER.size + raw.size * raw.dtype.itemsize
        raise IngestError(f"{path}: truncated value section at byte offset {offset}")
    return raw.reshape(rows, dim)


def generate_synthetic(
    entity_count: int,
    relation_count: int,
    triple_count: int,
    skew: float,
    seed: int,
    feature_dim: int = 16,
    structure_noise: float = 0.1,
) -> KnowledgeGraph:
    """Generate a deterministic synthetic graph.

    Relation frequencies follow a power law with exponent ``skew`` (0 gives a
    uniform distribution). Tails are planted: each relation acts as a random
    affine permutation of the entity ids, corrupted uniformly with probability
    ``structure_noise``, so held-out triples remain predictable and learning
    smoke tests are non-degenerate. Features are standard normal.
    """
    if entity_count < 2:
        raise ConfigError(f"entity_count must be >= 2, got {entity_count}")
    if triple_count < 1:
        raise ConfigError(f"triple_count must be >= 1, got {triple_count}")
    if relation_count < 1:
        raise ConfigError(f"relation_count must be >= 1, got {relation_count}")

    rng = derive_rng(seed, PURPOSE_SYNTHETIC)
    weights = np.arange(1, relation_count + 1, dtype=np.float64) ** (-float(skew))
    probs = weights / weights.sum()
    relations = rng.choice(relation_count, size=triple_count, p=probs)
    heads = rng.integers(0, entity_count, size=triple_count)

    # Per-relation affine permutation t = (a*h + b) mod |E| with gcd(a, |E|) = 1.
    mult = np.empty(relation_count, dtype=np.int64)
    for r in range(relation_count):
        a = int(rng.integers(1, entity_count))
        while math.gcd(a, entity_count) != 1:
            a = int(rng.integers(1, entity_count))
        mult[r] = a
    offset = rng.integers(0, entity_count, size=relation_count)

    planted = (mult[relations] * heads + offset[relations]) % entity_count
    noise = rng.random(triple_count) < structure_noise
    tails = np.where(noise, rng.integers(0, entity_count, size=triple_count), planted)

    triples = np.stack([heads, relations, tails], axis=1).astype(np.uint32)
    features = None
    if feature_dim > 0:
        features = rng.standard_normal((entity_count, feature_dim)).astype(np.float32)
    return KnowledgeGraph(entity_count, relation_count, triples, features)


@dataclass
class EntityPartition:
    """Random equal-size row partition of the entity set.

    Entities are permuted once and split into ``shard_count`` contiguous
    shards of exactly ``shard_size`` rows; only the final shard carries
    padding rows (PADDING_ID), which are never sampled, never updated and
    never predicted. Using the same seed for different shard counts yields
    nested partitions, which is what allows replaying one plan at several
    worker counts.
    """

    shard_count: int
    shard_size: int
    shard_entities: np.ndarray  # [D, S] uint32, PADDING_ID in padded slots
    entity_shard: np.ndarray  # [E] int32
    entity_row: np.ndarray  # [E] int64

    @property
    def entity_count(self) -> int:
        return int(self.entity_shard.shape[0])

    def real_count(self, shard: int) -> int:
        """Number of non-padding rows in a shard."""
        if shard < self.shard_count - 1:
            return self.shard_size
        return self.entity_count - (self.shard_count - 1) * self.shard_size

    @property
    def padding_counts(self) -> np.ndarray:
        counts = np.zeros(self.shard_count, dtype=np.int64)
        counts[-1] = self.shard_size - self.real_count(self.shard_count - 1)
        return counts

    def nests_into(self, coarse_shards: int) -> bool:
        """True when this partition's shards merge exactly into ``coarse_shards``."""
        if self.shard_count % coarse_shards != 0:
            return False
        group = self.shard_count // coarse_shards
        coarse_size = -(-self.entity_count // coarse_shards)
        return self.shard_size * group == coarse_size


def partition_entities(
    graph_or_count: KnowledgeGraph | int, shard_count: int, seed: int
) -> EntityPartition:
    """Uniform random permutation split into equal shards (last one padded)."""
    entity_count = (
        graph_or_count
        if isinstance(graph_or_count, int)
        else graph_or_count.entity_count
    )
    if shard_count < 1:
        raise ConfigError(f"shard_count must be >= 1, got {shard_count}")
    if shard_count > entity_count:
        raise ConfigError(
            f"shard_count {shard_count} exceeds entity_count {entity_count}"
        )
    rng = derive_rng(seed, PURPOSE_PARTITION)
    perm = rng.permutation(entity_count).astype(np.uint32)
    shard_size = -(-entity_count // shard_count)  # ceil division

    shard_entities = np.full((shard_count, shard_size), PADDING_ID, dtype=np.uint32)
    flat = shard_entities.reshape(-1)
    flat[:entity_count] = perm

    entity_shard = np.empty(entity_count, dtype=np.int32)
    entity_row = np.empty(entity_count, dtype=np.int64)
    positions = np.arange(entity_count, dtype=np.int64)
    entity_shard[perm] = (positions // shard_size).astype(np.int32)
    entity_row[perm] = positions % shard_size
    return EntityPartition(shard_count, shard_size, shard_entities, entity_shard, entity_row)


@dataclass
class TripleBuckets:
    """Triples grouped by (head shard, tail shard), preserving file order."""

    shard_count: int
    indices: list[list[np.ndarray]]  # [D][D] int64 triple indices
    relation_counts: list[list[np.ndarray]]  # [D][D] int64, length relation_count

    def bucket_sizes(self) -> np.ndarray:
        sizes = np.zeros((self.shard_count, self.shard_count), dtype=np.int64)
        for i in range(self.shard_count):
            for j in range(self.shard_count):
                sizes[i, j] = self.indices[i][j].size
        return sizes


def bucket_triples(graph: KnowledgeGraph, partition: EntityPartition) -> TripleBuckets:
    if partition.entity_count != graph.entity_count:
        raise ConfigError(
            f"partition covers {partition.entity_count} entities, graph has "
            f"{graph.entity_count}"
        )
    d = partition.shard_count
    head_shard = partition.entity_shard[graph.triples[:, 0]]
    tail_shard = partition.entity_shard[graph.triples[:, 2]]
    key = head_shard.astype(np.int64) * d + tail_shard
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    bounds = np.searchsorted(sorted_key, np.arange(d * d + 1))

    indices: list[list[np.ndarray]] = []
    rel_counts: list[list[np.ndarray]] = []
    rels = graph.triples[:, 1]
    for i in range(d):
        row_idx, row_counts = [], []
        for j in range(d):
            k = i * d + j
            bucket = order[bounds[k] : bounds[k + 1]]
            row_idx.append(np.ascontiguousarray(bucket, dtype=np.int64))
            row_counts.append(
                np.bincount(rels[bucket], minlength=graph.relation_count).astype(np.int64)
            )
        indices.append(row_idx)
        rel_counts.append(row_counts)
    return TripleBuckets(d, indices, rel_counts)


def parse_query_array(rows: Sequence[Sequence[int]]) -> np.ndarray:
    """Normalise (h, r) or (h, r, t) rows to an int64 array."""
    arr = np.asarray(rows, dtype=np.int64)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ConfigError(f"query rows must have 2 or 3 columns, got shape {arr.shape}")
    return arr
