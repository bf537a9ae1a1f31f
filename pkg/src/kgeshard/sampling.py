"""Coordinator-side micro-batch planning.

A plan for one training step holds, per plan group g (one group per worker at
the plan's native worker count):

* ``B`` positive triple indices, drawn per tail shard so that exactly B/D of
  them have their tail in each shard, and
* ``N`` shared negative tail ids, N/D uniform draws from each shard's real
  entities.

Triples are drawn with replacement: first a relation with probability
proportional to the cube root of its frequency in the bucket, then a uniform
triple among that bucket's triples with the chosen relation. Plans are pure
index structures; no embedding data moves here.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .data import KnowledgeGraph, EntityPartition, TripleBuckets
from .errors import ConfigError, PlanError
from .seeding import PURPOSE_SAMPLER, derive_rng
from .stats import cube_root_rescale

log = logging.getLogger(__name__)


@dataclass
class SamplerConfig:
    micro_batch_size: int  # positives per worker per step
    negative_count: int  # shared negatives per worker per step
    shard_count: int
    seed: int
    cube_root_relation_sampling: bool = True
    cube_root_global_counts: bool = False  # rescale with whole-graph counts
    filter_false_negatives: bool = False

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        b, n, d = self.micro_batch_size, self.negative_count, self.shard_count
        if d < 1:
            raise ConfigError(f"sampler.shard_count must be >= 1, got {d}")
        if d > b or d > n:
            raise ConfigError(
                f"worker count {d} must not exceed micro_batch_size {b} or "
                f"negative_count {n}"
            )
        if b % d:
            raise ConfigError(f"micro_batch_size {b} must be divisible by {d}")
        if n % d:
            raise ConfigError(f"negative_count {n} must be divisible by {d}")
        if self.seed < 0:
            raise ConfigError("sampler.seed must be >= 0")


@dataclass
class MicroBatchPlan:
    """Index-only plan for one step; group g is processed with heads local."""

    group_count: int
    positives_per_group: int
    negatives_per_group: int
    triple_indices: np.ndarray  # [G, B] int64 into the graph's triple list
    negatives: np.ndarray  # [G, N] uint32 entity ids
    used_fallback: bool = False

    def tail_block(self, group: int, shard: int) -> slice:
        """Slice of group ``group``'s positives whose tails live in ``shard``."""
        per = self.positives_per_group // self.group_count
        return slice(shard * per, (shard + 1) * per)

    def negative_block(self, group: int, shard: int) -> slice:
        per = self.negatives_per_group // self.group_count
        return slice(shard * per, (shard + 1) * per)


class _BucketDraws:
    """Per-bucket tables for vectorised relation-then-triple draws."""

    def __init__(self, triple_idx: np.ndarray, relations: np.ndarray,
                 rel_probs: np.ndarray | None):
        order = np.argsort(relations, kind="stable")
        self.sorted_triples = triple_idx[order]
        sorted_rels = relations[order]
        present, starts, counts = np.unique(
            sorted_rels, return_index=True, return_counts=True
        )
        self.present = present
        self.starts = starts
        self.counts = counts
        if rel_probs is None:
            self.probs = None  # uniform over triples
        else:
            weights = rel_probs[present]
            total = weights.sum()
            if total <= 0:
                # All present relations have zero weight (possible with global
                # counts); fall back to bucket-local rescaling.
                weights = cube_root_rescale(counts)
                total = 1.0
            self.probs = weights / total

    def draw(self, rng: np.random.Generator, size: int) -> np.ndarray:
        if self.probs is None:
            return self.sorted_triples[rng.integers(0, self.sorted_triples.size, size)]
        rel_pos = rng.choice(self.present.size, size=size, p=self.probs)
        within = (rng.random(size) * self.counts[rel_pos]).astype(np.int64)
        return self.sorted_triples[self.starts[rel_pos] + within]


class MicroBatchSampler:
    """Prepared sampler bound to a graph, partition and bucket structure."""

    def __init__(
        self,
        graph: KnowledgeGraph,
        partition: EntityPartition,
        buckets: TripleBuckets,
        config: SamplerConfig,
    ):
        if partition.shard_count != config.shard_count:
            raise ConfigError(
                f"partition has {partition.shard_count} shards, sampler expects "
                f"{config.shard_count}"
            )
        self.graph = graph
        self.partition = partition
        self.config = config
        self.used_fallback = False

        d = config.shard_count
        relations = graph.triples[:, 1].astype(np.int64)
        global_probs = (
            cube_root_rescale(graph.relation_counts)
            if config.cube_root_global_counts
            else None
        )
        self._draws: list[list[_BucketDraws | None]] = []
        fallback_pairs = []
        for i in range(d):
            row = []
            for j in range(d):
                idx = buckets.indices[i][j]
                if idx.size == 0:
                    row.append(None)
                    fallback_pairs.append((i, j))
                    continue
                probs = None
                if config.cube_root_relation_sampling:
                    probs = (
                        global_probs
                        if global_probs is not None
                        else cube_root_rescale(buckets.relation_counts[i][j])
                    )
                row.append(_BucketDraws(idx, relations[idx], probs))
            self._draws.append(row)

        self._fallback: list[_BucketDraws | None] = [None] * d
        if fallback_pairs:
            self.used_fallback = True
            log.warning(
                "empty triple buckets %s; sampling those slots uniformly from "
                "the owning worker's row of buckets",
                fallback_pairs,
            )
            for i in sorted({i for i, _ in fallback_pairs}):
                union = np.concatenate(buckets.indices[i]) if any(
                    b.size for b in buckets.indices[i]
                ) else np.empty(0, dtype=np.int64)
                if union.size == 0:
                    raise PlanError(
                        f"worker {i} owns no triples at all; cannot build plans"
                    )
                probs = None
                if config.cube_root_relation_sampling:
                    probs = (
                        global_probs
                        if global_probs is not None
                        else cube_root_rescale(
                            np.bincount(relations[union], minlength=graph.relation_count)
                        )
                    )
                self._fallback[i] = _BucketDraws(union, relations[union], probs)

    def sample(self, step: int) -> MicroBatchPlan:
        cfg = self.config
        d = cfg.shard_count
        b_per = cfg.micro_batch_size // d
        n_per = cfg.negative_count // d
        triple_idx = np.empty((d, cfg.micro_batch_size), dtype=np.int64)
        negatives = np.empty((d, cfg.negative_count), dtype=np.uint32)
        for i in range(d):
            for j in range(d):
                rng = derive_rng(cfg.seed, PURPOSE_SAMPLER, step, i, j)
                draws = self._draws[i][j] or self._fallback[i]
                triple_idx[i, j * b_per : (j + 1) * b_per] = draws.draw(rng, b_per)
                real = self.partition.real_count(j)
                rows = rng.integers(0, real, size=n_per)
                negatives[i, j * n_per : (j + 1) * n_per] = self.partition.shard_entities[
                    j, rows
                ]
        return MicroBatchPlan(
            group_count=d,
            positives_per_group=cfg.micro_batch_size,
            negatives_per_group=cfg.negative_count,
            triple_indices=triple_idx,
            negatives=negatives,
            used_fallback=self.used_fallback,
        )


def sample_micro_batches(
    graph: KnowledgeGraph,
    partition: EntityPartition,
    buckets: TripleBuckets,
    config: SamplerConfig,
    step: int,
) -> MicroBatchPlan:
    """One-shot convenience wrapper around MicroBatchSampler."""
    return MicroBatchSampler(graph, partition, buckets, config).sample(step)


def shared_negative_mask(
    negatives: np.ndarray, tails: np.ndarray, filtering: bool
) -> np.ndarray:
    """Mask [B, N] zeroing negatives that collide with a positive's true tail.

    With filtering off this is all ones; losses multiply negative terms by the
    mask and renormalise self-adversarial weights over the surviving entries.
    """
    b, n = tails.shape[0], negatives.shape[0]
    if not filtering:
        return np.ones((b, n))
    return (tails[:, None] != negatives[None, :]).astype(np.float64)
