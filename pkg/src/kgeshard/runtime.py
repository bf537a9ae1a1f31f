"""Simulated lockstep execution of sharded training steps.

D workers advance one step at a time. Each worker exclusively owns one entity
shard (embedding rows, optimiser state, features); small parameters (relation
table, feature projections, relation normals) are replicated with replicated
optimiser state, refreshed from owner slices through an AllGather each step,
and updated identically everywhere from a summed gradient.

Per step, for plan group g processed on worker i:

1. head rows are read locally (heads never cross the fabric);
2. positive-tail and negative rows are fetched from their owners through one
   AllToAll of equal-size chunks (embeddings + features, storage precision);
3. the micro-batch loss and analytic gradients are computed;
4. tail/negative gradients return to their owners through a second AllToAll
   (compute precision);
5. small-parameter gradients are AllGather-reduced so every replica applies
   the identical sum;
6. owners sum per-row contributions in a canonical (group, kind, position)
   order and apply a single optimiser update per touched row.

The canonical accumulation order makes the whole step bitwise independent of
the worker count, which is what the replay-based worker-count invariance
checks rely on. A plan sampled for G groups can run on any D dividing G as
long as the entity partitions nest (same permutation seed).
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .data import KnowledgeGraph, EntityPartition
from .errors import ConfigError, PlanError
from .fabric import CollectiveFabric
from .model import BatchInputs, ModelConfig, batch_forward_backward
from .optim import OptimiserConfig, TableOptimiser
from .sampling import MicroBatchPlan, MicroBatchSampler, shared_negative_mask
from .seeding import (
    PURPOSE_DROPOUT,
    PURPOSE_INIT_ENTITY,
    PURPOSE_INIT_SHARED,
    derive_rng,
)

log = logging.getLogger(__name__)

TAG_ENTITY_ROWS = "entity_rows"
TAG_GRAD_RETURN = "grad_return"
TAG_PARAM_GATHER = "param_gather"
TAG_GRAD_REDUCE = "grad_reduce"


@dataclass(frozen=True)
class Precision:
    name: str
    storage: np.dtype
    compute: np.dtype


PRECISIONS = {
    "half": Precision("half", np.dtype(np.float16), np.dtype(np.float32)),
    "single": Precision("single", np.dtype(np.float32), np.dtype(np.float32)),
    "double": Precision("double", np.dtype(np.float64), np.dtype(np.float64)),
}


def get_precision(name: str) -> Precision:
    try:
        return PRECISIONS[name]
    except KeyError:
        raise ConfigError(
            f"precision must be one of {tuple(PRECISIONS)}, got {name!r}"
        ) from None


# ---------------------------------------------------------------------------
# Schedule
# ---------------------------------------------------------------------------


@dataclass
class TrainSchedule:
    total_steps: int
    initial_lr: float
    decay: str = "linear"  # linear-to-zero or constant
    optimiser: OptimiserConfig = field(default_factory=OptimiserConfig)
    eval_interval: int = 0  # 0 disables periodic evaluation rows
    eval_train_samples: int = 1000
    checkpoint_interval: int = 0  # 0 means final checkpoint only

    def __post_init__(self) -> None:
        if self.total_steps < 1:
            raise ConfigError("schedule.total_steps must be >= 1")
        if self.initial_lr < 0:
            raise ConfigError("schedule.initial_lr must be >= 0")
        if self.decay not in ("linear", "constant"):
            raise ConfigError(
                f"schedule.decay must be 'linear' or 'constant', got {self.decay!r}"
            )


def lr_at(schedule: TrainSchedule, step: int) -> float:
    """Learning rate at a 0-based step; linear decay reaches 0 at total_steps."""
    if not 0 <= step <= schedule.total_steps:
        raise ConfigError(
            f"step {step} outside [0, {schedule.total_steps}]"
        )
    if schedule.decay == "constant":
        return schedule.initial_lr
    return schedule.initial_lr * (1.0 - step / schedule.total_steps)


# ---------------------------------------------------------------------------
# Sharded parameter state
# ---------------------------------------------------------------------------


class Replica:
    """One worker's copy of the replicated small parameters."""

    def __init__(
        self,
        relations: np.ndarray,
        normals: Optional[np.ndarray],
        proj_head: Optional[np.ndarray],
        proj_tail: Optional[np.ndarray],
        tied: bool,
        opt_config: OptimiserConfig,
        compute_dtype,
    ):
        self.relations = relations
        self.normals = normals
        self.proj_head = proj_head
        self.proj_tail = proj_head if tied else proj_tail
        self.tied = tied
        self.optimisers = [
            TableOptimiser(arr, opt_config, compute_dtype)
            for _, arr in self.tensors()
        ]

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """Canonical tensor order used for flattening and checkpoints."""
        out = [("relations", self.relations)]
        if self.normals is not None:
            out.append(("normals", self.normals))
        if self.proj_head is not None:
            out.append(("proj_head", self.proj_head))
            if not self.tied:
                out.append(("proj_tail", self.proj_tail))
        return out

    @property
    def flat_size(self) -> int:
        return sum(arr.size for _, arr in self.tensors())

    def flatten(self) -> np.ndarray:
        return np.concatenate([arr.ravel() for _, arr in self.tensors()])

    def load_flat(self, vec: np.ndarray) -> None:
        offset = 0
        for _, arr in self.tensors():
            arr[...] = vec[offset : offset + arr.size].reshape(arr.shape)
            offset += arr.size

    def apply_dense(self, flat_grad: np.ndarray, lr: float, step: int) -> None:
        offset = 0
        for (_, arr), opt in zip(self.tensors(), self.optimisers):
            opt.update_dense(flat_grad[offset : offset + arr.size].reshape(arr.shape), lr, step)
            offset += arr.size


class WorkerShard:
    """A worker's owned entity rows plus its replica of small parameters."""

    def __init__(
        self,
        index: int,
        shallow: np.ndarray,
        features: Optional[np.ndarray],
        replica: Replica,
        opt_config: OptimiserConfig,
        compute_dtype,
        real_rows: int,
    ):
        self.index = index
        self.shallow = shallow
        self.features = features
        self.replica = replica
        self.real_rows = real_rows
        self.shallow_opt = TableOptimiser(shallow, opt_config, compute_dtype)

    def row_payload(self, rows: np.ndarray, capacity: int) -> np.ndarray:
        """Rows packed as [capacity, d + F] at storage precision, zero padded."""
        d = self.shallow.shape[1]
        f = 0 if self.features is None else self.features.shape[1]
        out = np.zeros((capacity, d + f), dtype=self.shallow.dtype)
        out[: rows.size, :d] = self.shallow[rows]
        if f:
            out[: rows.size, d:] = self.features[rows]
        return out


class ShardedModel:
    """Full model state partitioned across D simulated workers."""

    def __init__(
        self,
        graph: KnowledgeGraph,
        partition: EntityPartition,
        config: ModelConfig,
        workers: list[WorkerShard],
        precision: Precision,
        opt_config: OptimiserConfig,
        seed: int,
    ):
        self.graph = graph
        self.partition = partition
        self.config = config
        self.workers = workers
        self.precision = precision
        self.opt_config = opt_config
        self.seed = seed

    @property
    def worker_count(self) -> int:
        return len(self.workers)

    @classmethod
    def initialise(
        cls,
        graph: KnowledgeGraph,
        partition: EntityPartition,
        config: ModelConfig,
        seed: int,
        precision: str = "single",
        opt_config: OptimiserConfig | None = None,
    ) -> "ShardedModel":
        """Build worker shards with worker-count-independent initialisation.

        Global tables are drawn once from seed-derived streams and scattered
        into shards, so the same seed yields the same per-entity vectors for
        any worker count.
        """
        if config.feature_dim != graph.feature_dim:
            raise ConfigError(
                f"model.feature_dim {config.feature_dim} != dataset feature dim "
                f"{graph.feature_dim}"
            )
        prec = get_precision(precision)
        opt_config = opt_config or OptimiserConfig()
        d = config.embedding_dim

        ent_rng = derive_rng(seed, PURPOSE_INIT_ENTITY)
        scale = config.init_scale / np.sqrt(d)
        global_shallow = (ent_rng.standard_normal((graph.entity_count, d)) * scale).astype(
            prec.storage
        )

        shared_rng = derive_rng(seed, PURPOSE_INIT_SHARED)
        k = config.relation_dim
        if config.score_fn == "rotate":
            relations = shared_rng.uniform(-np.pi, np.pi, size=(graph.relation_count, k))
        else:
            relations = shared_rng.standard_normal((graph.relation_count, k)) * scale
        relations = relations.astype(prec.compute)
        normals = None
        if config.uses_normals:
            normals = shared_rng.standard_normal((graph.relation_count, d)).astype(
                prec.compute
            )
        proj_head = proj_tail = None
        if config.uses_projections:
            pscale = config.init_scale / np.sqrt(config.feature_dim)
            proj_head = (
                shared_rng.standard_normal((d, config.feature_dim)) * pscale
            ).astype(prec.compute)
            if not config.tie_projections:
                proj_tail = (
                    shared_rng.standard_normal((d, config.feature_dim)) * pscale
                ).astype(prec.compute)

        workers = []
        for i in range(partition.shard_count):
            real = partition.real_count(i)
            shallow = np.zeros((partition.shard_size, d), dtype=prec.storage)
            entities = partition.shard_entities[i, :real].astype(np.int64)
            shallow[:real] = global_shallow[entities]
            features = None
            if config.uses_projections:
                features = np.zeros(
                    (partition.shard_size, config.feature_dim), dtype=prec.storage
                )
                features[:real] = graph.features[entities].astype(prec.storage)
            replica = Replica(
                relations.copy(),
                None if normals is None else normals.copy(),
                None if proj_head is None else proj_head.copy(),
                None if proj_tail is None else proj_tail.copy(),
                config.tie_projections,
                opt_config,
                prec.compute,
            )
            workers.append(
                WorkerShard(i, shallow, features, replica, opt_config, prec.compute, real)
            )
        return cls(graph, partition, config, workers, prec, opt_config, seed)

    def gather_entity_table(self) -> np.ndarray:
        """Entity shallow table in global id order (diagnostics and tests)."""
        d = self.config.embedding_dim
        table = np.zeros((self.graph.entity_count, d), dtype=self.precision.storage)
        for worker in self.workers:
            real = worker.real_rows
            ids = self.partition.shard_entities[worker.index, :real].astype(np.int64)
            table[ids] = worker.shallow[:real]
        return table


# ---------------------------------------------------------------------------
# Step planning helpers
# ---------------------------------------------------------------------------


@dataclass
class _PairBlock:
    """Slots that group ``group`` occupies inside one (receiver, owner) chunk."""

    group: int
    tail_positions: np.ndarray
    tail_rows: np.ndarray
    neg_positions: np.ndarray
    neg_rows: np.ndarray
    tail_offset: int
    neg_offset: int


@dataclass
class _GroupData:
    group: int
    worker: int
    heads: np.ndarray
    relations: np.ndarray
    tails: np.ndarray
    negatives: np.ndarray
    head_rows: np.ndarray
    tail_owner: np.ndarray
    neg_owner: np.ndarray


@dataclass
class _GroupResult:
    objective: float
    data_loss: float
    reg_value: float
    grads: object  # BatchGrads
    relation_ids: np.ndarray


@dataclass
class StepMetrics:
    step: int
    lr: float
    loss: float
    data_loss: float
    reg_value: float
    bytes_per_step: int
    traffic: np.ndarray


class Trainer:
    """Bulk-synchronous training loop over a sharded model."""

    def __init__(
        self,
        model: ShardedModel,
        schedule: TrainSchedule,
        sampler: MicroBatchSampler | None = None,
        fabric: CollectiveFabric | None = None,
        parallel: str = "sequential",
        filter_false_negatives: bool = False,
    ):
        if parallel not in ("sequential", "threads"):
            raise ConfigError(
                f"parallel mode must be 'sequential' or 'threads', got {parallel!r}"
            )
        self.model = model
        self.schedule = schedule
        self.sampler = sampler
        self.fabric = fabric or CollectiveFabric(model.worker_count)
        if self.fabric.worker_count != model.worker_count:
            raise ConfigError("fabric worker count does not match model")
        self.parallel = parallel
        self.filter_false_negatives = filter_false_negatives
        self.step_index = 0
        self._pool = (
            ThreadPoolExecutor(max_workers=model.worker_count)
            if parallel == "threads" and model.worker_count > 1
            else None
        )

    # -- step execution ----------------------------------------------------

    def train_step(self, plan: MicroBatchPlan) -> StepMetrics:
        model = self.model
        d_workers = model.worker_count
        groups = self._load_groups(plan)
        gpw = plan.group_count // d_workers
        lr = lr_at(self.schedule, self.step_index)
        self.fabric.reset_traffic()

        pairs, capacity = self._build_pair_blocks(groups, gpw)

        # Phase 1: owners ship requested tail/negative rows (storage precision).
        send = [
            [
                model.workers[owner].row_payload(
                    _pair_rows(pairs.get((receiver, owner), [])), capacity
                )
                for receiver in range(d_workers)
            ]
            for owner in range(d_workers)
        ]
        recv = self.fabric.all_to_all(
            [list(col) for col in zip(*send)], tag=TAG_ENTITY_ROWS
        )
        # recv[receiver][owner] -> rows the receiver asked that owner for.

        # Phase 2: refresh replicas from owner slices.
        self._gather_params()

        # Phase 3: per-worker compute (parallelisable; buffers are private).
        results = [None] * plan.group_count

        def compute(worker: int) -> None:
            for g in range(worker * gpw, (worker + 1) * gpw):
                results[g] = self._compute_group(groups[g], pairs, recv, d_workers)

        if self._pool is not None:
            list(self._pool.map(compute, range(d_workers)))
        else:
            for worker in range(d_workers):
                compute(worker)

        # Phase 4: return tail/negative gradients to owners (compute precision).
        ret = [
            [
                self._grad_payload(results, pairs.get((receiver, owner), []), capacity)
                for owner in range(d_workers)
            ]
            for receiver in range(d_workers)
        ]
        returned = self.fabric.all_to_all(ret, tag=TAG_GRAD_RETURN)
        # returned[owner][receiver] -> gradients computed by that receiver.

        # Phase 5: reduce small-parameter gradients in canonical group order.
        flat_total = self._reduce_small_grads(results, gpw)

        # Phase 6: owners accumulate and update entity rows; replicas update.
        step_t = self.step_index + 1
        for owner in range(d_workers):
            self._apply_entity_updates(owner, groups, pairs, returned, results, lr, step_t)
        for worker in model.workers:
            worker.replica.apply_dense(flat_total, lr, step_t)

        loss = float(np.mean([r.objective for r in results]))
        data_loss = float(np.mean([r.data_loss for r in results]))
        reg_value = float(np.mean([r.reg_value for r in results]))
        traffic = self.fabric.step_traffic.copy()
        metrics = StepMetrics(
            step=self.step_index,
            lr=lr,
            loss=loss,
            data_loss=data_loss,
            reg_value=reg_value,
            bytes_per_step=int(traffic.sum()),
            traffic=traffic,
        )
        self.step_index += 1
        return metrics

    # -- helpers -------------------------------------------------------------

    def _load_groups(self, plan: MicroBatchPlan) -> list[_GroupData]:
        model = self.model
        d_workers = model.worker_count
        if plan.group_count % d_workers:
            raise PlanError(
                f"plan has {plan.group_count} groups, not divisible by "
                f"{d_workers} workers"
            )
        gpw = plan.group_count // d_workers
        part = model.partition
        groups = []
        for g in range(plan.group_count):
            tri = model.graph.triples[plan.triple_indices[g]].astype(np.int64)
            heads, rels, tails = tri[:, 0], tri[:, 1], tri[:, 2]
            negs = plan.negatives[g].astype(np.int64)
            expected = g // gpw
            head_shard = part.entity_shard[heads]
            if not np.all(head_shard == expected):
                bad = int(np.nonzero(head_shard != expected)[0][0])
                raise PlanError(
                    f"plan group {g} (bucket row {g}): head entity "
                    f"{int(heads[bad])} lives in shard {int(head_shard[bad])}, "
                    f"expected worker {expected}"
                )
            groups.append(
                _GroupData(
                    group=g,
                    worker=expected,
                    heads=heads,
                    relations=rels,
                    tails=tails,
                    negatives=negs,
                    head_rows=part.entity_row[heads],
                    tail_owner=part.entity_shard[tails],
                    neg_owner=part.entity_shard[negs],
                )
            )
        return groups

    def _build_pair_blocks(self, groups: list[_GroupData], gpw: int):
        """Chunk layout per (receiver, owner) pair plus the common capacity."""
        part = self.model.partition
        d_workers = self.model.worker_count
        pairs: dict[tuple[int, int], list[_PairBlock]] = {}
        counts = np.zeros((d_workers, d_workers), dtype=np.int64)
        for gd in groups:
            receiver = gd.worker
            for owner in range(d_workers):
                tail_pos = np.nonzero(gd.tail_owner == owner)[0]
                neg_pos = np.nonzero(gd.neg_owner == owner)[0]
                if (receiver, owner) not in pairs:
                    pairs[(receiver, owner)] = []
                offset = counts[receiver, owner]
                block = _PairBlock(
                    group=gd.group,
                    tail_positions=tail_pos,
                    tail_rows=part.entity_row[gd.tails[tail_pos]],
                    neg_positions=neg_pos,
                    neg_rows=part.entity_row[gd.negatives[neg_pos]],
                    tail_offset=int(offset),
                    neg_offset=int(offset + tail_pos.size),
                )
                pairs[(receiver, owner)].append(block)
                counts[receiver, owner] += tail_pos.size + neg_pos.size
        return pairs, int(counts.max())

    def _gather_params(self) -> None:
        """Refresh every replica from the AllGather of owner-held slices."""
        model = self.model
        d_workers = model.worker_count
        total = model.workers[0].replica.flat_size
        chunk = -(-total // d_workers)
        buffers = []
        for worker in model.workers:
            flat = worker.replica.flatten()
            padded = np.zeros(chunk, dtype=flat.dtype)
            lo = worker.index * chunk
            hi = min(lo + chunk, total)
            if hi > lo:
                padded[: hi - lo] = flat[lo:hi]
            buffers.append(padded)
        gathered = self.fabric.all_gather(buffers, tag=TAG_PARAM_GATHER)
        for worker, copy in zip(model.workers, gathered):
            worker.replica.load_flat(copy[:total])

    def _compute_group(self, gd: _GroupData, pairs, recv, d_workers: int):
        model = self.model
        cfg = model.config
        prec = model.precision
        worker = model.workers[gd.worker]
        d = cfg.embedding_dim
        f = cfg.feature_dim
        batch = gd.heads.size
        n_neg = gd.negatives.size

        tail_shallow = np.empty((batch, d), dtype=prec.compute)
        neg_shallow = np.empty((n_neg, d), dtype=prec.compute)
        tail_feat = np.empty((batch, f), dtype=prec.compute) if f else None
        neg_feat = np.empty((n_neg, f), dtype=prec.compute) if f else None
        for owner in range(d_workers):
            for block in pairs.get((gd.worker, owner), []):
                if block.group != gd.group:
                    continue
                payload = recv[gd.worker][owner]
                t0, t1 = block.tail_offset, block.tail_offset + block.tail_positions.size
                n0, n1 = block.neg_offset, block.neg_offset + block.neg_positions.size
                tail_shallow[block.tail_positions] = payload[t0:t1, :d]
                neg_shallow[block.neg_positions] = payload[n0:n1, :d]
                if f:
                    tail_feat[block.tail_positions] = payload[t0:t1, d:]
                    neg_feat[block.neg_positions] = payload[n0:n1, d:]

        replica = worker.replica
        inputs = BatchInputs(
            head_shallow=worker.shallow[gd.head_rows].astype(prec.compute),
            tail_shallow=tail_shallow,
            neg_shallow=neg_shallow,
            relations=replica.relations[gd.relations].astype(prec.compute, copy=True),
            normals=(
                replica.normals[gd.relations].astype(prec.compute, copy=True)
                if replica.normals is not None
                else None
            ),
            head_features=(
                worker.features[gd.head_rows].astype(prec.compute) if f else None
            ),
            tail_features=tail_feat,
            neg_features=neg_feat,
            proj_head=replica.proj_head,
            proj_tail=replica.proj_tail,
            entity_count=model.graph.entity_count,
        )
        if cfg.feature_dropout > 0.0 and f:
            rng = derive_rng(model.seed, PURPOSE_DROPOUT, self.step_index, gd.group)
            keep = 1.0 - cfg.feature_dropout
            inputs.head_dropout = (rng.random((batch, d)) < keep).astype(prec.compute)
            inputs.tail_dropout = (rng.random((batch, d)) < keep).astype(prec.compute)
            inputs.neg_dropout = (rng.random((n_neg, d)) < keep).astype(prec.compute)
        if self.filter_false_negatives:
            inputs.negative_mask = shared_negative_mask(
                gd.negatives, gd.tails, True
            ).astype(prec.compute)
        result = batch_forward_backward(inputs, cfg)
        return _GroupResult(
            objective=result.objective,
            data_loss=result.data_loss,
            reg_value=result.reg_value,
            grads=result.grads,
            relation_ids=gd.relations,
        )

    def _grad_payload(self, results, blocks: list[_PairBlock], capacity: int):
        d = self.model.config.embedding_dim
        out = np.zeros((capacity, d), dtype=self.model.precision.compute)
        for block in blocks:
            grads = results[block.group].grads
            t0 = block.tail_offset
            out[t0 : t0 + block.tail_positions.size] = grads.tail_shallow[
                block.tail_positions
            ]
            n0 = block.neg_offset
            out[n0 : n0 + block.neg_positions.size] = grads.neg_shallow[
                block.neg_positions
            ]
        return out

    def _reduce_small_grads(self, results, gpw: int) -> np.ndarray:
        """AllGather per-group flattened gradients, sum in group order."""
        model = self.model
        d_workers = model.worker_count
        per_group = [self._flatten_small_grads(r) for r in results]
        stacked = [
            np.concatenate(per_group[w * gpw : (w + 1) * gpw])
            for w in range(d_workers)
        ]
        gathered = self.fabric.all_gather(
            [buf.reshape(1, -1) for buf in stacked], tag=TAG_GRAD_REDUCE
        )
        size = per_group[0].size
        flat = gathered[0].reshape(-1)[: size * len(results)]
        total = np.zeros(size, dtype=model.precision.compute)
        for g in range(len(results)):
            total += flat[g * size : (g + 1) * size]
        return total

    def _flatten_small_grads(self, result) -> np.ndarray:
        model = self.model
        cfg = model.config
        prec = model.precision
        grads = result.grads
        pieces = []
        rel_grad = np.zeros(
            (model.graph.relation_count, cfg.relation_dim), dtype=prec.compute
        )
        np.add.at(rel_grad, result.relation_ids, grads.relations)
        pieces.append(rel_grad.ravel())
        if cfg.uses_normals:
            normal_grad = np.zeros(
                (model.graph.relation_count, cfg.embedding_dim), dtype=prec.compute
            )
            np.add.at(normal_grad, result.relation_ids, grads.normals)
            pieces.append(normal_grad.ravel())
        if cfg.uses_projections:
            if cfg.tie_projections:
                pieces.append((grads.proj_head + grads.proj_tail).ravel())
            else:
                pieces.append(grads.proj_head.ravel())
                pieces.append(grads.proj_tail.ravel())
        return np.concatenate(pieces).astype(prec.compute, copy=False)

    def _apply_entity_updates(
        self, owner: int, groups, pairs, returned, results, lr: float, step_t: int
    ) -> None:
        model = self.model
        worker = model.workers[owner]
        shard_rows = worker.shallow.shape[0]
        acc = np.zeros((shard_rows, model.config.embedding_dim), dtype=model.precision.compute)
        touched = np.zeros(shard_rows, dtype=bool)
        block_index = {
            (blk.group, receiver): blk
            for (receiver, own), blks in pairs.items()
            if own == owner
            for blk in blks
        }
        for gd in groups:
            res = results[gd.group]
            if gd.worker == owner:
                np.add.at(acc, gd.head_rows, res.grads.head_shallow)
                touched[gd.head_rows] = True
            blk = block_index.get((gd.group, gd.worker))
            if blk is None:
                continue
            payload = returned[owner][gd.worker]
            t0 = blk.tail_offset
            if blk.tail_positions.size:
                np.add.at(acc, blk.tail_rows, payload[t0 : t0 + blk.tail_positions.size])
                touched[blk.tail_rows] = True
            n0 = blk.neg_offset
            if blk.neg_positions.size:
                np.add.at(acc, blk.neg_rows, payload[n0 : n0 + blk.neg_positions.size])
                touched[blk.neg_rows] = True
        rows = np.nonzero(touched)[0]
        worker.shallow_opt.update_rows(rows, acc[rows], lr, step_t)

    # -- loop ---------------------------------------------------------------

    def run(
        self,
        total_steps: int | None = None,
        plans: list[MicroBatchPlan] | None = None,
        eval_fn: Optional[Callable[["ShardedModel"], dict]] = None,
        on_metrics: Optional[Callable[[dict], None]] = None,
        checkpoint_fn: Optional[Callable[[int], None]] = None,
    ) -> list[dict]:
        """Run until ``total_steps`` completed steps, evaluating and logging
        every ``schedule.eval_interval`` steps (and at the end).

        ``plans`` replays a fixed plan list (indexed by absolute step);
        otherwise the sampler provides one plan per step.
        """
        total = self.schedule.total_steps if total_steps is None else total_steps
        if plans is None and self.sampler is None:
            raise ConfigError("Trainer needs a sampler or an explicit plan list")
        interval = self.schedule.eval_interval
        rows: list[dict] = []
        window_losses: list[float] = []
        window_start = time.perf_counter()
        window_steps = 0
        triples_per_plan = None

        while self.step_index < total:
            step = self.step_index
            plan = plans[step] if plans is not None else self.sampler.sample(step)
            triples_per_plan = plan.group_count * plan.positives_per_group
            metrics = self.train_step(plan)
            window_losses.append(metrics.loss)
            window_steps += 1
            done = self.step_index >= total
            if (interval and self.step_index % interval == 0) or done:
                elapsed = max(time.perf_counter() - window_start, 1e-9)
                row = {
                    "step": self.step_index,
                    "lr": metrics.lr,
                    "train_loss": float(np.mean(window_losses)),
                    "train_mrr": float("nan"),
                    "valid_mrr": float("nan"),
                    "triples_per_s": triples_per_plan * window_steps / elapsed,
                    "bytes_per_step": metrics.bytes_per_step,
                }
                if eval_fn is not None:
                    row.update(eval_fn(self.model))
                rows.append(row)
                if on_metrics is not None:
                    on_metrics(row)
                window_losses = []
                window_start = time.perf_counter()
                window_steps = 0
            if checkpoint_fn is not None:
                cadence = self.schedule.checkpoint_interval
                if (cadence and self.step_index % cadence == 0) or done:
                    checkpoint_fn(self.step_index)
        return rows

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()


# ---------------------------------------------------------------------------
# Cost model and benchmark
# ---------------------------------------------------------------------------


@dataclass
class CostEstimate:
    t_compute: float
    t_comms: float
    memory_elements: int
    feasible: bool


def cost_model(
    batch_size: int,
    negative_count: int,
    embedding_dim: int,
    feature_dim: int,
    c_compute: float = 1.0,
    c_comms: float = 1.0,
    memory_limit: float = float("inf"),
) -> CostEstimate:
    """Per-step time and memory model.

    t_compute = c_compute * (B*N*d + (B+N)*F*d); t_comms = c_comms *
    (B+N)*(d+F); memory = (B+N)*(d+F) element units, feasible while it stays
    below the limit.
    """
    if min(batch_size, embedding_dim) < 1 or negative_count < 0 or feature_dim < 0:
        raise ConfigError("cost_model arguments must be positive")
    b, n, d, f = batch_size, negative_count, embedding_dim, feature_dim
    t_compute = c_compute * (b * n * d + (b + n) * f * d)
    t_comms = c_comms * (b + n) * (d + f)
    memory = (b + n) * (d + f)
    return CostEstimate(t_compute, t_comms, memory, memory < memory_limit)


@dataclass
class BenchmarkReport:
    steps: int
    triples_per_s: float
    step_time_mean: float
    step_time_min: float
    step_time_max: float
    bytes_per_step: int


def benchmark_throughput(trainer: Trainer, steps: int, warmup: int = 1) -> BenchmarkReport:
    """Measured wall-clock throughput over ``steps`` training steps."""
    if steps <= 0:
        raise ConfigError("no measurement window: benchmark needs steps >= 1")
    if trainer.sampler is None:
        raise ConfigError("benchmark requires a sampler-backed trainer")
    for _ in range(warmup):
        trainer.train_step(trainer.sampler.sample(trainer.step_index))
    times = []
    bytes_per_step = 0
    triples = 0
    for _ in range(steps):
        plan = trainer.sampler.sample(trainer.step_index)
        start = time.perf_counter()
        metrics = trainer.train_step(plan)
        times.append(time.perf_counter() - start)
        bytes_per_step = metrics.bytes_per_step
        triples += plan.group_count * plan.positives_per_group
    elapsed = sum(times)
    return BenchmarkReport(
        steps=steps,
        triples_per_s=triples / max(elapsed, 1e-12),
        step_time_mean=float(np.mean(times)),
        step_time_min=float(np.min(times)),
        step_time_max=float(np.max(times)),
        bytes_per_step=bytes_per_step,
    )


# ---------------------------------------------------------------------------
# Metrics log
# ---------------------------------------------------------------------------

METRICS_COLUMNS = (
    "step",
    "lr",
    "train_loss",
    "train_mrr",
    "valid_mrr",
    "triples_per_s",
    "bytes_per_step",
)


class MetricsLog:
    """Line-oriented TSV metrics log, one record per eval interval."""

    def __init__(self, path: str):
        self.path = path
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write("\t".join(METRICS_COLUMNS) + "\n")
        self._fh.flush()

    def write(self, row: dict) -> None:
        fields = []
        for col in METRICS_COLUMNS:
            value = row.get(col, float("nan"))
            fields.append(f"{value:.9g}" if isinstance(value, float) else str(value))
        self._fh.write("\t".join(fields) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self) -> "MetricsLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def load_metrics(path: str) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split("\t")
        for line in fh:
            parts = line.strip().split("\t")
            row = {}
            for key, val in zip(header, parts):
                row[key] = int(val) if key in ("step", "bytes_per_step") else float(val)
            rows.append(row)
    return rows
