"""Relation-frequency statistics across dataset splits.

For each query set the report carries the relation frequency table (sorted by
descending count), the cumulative-frequency curve, the cube-root-rescaled
distribution, and, for labelled sets, the fraction of tails never seen as a
training tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import KnowledgeGraph


def cube_root_rescale(counts: np.ndarray) -> np.ndarray:
    """Probabilities proportional to counts**(1/3); zero counts stay zero."""
    c = np.asarray(counts, dtype=np.float64)
    if np.any(c < 0):
        raise ValueError("counts must be non-negative")
    roots = np.cbrt(c)
    total = roots.sum()
    if total == 0.0:
        return np.zeros_like(roots)
    return roots / total


@dataclass
class SetStats:
    """Per-split relation table, ordered by (count desc, relation id asc)."""

    name: str
    relation_ids: np.ndarray  # [R] int64, sort order of the table
    counts: np.ndarray  # [R] int64
    frequency: np.ndarray  # [R] float64
    cumulative: np.ndarray  # [R] float64
    cube_root_probability: np.ndarray  # [R] float64
    tail_coverage_gap: float | None  # None for unlabelled (h, r) sets


@dataclass
class StatsReport:
    relation_count: int
    sets: list[SetStats]

    def get(self, name: str) -> SetStats:
        for s in self.sets:
            if s.name == name:
                return s
        raise KeyError(name)


def _set_stats(
    name: str,
    relations: np.ndarray,
    tails: np.ndarray | None,
    relation_count: int,
    train_tails: np.ndarray,
) -> SetStats:
    counts = np.bincount(relations, minlength=relation_count).astype(np.int64)
    order = np.lexsort((np.arange(relation_count), -counts))
    counts = counts[order]
    total = counts.sum()
    freq = counts / total if total else np.zeros(relation_count)
    gap = None
    if tails is not None and tails.size:
        gap = float(np.mean(~np.isin(tails, train_tails)))
    return SetStats(
        name=name,
        relation_ids=order.astype(np.int64),
        counts=counts,
        frequency=freq,
        cumulative=np.cumsum(freq),
        cube_root_probability=cube_root_rescale(counts),
        tail_coverage_gap=gap,
    )


def split_stats(
    graph: KnowledgeGraph, query_sets: dict[str, np.ndarray] | None = None
) -> StatsReport:
    """Compute per-split relation statistics.

    ``query_sets`` maps a split name to an int array of (h, r) or (h, r, t)
    rows; the training split (name ``train``) is always included from the
    graph itself. Coverage gaps are measured against training tails.
    """
    train_tails = graph.training_tails()
    sets = [
        _set_stats(
            "train",
            graph.triples[:, 1].astype(np.int64),
            graph.triples[:, 2].astype(np.int64),
            graph.relation_count,
            train_tails,
        )
    ]
    for name, rows in (query_sets or {}).items():
        rows = np.asarray(rows, dtype=np.int64)
        tails = rows[:, 2] if rows.shape[1] == 3 else None
        sets.append(
            _set_stats(name, rows[:, 1], tails, graph.relation_count, train_tails)
        )
    return StatsReport(graph.relation_count, sets)


def write_stats_tsv(stats: SetStats, path: str) -> None:
    """One row per relation: id, count, frequency, cumulative, cube-root prob."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# set\t{stats.name}\n")
        if stats.tail_coverage_gap is not None:
            fh.write(f"# tail_coverage_gap\t{stats.tail_coverage_gap:.6f}\n")
        fh.write(
            "relation_id\tcount\tfrequency\tcumulative_frequency\t"
            "cube_root_probability\n"
        )
        for rid, count, freq, cum, crp in zip(
            stats.relation_ids,
            stats.counts,
            stats.frequency,
            stats.cumulative,
            stats.cube_root_probability,
        ):
            fh.write(f"{rid}\t{count}\t{freq:.9g}\t{cum:.9g}\t{crp:.9g}\n")
