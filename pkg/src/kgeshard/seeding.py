"""Deterministic RNG stream derivation.

All randomness in a run is derived from one integer seed plus an explicit
purpose path, so any stream can be reconstructed independently of worker
count, thread scheduling, or call order.
"""

from __future__ import annotations

import numpy as np

# Purpose tags keeping unrelated streams disjoint. Values are arbitrary but
# frozen: changing them changes every derived stream.
PURPOSE_SAMPLER = 1
PURPOSE_DROPOUT = 2
PURPOSE_INIT_ENTITY = 3
PURPOSE_INIT_SHARED = 4
PURPOSE_EVAL_SAMPLE = 5
PURPOSE_SYNTHETIC = 6
PURPOSE_PARTITION = 7


def derive_rng(seed: int, *path: int) -> np.random.Generator:
    """Return a generator for the stream identified by (seed, *path).

    Path elements must be non-negative integers; the same tuple always yields
    the same stream.
    """
    entropy = [int(seed)] + [int(p) for p in path]
    if any(e < 0 for e in entropy):
        raise ValueError(f"rng path elements must be non-negative, got {entropy}")
    return np.random.default_rng(np.random.SeedSequence(entropy))
