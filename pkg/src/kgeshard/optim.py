"""Adam and SGD updates over embedding tables.

Entity tables use row-sparse updates: only rows touched by a step move, and
their first/second-moment state is co-located with the rows. Bias correction
uses the global step count. Replicated (small) parameters use the dense
variants so every replica applies the identical update.

Math runs in ``compute_dtype``; tables and state are written back at their
storage dtype.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

OPTIMISERS = ("adam", "sgd")


@dataclass
class OptimiserConfig:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.kind not in OPTIMISERS:
            raise ConfigError(f"optimiser must be one of {OPTIMISERS}, got {self.kind!r}")


class TableOptimiser:
    """Optimiser state bound to one parameter table."""

    def __init__(self, table: np.ndarray, config: OptimiserConfig, compute_dtype):
        self.table = table
        self.config = config
        self.compute_dtype = compute_dtype
        if config.kind == "adam":
            self.m = np.zeros_like(table)
            self.v = np.zeros_like(table)
        else:
            self.m = self.v = None

    def state_arrays(self) -> list[np.ndarray]:
        return [] if self.m is None else [self.m, self.v]

    def update_rows(self, rows: np.ndarray, grads: np.ndarray, lr: float, step: int) -> None:
        """Apply one update to unique ``rows`` with pre-summed ``grads``.

        ``step`` is the 1-based global step used for bias correction.
        """
        if rows.size == 0:
            return
        cfg = self.config
        g = grads.astype(self.compute_dtype, copy=False)
        if cfg.kind == "sgd":
            x = self.table[rows].astype(self.compute_dtype) - lr * g
            self.table[rows] = x.astype(self.table.dtype)
            return
        m = self.m[rows].astype(self.compute_dtype)
        v = self.v[rows].astype(self.compute_dtype)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / (1.0 - cfg.beta1**step)
        v_hat = v / (1.0 - cfg.beta2**step)
        x = self.table[rows].astype(self.compute_dtype)
        x -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        self.table[rows] = x.astype(self.table.dtype)
        self.m[rows] = m.astype(self.m.dtype)
        self.v[rows] = v.astype(self.v.dtype)

    def update_dense(self, grad: np.ndarray, lr: float, step: int) -> None:
        """Apply one update to the whole table (replicated parameters)."""
        cfg = self.config
        g = grad.astype(self.compute_dtype, copy=False)
        if cfg.kind == "sgd":
            x = self.table.astype(self.compute_dtype) - lr * g
            self.table[...] = x.astype(self.table.dtype)
            return
        m = self.m.astype(self.compute_dtype)
        v = self.v.astype(self.compute_dtype)
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        m_hat = m / (1.0 - cfg.beta1**step)
        v_hat = v / (1.0 - cfg.beta2**step)
        x = self.table.astype(self.compute_dtype)
        x -= lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        self.table[...] = x.astype(self.table.dtype)
        self.m[...] = m.astype(self.m.dtype)
        self.v[...] = v.astype(self.v.dtype)
