"""Simulated collective communication between lockstep workers.

The fabric is the only channel between workers. Both collectives copy their
payloads, so a worker can never mutate another worker's buffers, and both
keep per-ordered-pair byte accounting (optionally broken down by tag). Local
(i -> i) movement costs nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FabricError


@dataclass
class CollectiveFabric:
    worker_count: int
    step_traffic: np.ndarray = field(init=False)
    tag_traffic: dict = field(init=False)

    def __post_init__(self) -> None:
        if self.worker_count < 1:
            raise FabricError("worker_count must be >= 1")
        self.reset_traffic()

    def reset_traffic(self) -> None:
        self.step_traffic = np.zeros((self.worker_count, self.worker_count), np.int64)
        self.tag_traffic = {}

    def _account(self, sender: int, receiver: int, nbytes: int, tag: str | None) -> None:
        if sender == receiver:
            return
        self.step_traffic[sender, receiver] += nbytes
        if tag is not None:
            mat = self.tag_traffic.setdefault(
                tag, np.zeros((self.worker_count, self.worker_count), np.int64)
            )
            mat[sender, receiver] += nbytes

    def all_gather(
        self, buffers: list[np.ndarray], tag: str | None = None
    ) -> list[np.ndarray]:
        """Every worker ends up with the concatenation of all buffers, ordered
        by worker index. Buffers must share shape and dtype."""
        self._check_count(len(buffers))
        first = buffers[0]
        for i, buf in enumerate(buffers):
            if buf.shape != first.shape or buf.dtype != first.dtype:
                raise FabricError(
                    f"all_gather size mismatch: worker {i} supplies "
                    f"{buf.shape}/{buf.dtype}, worker 0 supplies "
                    f"{first.shape}/{first.dtype}"
                )
        gathered = np.concatenate([np.ascontiguousarray(b) for b in buffers], axis=0)
        for sender in range(self.worker_count):
            for receiver in range(self.worker_count):
                self._account(sender, receiver, buffers[sender].nbytes, tag)
        return [gathered.copy() for _ in range(self.worker_count)]

    def all_to_all(
        self, chunks: list[list[np.ndarray]], tag: str | None = None
    ) -> list[list[np.ndarray]]:
        """Transpose: worker j receives (chunks[0][j], ..., chunks[D-1][j]).

        All chunks must share one shape and dtype, which is what keeps the
        exchange balanced.
        """
        self._check_count(len(chunks))
        for i, row in enumerate(chunks):
            if len(row) != self.worker_count:
                raise FabricError(
                    f"all_to_all: worker {i} supplies {len(row)} chunks, "
                    f"expected {self.worker_count}"
                )
        first = chunks[0][0]
        for i, row in enumerate(chunks):
            for j, chunk in enumerate(row):
                if chunk.shape != first.shape or chunk.dtype != first.dtype:
                    raise FabricError(
                        f"all_to_all chunk size mismatch at ({i}, {j}): "
                        f"{chunk.shape}/{chunk.dtype} vs {first.shape}/{first.dtype}"
                    )
        received: list[list[np.ndarray]] = []
        for j in range(self.worker_count):
            row = []
            for i in range(self.worker_count):
                self._account(i, j, chunks[i][j].nbytes, tag)
                row.append(chunks[i][j].copy())
            received.append(row)
        return received

    def _check_count(self, n: int) -> None:
        if n != self.worker_count:
            raise FabricError(
                f"collective called with {n} participants, fabric has "
                f"{self.worker_count}"
            )
