"""Counter-based random streams for reproducible parallel simulation.

Every random draw in a run derives from a single 64-bit seed expanded into
Philox streams keyed by (seed, worker_id, step).  Because the key fixes the
counter block, the draw made for a given step is identical no matter which
thread executes it or how many draws other steps consumed.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class WorkerStream:
    """Deterministic gradient-sample stream owned by one worker.

    ``generator(step)`` repositions the underlying Philox counter at the
    block keyed by (seed, worker_id, step) and returns a ``numpy`` Generator
    for it.  The returned generator is valid until the next ``generator``
    call on the same stream, which is all the bulk-synchronous step loop
    needs; distinct workers own distinct streams and may run in parallel.
    """

    __slots__ = ("seed", "worker_id", "_bitgen")

    def __init__(self, seed: int, worker_id: int):
        self.seed = int(seed)
        self.worker_id = int(worker_id)
        key = np.array([self.seed & _MASK64, self.worker_id & _MASK64], dtype=np.uint64)
        self._bitgen = np.random.Philox(key=key)

    def generator(self, step: int) -> np.random.Generator:
        """Generator positioned at this worker's counter block for ``step``."""
        state = self._bitgen.state
        counter = state["state"]["counter"]
        counter[:] = 0
        counter[1] = int(step) & _MASK64
        state["buffer_pos"] = 4  # discard any buffered words
        state["has_uint32"] = 0
        self._bitgen.state = state
        return np.random.Generator(self._bitgen)

    def __repr__(self) -> str:  # pragma: no cover
        return f"WorkerStream(seed={self.seed}, worker_id={self.worker_id})"


def spawn_streams(seed: int, num_workers: int) -> list[WorkerStream]:
    """One independent stream per worker id in [0, num_workers)."""
    return [WorkerStream(seed, k) for k in range(num_workers)]


def derived_generator(seed: int, purpose: int) -> np.random.Generator:
    """Stand-alone generator for auxiliary draws (calibration, test data).

    Uses worker-id slot 2**32 + purpose so it can never collide with a
    worker gradient stream of the same seed.
    """
    return WorkerStream(seed, (1 << 32) + purpose).generator(0)
