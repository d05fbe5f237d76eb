"""Counter-based random streams.

Every replica draws from its own Philox stream whose 128-bit key is
``(base_seed, replica)``; the Philox counter plays the role of the draw
index.  A replica's numbers therefore depend only on ``(base_seed, replica)``
and never on how replicas are scheduled across workers.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def stream_key(base_seed: int, replica: int) -> np.ndarray:
    if replica < 0:
        raise ValueError("replica index must be >= 0")
    return np.array([int(base_seed) & _MASK, int(replica) & _MASK], dtype=np.uint64)


def replica_generator(base_seed: int, replica: int, substream: int = 0) -> np.random.Generator:
    """Generator for one replica; ``substream`` k jumps the counter k * 2**128 draws."""
    bitgen = np.random.Philox(key=stream_key(base_seed, replica))
    for _ in range(substream):
        bitgen = bitgen.jumped()
    return np.random.Generator(bitgen)
