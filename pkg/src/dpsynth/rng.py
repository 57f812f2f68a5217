"""Deterministic random number streams.

All randomness in a run flows from a single 64-bit root seed. Each consumer
asks for a named sub-stream, optionally keyed by integer counters (epoch,
step, repetition). Streams are stateless: the same (seed, name, keys) always
yields the same generator, so any component can be replayed in isolation.
"""

from __future__ import annotations

import numpy as np

# Fixed ids keep sub-streams disjoint without hashing strings at call time.
_STREAM_IDS = {
    "data": 1,
    "init": 2,
    "batching": 3,
    "noise": 4,
    "latent": 5,
    "interp": 6,
    "encode": 7,
    "balance": 8,
    "eval": 9,
    "classifier": 10,
    "validation": 11,
    "generate": 12,
}


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Return the PCG64 generator for a named sub-stream of the run seed."""
    if name not in _STREAM_IDS:
        raise KeyError(f"unknown rng stream {name!r}")
    entropy = (int(seed) & 0xFFFFFFFFFFFFFFFF, _STREAM_IDS[name]) + tuple(
        int(k) for k in keys
    )
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
