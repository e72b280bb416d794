"""Counter-based random streams derived from a master seed.

Every chain, PT level and replicate owns its own ``Generator`` backed by
Philox, spawned from a ``SeedSequence``. Streams never share state, so
results do not depend on the order in which independent work runs.
"""

from __future__ import annotations

import numpy as np

SeedLike = int | np.random.SeedSequence | None


def seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def make_rng(seed: SeedLike) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(seed_sequence(seed)))


def spawn(seed: SeedLike, n: int) -> list[np.random.Generator]:
    """``n`` independent generators derived from ``seed``."""
    return [make_rng(s) for s in seed_sequence(seed).spawn(n)]


def spawn_seeds(seed: SeedLike, n: int) -> list[int]:
    """``n`` derived 64-bit integer seeds, stable for a given master seed."""
    return [int(s.generate_state(1, np.uint64)[0]) for s in seed_sequence(seed).spawn(n)]
