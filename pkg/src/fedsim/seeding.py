"""Deterministic RNG streams keyed by (purpose tag, seed, ...extras).

Every stochastic operation in fedsim draws from its own tagged stream so
that subsystems never share or perturb each other's randomness. Repeating
a run with the same seeds reproduces every draw bit for bit.
"""

from __future__ import annotations

import numpy as np

TAG_SYNTH = 1
TAG_SPLIT = 2
TAG_PARTITION = 3
TAG_INIT = 4
TAG_SAMPLE = 5
TAG_LOCAL = 6

_MASK = (1 << 64) - 1


def stream(*key: int) -> np.random.Generator:
    """Generator seeded by the composite integer key (order-sensitive)."""
    return np.random.default_rng([int(k) & _MASK for k in key])
