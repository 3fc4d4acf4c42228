"""Keyed random substreams.

Every random draw in a run comes from a generator keyed by the experiment
seed, a purpose tag and indices such as client and round. Streams for
different keys are independent, so execution order cannot change results.
"""

from __future__ import annotations

import numpy as np

INIT = 1
BATCH = 2
NOISE = 3
SYNTH = 4
ESTIMATOR = 5

SERVER = 0  # client keys are offset by one so the server never collides


def substream(seed: int, tag: int, *keys: int) -> np.random.Generator:
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    return np.random.default_rng([int(seed), int(tag), *(int(k) for k in keys)])


def client_key(m: int) -> int:
    return m + 1
