"""Deterministic random substreams.

Every random draw in the package comes from a generator keyed by the master
seed plus a tuple of small integers (stream tag, detector index, segment
index, ...). Work can therefore be split or reordered freely without changing
any realisation.
"""

import numpy as np

SOURCE = 0
SOURCE_BACKGROUND = 1
THIN = 2
CHARGE = 3
NOISE_EVENTS = 4
AMPLIFIER = 5
UNPUMPED = 6
REPETITION = 7


def substream(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def derive_seed(seed, *keys):
    """A 63-bit seed derived from ``seed`` and ``keys``."""
    state = np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
