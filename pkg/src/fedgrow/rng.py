"""Deterministic random-stream derivation.

Every source of randomness in a run is a named stream derived from the
master seed, so runs are reproducible bit-for-bit and independent
streams never interact (e.g. client selection does not perturb dropout
masks).
"""

import numpy as np

# Stream kinds. Keeping these as small fixed integers (rather than
# hashed strings) makes the derivation stable across Python versions.
INIT = 0      # initial model parameters
SELECT = 1    # per-round client selection
FD_MASK = 2   # per-round federated-dropout masks
CLIENT = 3    # per-(round, client) local training: shuffling + dropout
SWITCH = 4    # per-stage widen mappings
DATA = 5      # dataset synthesis / partitioning


def stream(master_seed: int, *key: int) -> np.random.Generator:
    """Return a generator for the stream identified by ``key``.

    The same (master_seed, key) always yields the same sequence.
    """
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=tuple(key)))
