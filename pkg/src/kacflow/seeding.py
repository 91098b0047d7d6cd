"""Deterministic random-stream derivation.

Every stochastic routine in the package takes a ``numpy.random.Generator``.
Replica ensembles derive one independent stream per replica from a single
64-bit experiment seed via ``SeedSequence(seed, spawn_key=(index,))``; the
map (seed, index) -> stream is fixed, so reruns are bit-reproducible and
distinct replicas never share a stream.
"""

import numpy as np


def rng_from_seed(seed: int) -> np.random.Generator:
    """Root generator for an experiment."""
    return np.random.default_rng(np.random.SeedSequence(seed))


def replica_rng(seed: int, index: int) -> np.random.Generator:
    """Independent generator for replica ``index`` of experiment ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))
