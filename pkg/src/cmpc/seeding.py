"""Named RNG substreams derived from a single master seed.

Every source of randomness in the project (data generation, splits, weight
init, epoch shuffles, clustering restarts, trial sampling) pulls from its own
named substream, so two runs that share a seed differ only where their
configs differ.
"""
import hashlib

import numpy as np


def _name_key(name) -> int:
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(seed: int, *names) -> np.random.Generator:
    """Return the generator for the substream identified by ``names``.

    Deterministic in (seed, names); independent streams for distinct names.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    keys = [int(seed)] + [_name_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(keys))
