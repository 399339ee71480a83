"""Keyed random streams.

Every stream is derived from (master seed, purpose, index...) so the draws a
component sees do not depend on what other components consumed or on the
order in which independent cells are executed.
"""

import numpy as np

_PURPOSES = {"sample": 1, "attack": 2, "solver": 3, "cover": 4, "misc": 5}


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    key = (_PURPOSES[purpose],) + tuple(int(i) for i in index)
    ss = np.random.SeedSequence(int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
