"""Counter-based seed splitting.

Every random number in a run is drawn from a generator keyed by
``(master, stream, iteration, index)``, so results do not depend on batch
layout or on how many worker threads share the work.
"""

import numpy as np

TRAIN = 1
EVAL = 2
INIT = 3
REFERENCE = 4
STUDY = 5


def generator(master, *key):
    """Philox generator for the given master seed and key path."""
    seq = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))
