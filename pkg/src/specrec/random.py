"""Named random sub-streams derived from a single seed."""
import numpy as np

STREAMS = {
    "init": 0,
    "shuffle": 1,
    "negatives": 2,
    "splits": 3,
    "synth": 4,
    "power": 5,
}


def rng_for(seed, stream: str) -> np.random.Generator:
    """Generator for ``stream``; streams of the same seed are independent."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(STREAMS[stream],)))
