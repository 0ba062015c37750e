"""
Named random sub-streams derived from the single run seed.

Each component draws from its own stream so that ablating one (e.g. switching
off gradient quantization) does not shift the draws seen by the others.
"""
import numpy as np

STREAMS = {
    'weights': 0,
    'data': 1,
    'random_k': 2,
    'rounding': 3,
    'synthetic': 4,
}


def stream(seed, name):
    """Return a fresh Generator for the named sub-stream of `seed`."""
    if name not in STREAMS:
        raise KeyError(f"Unknown random stream '{name}'")
    sequence = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=(STREAMS[name],))
    return np.random.Generator(np.random.PCG64(sequence))


class RandomStreams:
    """Lazily created generators, one per named stream, for one run."""

    def __init__(self, seed):
        self.seed = int(seed)
        self._generators = {}

    def __getitem__(self, name):
        if name not in self._generators:
            self._generators[name] = stream(self.seed, name)
        return self._generators[name]
