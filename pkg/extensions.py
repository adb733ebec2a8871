import os
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from dotenv import load_dotenv

load_dotenv()


class SeedStream:
    """
    Splittable, counter-based random stream.

    A stream is identified by (seed, key). Children extend the key, so the
    draws made for iteration k of replicate s never depend on how many
    draws other iterations or workers consumed.
    """

    def __init__(self, seed, key=()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)

    def spawn(self, *key):
        return SeedStream(self.seed, self.key + tuple(int(k) for k in key))

    def generator(self):
        sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.key)
        return np.random.Generator(np.random.Philox(sequence))

    def __eq__(self, other):
        return isinstance(other, SeedStream) and (self.seed, self.key) == (other.seed, other.key)

    def __hash__(self):
        return hash((self.seed, self.key))

    def __repr__(self):
        return f'<SeedStream {self.seed}:{"/".join(map(str, self.key)) or "root"}>'


def as_generator(rng):
    """Return (numpy Generator, provenance seed) for a stream or a Generator."""
    if isinstance(rng, SeedStream):
        return rng.generator(), rng.seed
    if isinstance(rng, np.random.Generator):
        return rng, -1
    if isinstance(rng, (int, np.integer)):
        return SeedStream(int(rng)).generator(), int(rng)
    raise TypeError(f'Expected a SeedStream, Generator or integer seed, got {type(rng).__name__}')


def as_stream(rng):
    """Coerce an integer seed or a Generator into a splittable SeedStream."""
    if isinstance(rng, SeedStream):
        return rng
    if isinstance(rng, (int, np.integer)):
        return SeedStream(int(rng))
    if isinstance(rng, np.random.Generator):
        return SeedStream(int(rng.integers(2 ** 63)))
    raise TypeError(f'Expected a SeedStream, Generator or integer seed, got {type(rng).__name__}')


def worker_count():
    """Replicate worker count from MCEM_WORKERS, defaulting to available CPUs."""
    configured = os.environ.get('MCEM_WORKERS')
    if configured:
        return max(1, int(configured))
    try:
        return max(1, len(os.sched_getaffinity(0)))
    except AttributeError:
        return os.cpu_count() or 1


def worker_pool(workers=None):
    return ProcessPoolExecutor(max_workers=workers or worker_count())
