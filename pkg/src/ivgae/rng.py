"""Named, reproducible random sub-streams.

Every consumer of randomness (mask generation, parameter init, dropout,
reparameterisation noise) draws from its own stream so that changing one
never shifts the samples seen by another.
"""

import zlib
from dataclasses import dataclass

import numpy as np

STREAMS = ("mask", "init", "reparam", "dropout", "adjacency", "experiment")


def _stream_key(stream: str) -> int:
    return zlib.crc32(stream.encode("utf-8"))


def rng(seed: int, stream: str, *index: int) -> np.random.Generator:
    """Return a generator for ``(seed, stream, *index)``.

    ``index`` lets a stream be split further, e.g. one dropout draw per epoch.
    The mapping depends only on the integers involved, so it is identical
    across platforms.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, _stream_key(stream), *[int(i) for i in index]]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class RngState:
    seed: int
    stream: str

    def generator(self, *index: int) -> np.random.Generator:
        return rng(self.seed, self.stream, *index)
