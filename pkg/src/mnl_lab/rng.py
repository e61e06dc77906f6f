"""Seeded random streams.

Every run seed is split into named substreams (instance, contexts, choices,
policy, ...) with ``numpy.random.SeedSequence`` and fed to the counter-based
Philox4x64 generator.  The purpose name is hashed with CRC32 into the spawn key,
so a stream depends only on (seed, purpose) and adding a new purpose never
shifts an existing one.  Philox output is specified bit-for-bit, so traces
replay identically across platforms.
"""
import zlib

import numpy as np

PURPOSES = ("instance", "contexts", "choices", "policy")


def purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def substream(seed: int, purpose: str) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(int(seed), spawn_key=(purpose_key(purpose),))
    return np.random.Generator(np.random.Philox(ss))
