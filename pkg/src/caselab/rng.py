"""Named random streams derived from one root seed.

Each consumer asks for a stream by name; the stream's seed is a hash of the
name mixed with the root seed, so adding a consumer never shifts another one.
"""
import hashlib

import numpy as np


def stream_key(name: str) -> int:
    return int.from_bytes(hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest(), "little")


def stream(root_seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(root_seed), stream_key(name), *map(int, extra)]))
