"""
Named random streams derived from one root seed.

Every subsystem asks for its own stream by name ("data", "partition", "init",
"election", "noise", ...) plus optional integer keys (a trainer index, a
repeat number). Streams are spawned from a numpy ``SeedSequence`` whose spawn
key is a stable digest of the name, so adding draws to one subsystem never
shifts the numbers another subsystem sees.
"""

from __future__ import annotations

import hashlib
from typing import Final

import numpy as np

STREAMS: Final[tuple[str, ...]] = (
    "data",
    "partition",
    "init",
    "election",
    "noise",
    "train",
    "drl",
    "link",
)


def _name_key(name: str) -> int:
    # builtin hash() is salted per process; sha256 is not
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:4], "little")


class SeedStreams:
    def __init__(self, seed: int) -> None:
        if seed < 0:
            raise ValueError(f"seed must be non-negative, got {seed}")
        self.seed = int(seed)

    def stream(self, name: str, *keys: int) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(_name_key(name), *(int(k) for k in keys))
        )
        return np.random.Generator(np.random.PCG64(seq))

    def child_seed(self, name: str, *keys: int) -> int:
        """A plain integer seed for code that wants to build its own streams."""
        seq = np.random.SeedSequence(
            entropy=self.seed, spawn_key=(_name_key(name), *(int(k) for k in keys))
        )
        return int(seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
