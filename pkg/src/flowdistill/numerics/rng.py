"""Named random streams derived from a master seed.

Every stage asks for ``stream(seed, "stage", ...)``; the names are hashed
into the spawn key of a ``SeedSequence`` feeding a counter-based Philox
generator, so streams are independent of each other and of call order.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _name_key(name: str | int) -> int:
    digest = hashlib.sha256(str(name).encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def stream(seed: int, *names: str | int) -> np.random.Generator:
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_name_key(n) for n in names))
    return np.random.Generator(np.random.Philox(seq))
