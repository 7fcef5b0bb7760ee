"""Named, reproducible RNG substreams.

All randomness in the project flows from one root seed through named
substreams so that components (split, init, dropout, data, ...) can be
varied independently without perturbing each other.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_part(part: str | int) -> int:
    if isinstance(part, int):
        return part & 0xFFFFFFFF
    digest = hashlib.sha256(part.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def substream(root_seed: int, *names: str | int) -> np.random.Generator:
    """Generator for the substream identified by `names` under `root_seed`.

    Stable across processes and platforms: string parts are keyed by a
    sha256 prefix, integer parts are used directly.
    """
    key = tuple(_key_part(n) for n in names)
    return np.random.default_rng(np.random.SeedSequence(entropy=root_seed, spawn_key=key))
