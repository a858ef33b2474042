"""Root-seed forking.

Every random stream in a run derives from one integer seed plus a fixed tuple
of string labels, so adding a new consumer never shifts an existing stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _label_words(labels: tuple[str, ...]) -> list[int]:
    digest = hashlib.sha256("\x1f".join(labels).encode()).digest()
    return [int.from_bytes(digest[i:i + 4], "little") for i in range(0, 16, 4)]


def fork(seed: int, *labels: str) -> np.random.Generator:
    """Return an independent generator for ``(seed, labels)``."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_label_words(labels))
    return np.random.Generator(np.random.PCG64(ss))


def fork_seed(seed: int, *labels: str) -> int:
    """Derive a child integer seed, for APIs that take a plain seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=_label_words(labels))
    return int(ss.generate_state(1, np.uint64)[0])
