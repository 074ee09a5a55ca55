"""Named random substreams derived from a single experiment seed.

Every source of randomness in a run (data generation, weight init, batch
shuffling, probe vectors) draws from its own labelled stream so that
re-running one stage in isolation reproduces the exact numbers of the full
pipeline.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed: int, label: str) -> np.random.Generator:
    """Generator for the named substream of ``seed``.

    The label is hashed into the seed sequence, so streams with different
    labels are statistically independent and stable across runs and
    platforms.
    """
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    salt = int.from_bytes(digest[:8], "little")
    return np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, salt]))
