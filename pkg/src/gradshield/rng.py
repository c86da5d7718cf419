"""Deterministic named RNG substreams.

All randomness in a run flows from one global seed.  Substreams are
derived by hashing the seed together with a name path (e.g.
``("attack", image_id, "pgd", radius_index)``), so per-image work
produces identical results whether executed serially or on a pool.
"""

from __future__ import annotations

import hashlib

import numpy as np


def substream(seed, *names):
    """A Generator seeded stably from (seed, *names).

    Names may be ints or strings; the derivation uses SHA-256, so it is
    stable across processes, platforms, and Python hash randomization.
    """
    digest = hashlib.sha256()
    digest.update(str(int(seed)).encode())
    for name in names:
        digest.update(b"/")
        digest.update(str(name).encode())
    entropy = int.from_bytes(digest.digest()[:16], "little")
    return np.random.Generator(np.random.PCG64(entropy))
