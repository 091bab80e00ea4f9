"""Deterministic RNG derivation.

All randomness in the pipeline flows from one master seed. Work units
(patients, pair sampling, epochs, dropout) get their own generator derived
from the master seed plus a stable token path, so results never depend on
the order or sharding in which units are processed.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def child_rng(master_seed: int, *tokens: object) -> np.random.Generator:
    """Return a generator keyed by ``master_seed`` and a token path.

    Tokens are hashed with SHA-256, so any printable ids (patient ids,
    stage names, step counters) produce stable, platform-independent
    streams.
    """
    h = hashlib.sha256()
    for tok in tokens:
        h.update(str(tok).encode("utf-8"))
        h.update(b"\x1f")
    digest = h.digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.default_rng([master_seed & _MASK64, *words])
