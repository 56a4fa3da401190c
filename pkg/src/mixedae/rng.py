"""Deterministic random-stream derivation.

All randomness in the package flows from a single master seed. Independent
streams (init draws, per-epoch shuffles, per-tree bootstraps, noise samples)
are derived with SeedSequence spawn keys so adding a consumer never perturbs
the draws of another.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_part(part) -> int:
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"stream path parts must be non-negative, got {part}")
        return int(part)
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "big")
    raise TypeError(f"stream path parts must be int or str, got {type(part).__name__}")


def derive_rng(master_seed: int, *path) -> np.random.Generator:
    """Generator for the stream identified by ``path`` under ``master_seed``.

    Same seed and path always give the same stream; distinct paths give
    independent streams.
    """
    key = tuple(_key_part(p) for p in path)
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=key))


def fold_seed(master_seed: int, fold: int) -> int:
    """Decorrelated non-negative child seed for one cross-validation fold.

    Models trained on the same fold share this seed, so variants that differ
    only in loss weights start from identical encoder initializations.
    """
    return int(derive_rng(master_seed, "fold", fold).integers(0, 2**63))
