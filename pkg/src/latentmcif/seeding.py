"""Seed derivation and config hashing.

Every random stream in the pipeline is derived from one master seed plus a
path of stage names / indices, so any stage can be re-run in isolation.
"""

from __future__ import annotations

import hashlib
import json
from typing import Any

import numpy as np

_MASK63 = (1 << 63) - 1


def derive_seed(master: int, *path: Any) -> int:
    """Return a 63-bit seed for ``path`` under ``master``.

    >>> derive_seed(0, "train") == derive_seed(0, "train")
    True
    """
    key = ":".join([str(int(master))] + [str(p) for p in path])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & _MASK63


def rng_for(master: int, *path: Any) -> np.random.Generator:
    return np.random.default_rng(derive_seed(master, *path))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)


def config_digest(config: Any) -> str:
    """Stable sha256 over the canonical JSON form of ``config``."""
    if hasattr(config, "to_dict"):
        config = config.to_dict()
    return hashlib.sha256(canonical_json(config).encode("utf-8")).hexdigest()


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (set, frozenset)):
        return sorted(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")
