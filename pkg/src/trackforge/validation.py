"""Input validation helpers and deterministic RNG construction."""

import hashlib

import numpy as np

from .errors import PipelineError


def check_finite(arr, name="array"):
    """Raise if ``arr`` contains NaN or infinity."""
    arr = np.asarray(arr)
    if arr.size and not np.isfinite(arr).all():
        raise PipelineError("schema_error", f"{name} contains non-finite values")
    return arr


def check_points(xyz, name="points"):
    """Validate an (N, 3) float coordinate array and return it as float64."""
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise PipelineError("schema_error", f"{name} must have shape (N, 3), got {xyz.shape}")
    return check_finite(xyz, name)


def check_probability(value, name):
    if not 0.0 <= value <= 1.0:
        raise PipelineError("bad_config", f"{name} must be in [0, 1], got {value}")
    return float(value)


def keyed_rng(*parts) -> np.random.Generator:
    """Deterministic generator keyed by a tuple of ints/strings.

    Stable across platforms and process restarts: the key is hashed with
    SHA-256 rather than Python's randomized ``hash``.
    """
    h = hashlib.sha256()
    for part in parts:
        h.update(str(part).encode("utf-8"))
        h.update(b"\x1f")
    seed = int.from_bytes(h.digest()[:8], "little")
    return np.random.default_rng(seed)
