import hashlib
import math
import re
from typing import Sequence, Tuple

import numpy as np


def is_valid_domain_id(domain_id: str) -> bool:
    if not isinstance(domain_id, str):
        return False
    if not (1 <= len(domain_id) <= 32):
        return False
    if not re.match(r"^[A-Za-z0-9_-]+$", domain_id):
        return False
    return True


def is_valid_sample_id(sample_id: str) -> bool:
    if not isinstance(sample_id, str) or not sample_id:
        return False
    if any(c in sample_id for c in ['/', '\\', '\n', '\r', '\t']):
        return False
    return re.match(r"^[A-Za-z0-9_.-]+$", sample_id) is not None


def is_one_hot(target: np.ndarray, axis: int = 1) -> bool:
    if target.size == 0:
        return False
    if not np.all((target == 0) | (target == 1)):
        return False
    return bool(np.all(target.sum(axis=axis) == 1))


def validate_spacing(spacing: Sequence[float]) -> Tuple[bool, str]:
    """
    Check a per-axis pixel spacing in mm.

    Returns:
        tuple: (is_valid, error_message)
    """
    if len(spacing) != 2:
        return False, f"Spacing must have two entries, got {len(spacing)}"
    for value in spacing:
        if not math.isfinite(value) or value <= 0:
            return False, f"Spacing entries must be positive and finite, got {tuple(spacing)}"
    return True, ""


def round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def derive_seed(*parts: int) -> int:
    """Mix integer parts into a single 32-bit seed, independent of call order elsewhere."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def array_fingerprint(array: np.ndarray) -> str:
    digest = hashlib.sha256()
    digest.update(str(array.dtype).encode())
    digest.update(str(array.shape).encode())
    digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()
