"""Argument checks shared by the estimators and CLI."""

from __future__ import annotations

import math
import numbers

import numpy as np

__all__ = [
    "check_probability",
    "check_fraction",
    "check_positive_int",
    "check_positive",
    "check_random_state",
    "check_choice",
]


def check_probability(value, name: str) -> float:
    """A float in ``[0, 1]``."""
    if not isinstance(value, numbers.Real) or not 0.0 <= float(value) <= 1.0:
        raise ValueError(f"{name} must be a number in [0, 1], got {value!r}")
    return float(value)


def check_fraction(value, name: str, *, include_zero: bool = False) -> float:
    """A float in ``(0, 1]`` (or ``[0, 1]`` with ``include_zero``)."""
    v = check_probability(value, name)
    if v == 0.0 and not include_zero:
        raise ValueError(f"{name} must be positive, got {value!r}")
    return v


def check_positive_int(value, name: str) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_positive(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not float(value) > 0 or math.isnan(float(value)):
        raise ValueError(f"{name} must be a positive number, got {value!r}")
    return float(value)


def check_random_state(seed) -> np.random.Generator:
    """A numpy ``Generator`` from ``None``, an int, a ``SeedSequence`` or a ``Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def check_choice(value, name: str, choices) -> str:
    if value not in choices:
        raise ValueError(f"{name} must be one of {sorted(choices)}, got {value!r}")
    return value
