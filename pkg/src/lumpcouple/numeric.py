"""Global numeric mode: exact rationals or floats with a tolerance.

All probabilities and matrix entries in the package are plain Python
numbers, either :class:`fractions.Fraction` (exact mode) or ``float``
(float mode).  The mode is selected once per run; exact mode is the
reference path that reproduces published tables without rounding.
"""
from __future__ import annotations

import os
from contextlib import contextmanager
from fractions import Fraction

EXACT = "exact"
FLOAT = "float"

DEFAULT_EPS = 1e-12

_mode = EXACT
_eps = DEFAULT_EPS

Scalar = Fraction | float | int


def set_mode(mode: str, eps: float = DEFAULT_EPS) -> None:
    """Select the numeric mode ("exact" or "float") and the float tolerance."""
    global _mode, _eps
    if mode not in (EXACT, FLOAT):
        raise ValueError(f"unknown numeric mode {mode!r}")
    _mode = mode
    _eps = eps


def mode() -> str:
    return _mode


def eps() -> float:
    """Comparison tolerance: 0 in exact mode, the configured eps in float mode."""
    return 0.0 if _mode == EXACT else _eps


def is_exact() -> bool:
    return _mode == EXACT


@contextmanager
def numeric_mode(mode_name: str, eps_value: float = DEFAULT_EPS):
    """Temporarily switch the numeric mode (used heavily by tests)."""
    global _mode, _eps
    prev = (_mode, _eps)
    set_mode(mode_name, eps_value)
    try:
        yield
    finally:
        _mode, _eps = prev


def mode_from_env() -> str | None:
    """Read the LUMPCOUPLE_NUMERIC override, if set."""
    val = os.environ.get("LUMPCOUPLE_NUMERIC")
    if val is None:
        return None
    val = val.strip().lower()
    if val not in (EXACT, FLOAT):
        raise ValueError(f"LUMPCOUPLE_NUMERIC must be 'exact' or 'float', got {val!r}")
    return val


def scalar(x) -> Scalar:
    """Coerce a number to the current mode's scalar type.

    In exact mode floats are converted by their exact binary value, so
    dyadic inputs like 0.25 stay exact; non-dyadic probabilities should
    be given as Fraction or "p/q" strings.
    """
    if _mode == EXACT:
        if isinstance(x, Fraction):
            return x
        if isinstance(x, int):
            return Fraction(x)
        if isinstance(x, float):
            return Fraction(x)
        raise TypeError(f"cannot coerce {type(x).__name__} to an exact scalar")
    return float(x)


def parse_number(x) -> Scalar:
    """Parse a JSON-level number: "p/q" strings are exact, bare numbers floats."""
    if isinstance(x, str):
        frac = Fraction(x)
        return frac if _mode == EXACT else float(frac)
    return scalar(x)


def format_number(x: Scalar):
    """JSON-level rendering: lowest-terms "p/q" for rationals, bare floats."""
    if isinstance(x, Fraction):
        return str(x)
    if isinstance(x, int):
        return str(Fraction(x))
    return float(x)


def zero() -> Scalar:
    return Fraction(0) if _mode == EXACT else 0.0


def one() -> Scalar:
    return Fraction(1) if _mode == EXACT else 1.0


def is_zero(x: Scalar) -> bool:
    return abs(x) <= eps()


def is_close(a: Scalar, b: Scalar) -> bool:
    return abs(a - b) <= eps()
