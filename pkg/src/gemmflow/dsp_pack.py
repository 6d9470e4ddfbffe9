"""Two int8 weights per wide multiplier, with sign-corrected extraction.

The lower weight sits in the low 18 bits; since ``|w2 * a| <= 2**14`` the
low product never reaches bit 17, which leaves one bit to detect a
negative low product and repair the borrow it causes in the high part.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SHIFT = 18
_MOD = 1 << SHIFT
_HALF = 1 << (SHIFT - 1)


def _check_i8(*vals):
    for v in vals:
        if not -128 <= int(v) <= 127:
            raise ValueError(f"{v} is not an int8 value")


@dataclass(frozen=True)
class PackedPair:
    p: int

    def __post_init__(self):
        if abs(self.p) >= 1 << 26:
            raise ValueError("packed operand exceeds 27-bit signed range")


def pack(w1: int, w2: int) -> PackedPair:
    _check_i8(w1, w2)
    return PackedPair(int(w1) * _MOD + int(w2))


def unpack(pp: PackedPair) -> tuple:
    """Recover (w1, w2) from a packed operand."""
    return split(pp.p)


def split(raw):
    """Split a packed product into (high, low) signed parts; works on ints and arrays."""
    low = raw & (_MOD - 1)
    s = raw >> SHIFT
    neg = low >= _HALF
    if isinstance(neg, np.ndarray):
        return s + neg, np.where(neg, low - _MOD, low)
    return (s + 1, low - _MOD) if neg else (s, low)


def packed_mac(pp: PackedPair, a: int) -> tuple:
    """(w1*a, w2*a) from one multiplication of the packed operand by ``a``."""
    _check_i8(a)
    p1, p2 = split(pp.p * int(a))
    return int(p1), int(p2)


def packed_products(w1, w2, a):
    """Vectorised ``packed_mac``: arrays of int8 values (broadcast) -> int64 products."""
    p = np.asarray(w1, dtype=np.int64) * _MOD + np.asarray(w2, dtype=np.int64)
    return split(p * np.asarray(a, dtype=np.int64))


def exhaustive_mismatches(a_values=range(-128, 128)) -> int:
    """Count packed_mac errors over all (w1, w2) pairs for each ``a`` given."""
    w = np.arange(-128, 128, dtype=np.int64)
    w1, w2 = np.meshgrid(w, w, indexing="ij")
    p = w1 * _MOD + w2
    bad = 0
    for a in a_values:
        p1, p2 = split(p * a)
        bad += int(np.count_nonzero((p1 != w1 * a) | (p2 != w2 * a)))
    return bad


def estimate_array_dsps(dim: int, packed: bool) -> int:
    """Multipliers needed by a dim x dim array."""
    if dim < 1:
        raise ValueError("dim must be positive")
    if packed:
        if dim % 2:
            raise ValueError(f"packing pairs adjacent columns; dim={dim} must be even")
        return dim * dim // 2
    return dim * dim
