"""Sobol low-discrepancy sequence generator, dimensions 1..32.

Direction numbers are the standard Joe-Kuo values (primitive polynomials and
initial m_i per dimension), embedded below so the generator has no runtime
dependency. Points are produced in Gray-code order with 30 fractional bits;
the sequence is fully deterministic and supports O(1) random access, so a
sampler can be fast-forwarded and reproduced exactly.
"""

from __future__ import annotations

import numpy as np

MAXBIT = 30
MAX_DIM = 32

# Joe-Kuo primitive polynomials (coefficient bit patterns, degree = bit
# length - 1) and initial direction numbers for dimensions 1..32. Dimension 1
# is the van der Corput sequence in base 2.
_POLY = [
    1, 3, 7, 11, 13, 19, 25, 37, 41, 47, 55, 59, 61, 67, 91, 97,
    103, 109, 115, 131, 137, 143, 145, 157, 167, 171, 185, 191, 193, 203,
    211, 213,
]
_MINIT = [
    [1],
    [1],
    [1, 3],
    [1, 3, 1],
    [1, 1, 1],
    [1, 1, 3, 3],
    [1, 3, 5, 13],
    [1, 1, 5, 5, 17],
    [1, 1, 5, 5, 5],
    [1, 1, 7, 11, 19],
    [1, 1, 5, 1, 1],
    [1, 1, 1, 3, 11],
    [1, 3, 5, 5, 31],
    [1, 3, 3, 9, 7, 49],
    [1, 1, 1, 15, 21, 21],
    [1, 3, 1, 13, 27, 49],
    [1, 1, 1, 15, 7, 5],
    [1, 3, 1, 15, 13, 25],
    [1, 1, 5, 5, 19, 61],
    [1, 3, 7, 11, 23, 15, 103],
    [1, 3, 7, 13, 13, 15, 69],
    [1, 1, 3, 13, 7, 35, 63],
    [1, 3, 5, 9, 1, 25, 53],
    [1, 3, 1, 13, 9, 35, 107],
    [1, 3, 1, 5, 27, 61, 31],
    [1, 1, 5, 11, 19, 41, 61],
    [1, 3, 5, 3, 3, 13, 69],
    [1, 1, 7, 13, 1, 19, 1],
    [1, 3, 7, 5, 13, 19, 59],
    [1, 1, 3, 9, 25, 29, 41],
    [1, 3, 5, 13, 23, 1, 55],
    [1, 3, 7, 3, 13, 59, 17],
]


def _direction_integers(dim: int) -> np.ndarray:
    """(dim, MAXBIT) direction integers scaled by 2^MAXBIT."""
    v = np.zeros((dim, MAXBIT), dtype=np.int64)
    v[0] = [1 << (MAXBIT - 1 - k) for k in range(MAXBIT)]
    for j in range(1, dim):
        poly = _POLY[j]
        s = poly.bit_length() - 1
        m = _MINIT[j]
        for k in range(s):
            v[j, k] = m[k] << (MAXBIT - 1 - k)
        for k in range(s, MAXBIT):
            new = v[j, k - s] ^ (v[j, k - s] >> s)
            for i in range(1, s):
                if (poly >> (s - i)) & 1:
                    new ^= v[j, k - i]
            v[j, k] = new
    return v


class SobolSampler:
    """Stateful generator over [0, 1]^dim starting at the zero point."""

    def __init__(self, dim: int):
        if not 1 <= dim <= MAX_DIM:
            raise ValueError(f"dimension must be in [1, {MAX_DIM}], got {dim}")
        self.dim = dim
        self._v = _direction_integers(dim)  # (dim, MAXBIT)
        self.reset()

    def reset(self):
        self._x = np.zeros(self.dim, dtype=np.int64)
        self._index = 0
        return self

    @property
    def index(self) -> int:
        return self._index

    def next(self) -> np.ndarray:
        """The next point of the sequence."""
        return self.next_batch(1)[0]

    def next_batch(self, n: int) -> np.ndarray:
        """The next ``n`` points as an (n, dim) array."""
        if n < 0:
            raise ValueError("n must be >= 0")
        out = np.empty((n, self.dim), dtype=np.int64)
        x = self._x
        idx = self._index
        for i in range(n):
            out[i] = x
            # Gray-code update: flip the direction of the lowest zero bit
            c = (~idx & (idx + 1)).bit_length() - 1
            x = x ^ self._v[:, c]
            idx += 1
        self._x = x
        self._index = idx
        return out / float(1 << MAXBIT)

    def skip(self, n: int):
        """Jump so that the next point is element ``n`` of the sequence."""
        if n < 0:
            raise ValueError("n must be >= 0")
        gray = n ^ (n >> 1)
        x = np.zeros(self.dim, dtype=np.int64)
        for b in range(MAXBIT):
            if (gray >> b) & 1:
                x ^= self._v[:, b]
        self._x = x
        self._index = n
        return self


def scale_to(points: np.ndarray, lower, upper) -> np.ndarray:
    """Affine map of unit-cube points onto per-dimension [lower, upper] ranges."""
    points = np.asarray(points, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    return lower + points * (upper - lower)
