"""Halton and Sobol low-discrepancy sequences.

Both samplers are pure functions of ``(index, dims)``; ``SamplerState`` is a
small value type that tracks the next index of a stream.

Sobol points use the Gray-code ordering with 32-bit direction numbers from
the Joe-Kuo ``new-joe-kuo-6.21201`` table (first six dimensions), so index 0
is the origin and the sequence matches unscrambled reference
implementations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29)
SOBOL_MAX_DIMS = 6
_BITS = 32

# (degree s, polynomial coefficients a, initial m_1..m_s) for dimensions 2..6;
# dimension 1 uses m_k = 1 for all k
_JOE_KUO = (
    (1, 0, (1,)),
    (2, 1, (1, 3)),
    (3, 1, (1, 3, 1)),
    (3, 2, (1, 1, 1)),
    (4, 1, (1, 1, 3, 3)),
)


def _direction_numbers() -> np.ndarray:
    v = np.zeros((SOBOL_MAX_DIMS, _BITS), dtype=np.uint64)
    for k in range(_BITS):
        v[0, k] = 1 << (_BITS - 1 - k)
    for dim, (s, a, m_init) in enumerate(_JOE_KUO, start=1):
        m = list(m_init)
        for k in range(s, _BITS):
            new = m[k - s] ^ (m[k - s] << s)
            for j in range(1, s):
                if (a >> (s - 1 - j)) & 1:
                    new ^= m[k - j] << j
            m.append(new)
        for k in range(_BITS):
            v[dim, k] = m[k] << (_BITS - 1 - k)
    return v


_V = _direction_numbers()


def _indices(index) -> np.ndarray:
    idx = np.atleast_1d(np.asarray(index, dtype=np.int64))
    if idx.ndim != 1 or np.any(idx < 0):
        raise ContractError("indices must be non-negative integers")
    return idx


def halton(indices, dims: int) -> np.ndarray:
    """Halton points for an array of indices, shape ``(len(indices), dims)``.

    Coordinate ``j`` is the radical inverse of the index in base
    ``PRIMES[j]``, computed as an exact integer fraction.
    """
    if not 1 <= dims <= len(PRIMES):
        raise ContractError(f"Halton supports 1..{len(PRIMES)} dimensions, got {dims}")
    idx = _indices(indices)
    out = np.empty((idx.size, dims))
    for j, base in enumerate(PRIMES[:dims]):
        rest = idx.copy()
        num = np.zeros_like(idx)
        den = np.ones_like(idx)
        while np.any(rest > 0):
            num = num * base + rest % base
            den = den * base
            rest //= base
        out[:, j] = num / den
    return out


def halton_point(index: int, dims: int) -> np.ndarray:
    return halton([index], dims)[0]


def sobol(indices, dims: int) -> np.ndarray:
    """Sobol points (Gray-code order) for an array of indices."""
    if not 1 <= dims <= SOBOL_MAX_DIMS:
        raise ContractError(f"Sobol supports 1..{SOBOL_MAX_DIMS} dimensions (use Halton beyond), got {dims}")
    idx = _indices(indices)
    if np.any(idx >= 2**_BITS):
        raise ContractError("Sobol index exceeds 32-bit range")
    gray = (idx ^ (idx >> 1)).astype(np.uint64)
    acc = np.zeros((idx.size, dims), dtype=np.uint64)
    for k in range(_BITS):
        bit = ((gray >> np.uint64(k)) & np.uint64(1)).astype(bool)
        acc[bit] ^= _V[:dims, k]
    return acc.astype(np.float64) / float(2**_BITS)


def sobol_point(index: int, dims: int) -> np.ndarray:
    return sobol([index], dims)[0]


@dataclass(frozen=True)
class SamplerState:
    kind: str
    dims: int
    index: int = 0

    def __post_init__(self):
        if self.kind not in ("halton", "sobol"):
            raise ContractError(f"unknown sampler {self.kind!r}")
        limit = SOBOL_MAX_DIMS if self.kind == "sobol" else len(PRIMES)
        if not 1 <= self.dims <= limit:
            raise ContractError(f"{self.kind} supports 1..{limit} dimensions")
        if self.index < 0:
            raise ContractError("index must be >= 0")

    def take(self, n: int):
        """Return ``(points, next_state)`` for the next ``n`` indices."""
        idx = np.arange(self.index, self.index + n)
        fn = sobol if self.kind == "sobol" else halton
        return fn(idx, self.dims), SamplerState(self.kind, self.dims, self.index + n)
