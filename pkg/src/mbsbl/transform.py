"""Synthesis dictionaries and the LeGall 5/3 integer lifting DWT."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy.fft import idct

from .sensing import OperationCounter


class DictionaryKind(str, enum.Enum):
    IDENTITY = "identity"
    DCT = "dct"


@dataclass(frozen=True)
class Dictionary:
    """Synthesis operator ``D`` so that a signal is ``x = D @ alpha``."""

    kind: DictionaryKind
    size: int

    def __post_init__(self):
        object.__setattr__(self, "kind", DictionaryKind(self.kind))
        if self.size < 1:
            raise ValueError(f"dictionary size must be positive, got {self.size}")

    @cached_property
    def matrix(self) -> np.ndarray:
        if self.kind is DictionaryKind.IDENTITY:
            d = np.eye(self.size)
        else:
            # column k is the k-th orthonormal DCT-II basis vector
            d = idct(np.eye(self.size), type=2, axis=0, norm="ortho")
        d.setflags(write=False)
        return d

    def synthesize(self, a) -> np.ndarray:
        return synthesize(self, a)

    def analyze(self, x) -> np.ndarray:
        x = _check_rows(self, x)
        if self.kind is DictionaryKind.IDENTITY:
            return np.array(x, dtype=float)
        return self.matrix.T @ x


def identity_dictionary(n: int) -> Dictionary:
    return Dictionary(DictionaryKind.IDENTITY, n)


def dct_dictionary(n: int) -> Dictionary:
    return Dictionary(DictionaryKind.DCT, n)


def make_dictionary(kind, n: int) -> Dictionary:
    return Dictionary(DictionaryKind(kind), n)


def _check_rows(d: Dictionary, a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.shape[0] != d.size:
        raise ValueError(f"dictionary of size {d.size} cannot act on {a.shape[0]} rows")
    return a


def synthesize(d: Dictionary, a) -> np.ndarray:
    a = _check_rows(d, a)
    if d.kind is DictionaryKind.IDENTITY:
        return np.array(a)
    return d.matrix @ a


# -- LeGall 5/3 -------------------------------------------------------------

@dataclass(frozen=True)
class DwtConfig:
    levels: int = 4

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be a positive integer")


@dataclass
class DwtResult:
    coefficients: np.ndarray
    ops: OperationCounter = field(default_factory=OperationCounter)


def _as_int_signal(x, levels: int) -> np.ndarray:
    arr = np.asarray(x)
    if arr.ndim != 1:
        raise ValueError("DWT input must be a 1-D vector")
    if not np.issubdtype(arr.dtype, np.integer):
        if not np.all(np.equal(np.mod(arr, 1), 0)):
            raise ValueError("integer lifting needs integer-valued samples")
    arr = arr.astype(np.int64)
    if arr.size == 0 or arr.size % (1 << levels):
        raise ValueError(f"length {arr.size} is not divisible by 2**{levels}; pad the signal first")
    return arr


def _next_even(s: np.ndarray) -> np.ndarray:
    # x[2n+2]; whole-sample symmetric extension mirrors x[L] onto x[L-2]
    return np.append(s[1:], s[-1])


def _prev_detail(d: np.ndarray) -> np.ndarray:
    # d[n-1]; symmetric extension gives d[-1] = d[0]
    return np.insert(d[:-1], 0, d[0])


def _lift_forward(a: np.ndarray, ops: OperationCounter) -> tuple[np.ndarray, np.ndarray]:
    even, odd = a[0::2], a[1::2]
    d = odd - ((even + _next_even(even)) >> 1)
    s = even + ((_prev_detail(d) + d + 2) >> 2)
    half = even.size
    ops.additions += 2 * half + 3 * half
    ops.shifts += 2 * half
    return s, d


def _lift_inverse(s: np.ndarray, d: np.ndarray, ops: OperationCounter) -> np.ndarray:
    even = s - ((_prev_detail(d) + d + 2) >> 2)
    odd = d + ((even + _next_even(even)) >> 1)
    out = np.empty(2 * s.size, dtype=np.int64)
    out[0::2] = even
    out[1::2] = odd
    half = s.size
    ops.additions += 3 * half + 2 * half
    ops.shifts += 2 * half
    return out


def dwt53_forward_counted(x, cfg: DwtConfig = DwtConfig()) -> DwtResult:
    """Multi-level forward transform with its add/shift tally.

    Coefficients are packed Mallat style: after the last level the vector
    reads ``[approx_L | detail_L | detail_{L-1} | ... | detail_1]``.
    """
    c = _as_int_signal(x, cfg.levels).copy()
    ops = OperationCounter()
    length = c.size
    for _ in range(cfg.levels):
        s, d = _lift_forward(c[:length], ops)
        half = length // 2
        c[:half] = s
        c[half:length] = d
        length = half
    # the transform needs the whole packet, so all of it runs after acquisition
    ops.post_acquisition_ops = ops.arithmetic
    ops.last_sample_ops = ops.arithmetic
    return DwtResult(c, ops)


def dwt53_inverse_counted(c, cfg: DwtConfig = DwtConfig()) -> DwtResult:
    x = _as_int_signal(c, cfg.levels).copy()
    ops = OperationCounter()
    length = x.size >> (cfg.levels - 1)
    for _ in range(cfg.levels):
        half = length // 2
        x[:length] = _lift_inverse(x[:half].copy(), x[half:length].copy(), ops)
        length *= 2
    return DwtResult(x, ops)


def dwt53_forward(x, cfg: DwtConfig = DwtConfig()) -> np.ndarray:
    return dwt53_forward_counted(x, cfg).coefficients


def dwt53_inverse(c, cfg: DwtConfig = DwtConfig()) -> np.ndarray:
    return dwt53_inverse_counted(c, cfg).coefficients
