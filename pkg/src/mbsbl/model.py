"""Core value types shared across the toolkit.

A packet is an ``N x P`` block of samples, one column per channel. Sensing
matrices, block partitions, solver settings and recovery outputs all live
here so every other module speaks the same vocabulary.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np


class MatrixKind(str, enum.Enum):
    BERNOULLI = "bernoulli"
    GAUSSIAN = "gaussian"


class LogdetMultiplier(str, enum.Enum):
    """Weight placed on ``log|C|`` in the marginal-likelihood cost.

    ``CHANNELS`` (P) gives exactly ``-2 log p(Y)`` up to a constant for the
    matrix-normal measurement model. ``ROWS`` (N) reproduces the literal
    published cost.
    """

    CHANNELS = "channels"
    ROWS = "rows"


class NoiseReference(str, enum.Enum):
    """What ``beta_inv_scale`` multiplies to give the noise variance ``beta^-1``.

    ``MEAN_POWER`` uses ``||Y||_F^2 / (M P)``, the average measurement power,
    so the default 0.01 assumes a 20 dB measurement SNR whatever the packet
    size. ``TOTAL_ENERGY`` uses ``||Y||_F^2`` itself.
    """

    MEAN_POWER = "mean-power"
    TOTAL_ENERGY = "total-energy"


def _as_float_matrix(a, name: str) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must be non-empty, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Packet:
    samples: np.ndarray
    sample_rate_hz: float = 256.0

    def __post_init__(self):
        object.__setattr__(self, "samples", _as_float_matrix(self.samples, "samples"))
        if not self.sample_rate_hz > 0:
            raise ValueError("sample_rate_hz must be positive")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def p(self) -> int:
        return self.samples.shape[1]

    def channel(self, i: int) -> np.ndarray:
        return self.samples[:, i]


@dataclass(frozen=True)
class Measurements:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_float_matrix(self.values, "values"))

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def p(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SensingMatrix:
    """An ``M x N`` sensing operator.

    For ``BERNOULLI`` matrices ``data`` is an ``(N, 2)`` integer array holding
    the row positions of the two ones in every column; for ``GAUSSIAN`` it is
    the dense ``M x N`` matrix itself. Use :mod:`mbsbl.sensing` to build one.
    """

    kind: MatrixKind
    rows: int
    cols: int
    data: np.ndarray
    seed: int = 0

    def __post_init__(self):
        kind = MatrixKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"invalid dimensions {self.rows}x{self.cols}")
        if kind is MatrixKind.BERNOULLI:
            pairs = np.asarray(self.data, dtype=np.int64).copy()
            if pairs.shape != (self.cols, 2):
                raise ValueError(f"index pairs must have shape ({self.cols}, 2), got {pairs.shape}")
            if np.any(pairs < 0) or np.any(pairs >= self.rows):
                raise ValueError("row index out of range")
            if np.any(pairs[:, 0] == pairs[:, 1]):
                raise ValueError("the two ones of a column must sit on distinct rows")
            pairs.setflags(write=False)
            object.__setattr__(self, "data", pairs)
        else:
            dense = np.asarray(self.data, dtype=np.float64).copy()
            if dense.shape != (self.rows, self.cols):
                raise ValueError(f"dense data must be {self.rows}x{self.cols}, got {dense.shape}")
            dense.setflags(write=False)
            object.__setattr__(self, "data", dense)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def to_dense(self) -> np.ndarray:
        if self.kind is MatrixKind.GAUSSIAN:
            return np.array(self.data)
        phi = np.zeros((self.rows, self.cols))
        cols = np.arange(self.cols)
        phi[self.data[:, 0], cols] = 1.0
        phi[self.data[:, 1], cols] = 1.0
        return phi

    def column(self, k: int) -> np.ndarray:
        if self.kind is MatrixKind.GAUSSIAN:
            return np.array(self.data[:, k])
        col = np.zeros(self.rows)
        col[self.data[k]] = 1.0
        return col

    @classmethod
    def bernoulli_from_dense(cls, phi, seed: int = 0) -> "SensingMatrix":
        """Recover the index-pair form of a dense 0/1 matrix with two ones per column."""
        phi = np.asarray(phi)
        if not np.all((phi == 0) | (phi == 1)):
            raise ValueError("matrix is not binary")
        counts = phi.sum(axis=0)
        if np.any(counts != 2):
            raise ValueError("every column must contain exactly two ones")
        # row indices of the ones, column by column, ascending
        rows = np.nonzero(phi.T)[1].reshape(phi.shape[1], 2)
        return cls(MatrixKind.BERNOULLI, phi.shape[0], phi.shape[1], rows, seed)


@dataclass(frozen=True)
class BlockPartition:
    sizes: tuple[int, ...]

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.sizes)
        if len(sizes) < 1:
            raise ValueError("a partition needs at least one block")
        if any(s < 1 for s in sizes):
            raise ValueError("block sizes must be positive")
        object.__setattr__(self, "sizes", sizes)

    @property
    def n(self) -> int:
        return sum(self.sizes)

    @property
    def g(self) -> int:
        return len(self.sizes)

    @cached_property
    def starts(self) -> tuple[int, ...]:
        out, acc = [], 0
        for s in self.sizes:
            out.append(acc)
            acc += s
        return tuple(out)

    def slice(self, i: int) -> slice:
        start = self.starts[i]
        return slice(start, start + self.sizes[i])

    def indices(self, i: int) -> np.ndarray:
        sl = self.slice(i)
        return np.arange(sl.start, sl.stop)


def make_partition_uniform(n: int, d: int) -> BlockPartition:
    """Split ``n`` rows into blocks of ``d``; the last block takes the remainder."""
    if n < 1 or d < 1:
        raise ValueError(f"need n >= 1 and d >= 1, got n={n}, d={d}")
    full, rem = divmod(n, d)
    sizes = [d] * full + ([rem] if rem else [])
    return BlockPartition(tuple(sizes))


def m_from_cr(n: int, cr: float) -> int:
    """Number of measurements for compression ratio ``cr = (N - M) / N``."""
    if not 0 < cr < 1:
        raise ValueError(f"compression ratio must lie in (0, 1), got {cr}")
    return max(1, int(round(n * (1.0 - cr))))


@dataclass(frozen=True)
class SolverConfig:
    eta: float = 1e-5
    beta_inv_scale: float = 0.01
    max_iterations: int = 1000
    gamma_floor: float = 1e-12
    logdet_multiplier: LogdetMultiplier = LogdetMultiplier.CHANNELS
    noise_reference: NoiseReference = NoiseReference.MEAN_POWER

    def __post_init__(self):
        object.__setattr__(self, "logdet_multiplier", LogdetMultiplier(self.logdet_multiplier))
        object.__setattr__(self, "noise_reference", NoiseReference(self.noise_reference))
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not self.beta_inv_scale > 0 or not math.isfinite(self.beta_inv_scale):
            raise ValueError("beta_inv_scale must be a positive finite number")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if not self.gamma_floor > 0:
            raise ValueError("gamma_floor must be positive")

    def noise_variance(self, y: np.ndarray) -> float:
        energy = float(np.sum(y * y))
        if self.noise_reference is NoiseReference.MEAN_POWER:
            energy /= y.size
        return self.beta_inv_scale * energy

    def multiplier(self, n: int, p: int) -> int:
        return p if self.logdet_multiplier is LogdetMultiplier.CHANNELS else n


@dataclass
class RecoveryResult:
    coefficients: np.ndarray
    signal: np.ndarray
    gamma: np.ndarray
    cost_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    wall_time_s: float = 0.0
    converged: bool = True
    skipped_blocks: int = 0
    sigma: Optional[np.ndarray] = None
    active: tuple[int, ...] = ()

    def to_json_dict(self) -> dict:
        return {
            "gamma": [float(g) for g in self.gamma],
            "cost_trace": [float(c) for c in self.cost_trace],
            "iterations": int(self.iterations),
            "wall_time_s": float(self.wall_time_s),
            "converged": bool(self.converged),
            "active_blocks": [int(i) for i in self.active],
            "skipped_blocks": int(self.skipped_blocks),
        }
