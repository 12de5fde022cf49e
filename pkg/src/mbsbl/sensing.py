"""Seeded sensing matrices and the sample-by-sample streaming compressor.

The streaming path mirrors what a low-power encoder does: the measurement
accumulator starts at zero and every incoming sample row adds
``phi_k * row`` to it. With a two-ones-per-column Bernoulli matrix that is two
row additions per channel and no multiplications, and the measurements are
final the moment the last sample arrives.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import MatrixKind, Measurements, Packet, SensingMatrix


class PacketOverflowError(RuntimeError):
    pass


class IncompletePacketError(RuntimeError):
    pass


def generate_bernoulli(m: int, n: int, seed: int) -> SensingMatrix:
    """Binary ``m x n`` matrix with exactly two ones per column.

    The two rows of each column are drawn uniformly without replacement.
    """
    if m < 2:
        raise ValueError(f"need at least 2 rows to place two distinct ones, got M={m}")
    if n < 1:
        raise ValueError(f"need N >= 1, got {n}")
    rng = np.random.default_rng(seed)
    first = rng.integers(0, m, size=n)
    second = rng.integers(0, m - 1, size=n)
    second += second >= first
    pairs = np.sort(np.stack([first, second], axis=1), axis=1)
    return SensingMatrix(MatrixKind.BERNOULLI, m, n, pairs, seed)


def generate_gaussian(m: int, n: int, seed: int) -> SensingMatrix:
    if m < 1 or n < 1:
        raise ValueError(f"invalid dimensions {m}x{n}")
    rng = np.random.default_rng(seed)
    return SensingMatrix(MatrixKind.GAUSSIAN, m, n, rng.standard_normal((m, n)), seed)


def generate(kind, m: int, n: int, seed: int) -> SensingMatrix:
    kind = MatrixKind(kind)
    if kind is MatrixKind.BERNOULLI:
        return generate_bernoulli(m, n, seed)
    return generate_gaussian(m, n, seed)


@dataclass
class OperationCounter:
    additions: int = 0
    multiplications: int = 0
    shifts: int = 0
    post_acquisition_ops: int = 0
    # arithmetic spent on the final sample of the packet plus anything after it
    last_sample_ops: int = 0

    @property
    def arithmetic(self) -> int:
        return self.additions + self.multiplications + self.shifts

    def as_dict(self) -> dict:
        return {
            "additions": self.additions,
            "multiplications": self.multiplications,
            "shifts": self.shifts,
            "post_acquisition_ops": self.post_acquisition_ops,
            "latency_ops": self.last_sample_ops,
        }


@dataclass
class StreamState:
    phi: SensingMatrix
    accumulator: np.ndarray
    samples_seen: int = 0
    ops: OperationCounter = field(default_factory=OperationCounter)

    @property
    def complete(self) -> bool:
        return self.samples_seen == self.phi.cols


def stream_init(phi: SensingMatrix, p: int) -> StreamState:
    if p < 1:
        raise ValueError(f"need P >= 1, got {p}")
    return StreamState(phi, np.zeros((phi.rows, p)))


def stream_push(state: StreamState, row) -> StreamState:
    """Fold one multichannel sample into the accumulator (in place)."""
    phi = state.phi
    k = state.samples_seen
    if k >= phi.cols:
        raise PacketOverflowError(f"packet already holds all {phi.cols} samples")
    row = np.asarray(row, dtype=np.float64).reshape(-1)
    p = state.accumulator.shape[1]
    if row.shape[0] != p:
        raise ValueError(f"sample row has {row.shape[0]} channels, stream expects {p}")

    before = state.ops.arithmetic
    if phi.kind is MatrixKind.BERNOULLI:
        r1, r2 = phi.data[k]
        state.accumulator[r1] += row
        state.accumulator[r2] += row
        state.ops.additions += 2 * p
    else:
        state.accumulator += np.outer(phi.data[:, k], row)
        state.ops.multiplications += phi.rows * p
        state.ops.additions += phi.rows * p
    state.samples_seen = k + 1
    if state.complete:
        state.ops.last_sample_ops = state.ops.arithmetic - before
    return state


def stream_finish(state: StreamState) -> Measurements:
    if not state.complete:
        raise IncompletePacketError(
            f"packet incomplete: {state.samples_seen} of {state.phi.cols} samples pushed")
    # nothing left to compute: the accumulator is already the measurement matrix
    state.ops.post_acquisition_ops = 0
    return Measurements(state.accumulator.copy())


def compress_packet(phi: SensingMatrix, packet: Packet | np.ndarray) -> tuple[Measurements, OperationCounter]:
    """Stream a whole packet through the compressor, one sample row at a time."""
    x = packet.samples if isinstance(packet, Packet) else np.asarray(packet, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] != phi.cols:
        raise ValueError(f"packet has {x.shape[0]} samples, sensing matrix expects {phi.cols}")
    state = stream_init(phi, x.shape[1])
    for row in x:
        stream_push(state, row)
    return stream_finish(state), state.ops
