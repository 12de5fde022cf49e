"""Packet, measurement and sensing-matrix file formats.

Binary layout (little endian)::

    b"MBCS" | u32 rows | u32 cols | f64 * rows * cols (row-major)

CSV files hold one sample per row and one channel per column.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import MatrixKind, Measurements, Packet, SensingMatrix

MAGIC = b"MBCS"
_HEADER = struct.Struct("<4sII")


class FormatError(ValueError):
    pass


def write_matrix_bin(path, a) -> None:
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    if a.ndim == 1:
        a = a[:, None]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, a.shape[0], a.shape[1]))
        fh.write(a.tobytes(order="C"))


def read_matrix_bin(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise FormatError(f"{path}: expected {rows}x{cols} float64 payload, got {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(np.float64)


def write_matrix_csv(path, a) -> None:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    np.savetxt(path, a, delimiter=",", fmt="%.17g")


def read_matrix_csv(path, header: bool = False) -> np.ndarray:
    try:
        a = np.loadtxt(path, delimiter=",", skiprows=1 if header else 0, ndmin=2, dtype=np.float64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return a


def _guess_format(path) -> str:
    with open(path, "rb") as fh:
        return "bin" if fh.read(4) == MAGIC else "csv"


def read_matrix(path, fmt: str = "auto", header: bool = False) -> np.ndarray:
    if fmt == "auto":
        fmt = _guess_format(path)
    if fmt == "bin":
        return read_matrix_bin(path)
    if fmt == "csv":
        return read_matrix_csv(path, header=header)
    raise ValueError(f"unknown format {fmt!r}")


def write_matrix(path, a, fmt: str = "bin") -> None:
    if fmt == "bin":
        write_matrix_bin(path, a)
    elif fmt == "csv":
        write_matrix_csv(path, a)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def read_packet(path, fmt: str = "auto", header: bool = False, sample_rate_hz: float = 256.0) -> Packet:
    return Packet(read_matrix(path, fmt, header), sample_rate_hz)


def write_packet(path, packet: Packet, fmt: str = "bin") -> None:
    write_matrix(path, packet.samples, fmt)


def read_measurements(path, fmt: str = "auto") -> Measurements:
    return Measurements(read_matrix(path, fmt))


def write_measurements(path, y: Measurements, fmt: str = "bin") -> None:
    write_matrix(path, y.values, fmt)


def sensing_to_dict(phi: SensingMatrix, explicit: bool = True) -> dict:
    out = {"kind": phi.kind.value, "M": phi.rows, "N": phi.cols, "seed": int(phi.seed)}
    if explicit:
        if phi.kind is MatrixKind.BERNOULLI:
            out["pairs"] = phi.data.tolist()
        else:
            out["entries"] = phi.data.tolist()
    return out


def sensing_from_dict(d: dict) -> SensingMatrix:
    from .sensing import generate

    kind = MatrixKind(d["kind"])
    if kind is MatrixKind.BERNOULLI and "pairs" in d:
        return SensingMatrix(kind, d["M"], d["N"], np.asarray(d["pairs"]), d["seed"])
    if kind is MatrixKind.GAUSSIAN and "entries" in d:
        return SensingMatrix(kind, d["M"], d["N"], np.asarray(d["entries"]), d["seed"])
    return generate(kind, d["M"], d["N"], d["seed"])


def write_sensing(path, phi: SensingMatrix, explicit: bool = True) -> None:
    Path(path).write_text(json.dumps(sensing_to_dict(phi, explicit)) + "\n")


def read_sensing(path) -> SensingMatrix:
    return sensing_from_dict(json.loads(Path(path).read_text()))
