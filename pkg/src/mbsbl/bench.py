"""Synthetic packets, error metrics and the experiment drivers.

``run_sweep`` reproduces the recovery protocol: for every compression ratio
and trial a fresh two-ones Bernoulli matrix compresses the packet on the
streaming path and MBSBL-FM recovers it in the DCT domain.
``compare_compressors`` tallies the arithmetic each encoder spends on
identical integer packets.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import (
    MatrixKind,
    Packet,
    SolverConfig,
    m_from_cr,
    make_partition_uniform,
)
from .sensing import compress_packet, generate
from .solver import solve
from .transform import (
    DictionaryKind,
    DwtConfig,
    dwt53_forward_counted,
    dwt53_inverse,
    make_dictionary,
)

log = logging.getLogger(__name__)

CSV_FIELDS = ("cr", "trial", "nmse", "wall_time_s", "iterations", "converged")


class UndefinedMetricError(ValueError):
    pass


class IngestionError(ValueError):
    pass


def nmse(xhat, x) -> float:
    """Squared Frobenius error normalised by the reference energy."""
    xhat = np.asarray(xhat, dtype=float)
    x = np.asarray(x, dtype=float)
    if xhat.shape != x.shape:
        raise ValueError(f"shape mismatch {xhat.shape} vs {x.shape}")
    ref = float(np.sum(x * x))
    if ref == 0:
        raise UndefinedMetricError("NMSE is undefined for an all-zero reference")
    return float(np.sum((xhat - x) ** 2) / ref)


def synth_block_sparse(n: int, p: int, d: int, k_active: int, seed: int,
                       dictionary: Optional[str] = "dct") -> tuple[Packet, np.ndarray]:
    """Packet whose DCT coefficients are block sparse with a support shared by all channels."""
    part = make_partition_uniform(n, d)
    if not 0 <= k_active <= part.g:
        raise ValueError(f"k_active must lie in [0, {part.g}], got {k_active}")
    rng = np.random.default_rng(seed)
    a = np.zeros((n, p))
    for b in np.sort(rng.choice(part.g, size=k_active, replace=False)):
        sl = part.slice(int(b))
        a[sl] = rng.standard_normal((sl.stop - sl.start, p))
    x = make_dictionary(dictionary or "identity", n).synthesize(a)
    return Packet(x), a


def synth_pulse_train(n: int, p: int, pulses: int, seed: int,
                      width_range: tuple[float, float] = (1 / 64, 1 / 16)) -> Packet:
    """Smooth ECG-like surrogate: shared Gaussian pulses plus slow baseline wander.

    Pulse widths are fractions of ``n``. Every channel sees the same pulse
    positions with its own gain, so the channels are correlated but not equal.
    """
    if pulses < 1:
        raise ValueError("need at least one pulse")
    rng = np.random.default_rng(seed)
    t = np.arange(n, dtype=float)
    centers = rng.uniform(0, n, size=pulses)
    widths = rng.uniform(width_range[0] * n, width_range[1] * n, size=pulses)
    amps = rng.uniform(0.5, 1.5, size=pulses) * rng.choice([-1.0, 1.0], size=pulses)
    shapes = amps[:, None] * np.exp(-0.5 * ((t[None, :] - centers[:, None]) / widths[:, None]) ** 2)
    gains = rng.uniform(0.3, 1.0, size=(pulses, p))
    x = shapes.T @ gains
    phase = rng.uniform(0, 2 * np.pi, size=p)
    wander = 0.05 * np.sin(2 * np.pi * 0.5 * t[:, None] / n + phase[None, :])
    return Packet(x + wander)


# -- sweep -------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    n: int = 256
    p: int = 8
    d: int = 8
    cr_list: tuple[float, ...] = (0.4, 0.5, 0.6, 0.7, 0.8)
    trials: int = 10
    seed: int = 0
    dictionary: str = "dct"
    signal_model: str = "block-sparse"
    signal_path: Optional[str] = None
    signal_header: bool = False
    k_active: int = 8
    pulses: int = 6
    matrix: str = "bernoulli"
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        object.__setattr__(self, "cr_list", tuple(float(c) for c in self.cr_list))
        if self.n < 1 or self.p < 1 or self.d < 1:
            raise ValueError("n, p and d must be positive")
        if self.trials < 1:
            raise ValueError("trials must be at least 1")
        if not self.cr_list:
            raise ValueError("cr_list is empty")
        for cr in self.cr_list:
            if not 0 < cr < 1:
                raise ValueError(f"compression ratio {cr} outside (0, 1)")
        if self.signal_model not in ("block-sparse", "pulse", "file"):
            raise ValueError(f"unknown signal model {self.signal_model!r}")
        if self.signal_model == "file" and not self.signal_path:
            raise ValueError("file signal model needs signal_path")
        DictionaryKind(self.dictionary)
        MatrixKind(self.matrix)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        d = dict(d)
        if "solver" in d and isinstance(d["solver"], dict):
            d["solver"] = SolverConfig(**d["solver"])
        return cls(**d)


@dataclass(frozen=True)
class TrialRecord:
    cr: float
    trial: int
    nmse: float
    wall_time_s: float
    iterations: int
    converged: bool
    m: int = 0


def trial_seeds(master: int, cr_index: int, trial: int) -> tuple[int, int]:
    """Independent (signal, matrix) seeds for one trial of the sweep."""
    state = np.random.SeedSequence([master, cr_index, trial]).generate_state(2)
    return int(state[0]), int(state[1])


def load_packets(path, n: int, p: int, header: bool = False) -> list[np.ndarray]:
    """Split a packet file into consecutive ``n``-row packets with ``p`` channels."""
    from .io import FormatError, read_matrix

    try:
        data = read_matrix(path, header=header)
    except (OSError, FormatError) as exc:
        raise IngestionError(str(exc)) from exc
    if data.shape[1] != p:
        raise IngestionError(f"{path}: expected {p} channels, found {data.shape[1]}")
    if data.shape[0] < n or data.shape[0] % n:
        raise IngestionError(f"{path}: {data.shape[0]} rows is not a whole number of {n}-sample packets")
    return [data[i:i + n] for i in range(0, data.shape[0], n)]


def _signal(spec: ExperimentSpec, seed: int, packets) -> list[np.ndarray]:
    if spec.signal_model == "block-sparse":
        return [synth_block_sparse(spec.n, spec.p, spec.d, spec.k_active, seed, spec.dictionary)[0].samples]
    if spec.signal_model == "pulse":
        return [synth_pulse_train(spec.n, spec.p, spec.pulses, seed).samples]
    return packets


def _run_trial(spec: ExperimentSpec, cr_index: int, trial: int, packets) -> TrialRecord:
    cr = spec.cr_list[cr_index]
    m = m_from_cr(spec.n, cr)
    sig_seed, mat_seed = trial_seeds(spec.seed, cr_index, trial)
    phi = generate(spec.matrix, m, spec.n, mat_seed)
    dictionary = make_dictionary(spec.dictionary, spec.n)
    part = make_partition_uniform(spec.n, spec.d)
    errs, times, iters, conv = [], [], [], True
    for x in _signal(spec, sig_seed, packets):
        y, _ = compress_packet(phi, x)
        res = solve(y, phi, dictionary, part, spec.solver)
        errs.append(nmse(res.signal, x))
        times.append(res.wall_time_s)
        iters.append(res.iterations)
        conv &= res.converged
    return TrialRecord(cr, trial, float(np.mean(errs)), float(np.mean(times)),
                       int(round(np.mean(iters))), bool(conv), m)


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get("MBSBL_THREADS", "1")))
    except ValueError:
        return 1


def run_sweep(spec: ExperimentSpec, workers: Optional[int] = None) -> list[TrialRecord]:
    """All (CR, trial) recoveries, ordered by CR index then trial index."""
    packets = None
    if spec.signal_model == "file":
        packets = load_packets(spec.signal_path, spec.n, spec.p, spec.signal_header)
    jobs = [(ci, t) for ci in range(len(spec.cr_list)) for t in range(spec.trials)]
    workers = default_workers() if workers is None else workers
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda j: _run_trial(spec, j[0], j[1], packets), jobs))
    return [_run_trial(spec, ci, t, packets) for ci, t in jobs]


def aggregate(records: Sequence[TrialRecord]) -> list[dict]:
    by_cr: dict[float, list[TrialRecord]] = {}
    for r in records:
        by_cr.setdefault(r.cr, []).append(r)
    out = []
    for cr, rs in by_cr.items():
        e = np.array([r.nmse for r in rs])
        out.append({
            "cr": cr,
            "m": rs[0].m,
            "trials": len(rs),
            "mean_nmse": float(e.mean()),
            "median_nmse": float(np.median(e)),
            "max_nmse": float(e.max()),
            "mean_wall_time_s": float(np.mean([r.wall_time_s for r in rs])),
            "mean_iterations": float(np.mean([r.iterations for r in rs])),
            "converged_fraction": float(np.mean([r.converged for r in rs])),
        })
    return out


def records_to_csv(records: Sequence[TrialRecord], include_timing: bool = True) -> str:
    """CSV text; without timing the ``wall_time_s`` column is left blank so reruns compare byte for byte."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([
            repr(r.cr),
            r.trial,
            repr(r.nmse),
            repr(r.wall_time_s) if include_timing else "",
            r.iterations,
            int(r.converged),
        ])
    return buf.getvalue()


def write_records_csv(records, path, include_timing: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(records_to_csv(records, include_timing))


def summary_dict(spec: ExperimentSpec, records: Sequence[TrialRecord], include_timing: bool = True) -> dict:
    spec_d = asdict(spec)
    spec_d["solver"] = {k: (v.value if hasattr(v, "value") else v) for k, v in spec_d["solver"].items()}
    rows = aggregate(records)
    if not include_timing:
        for row in rows:
            row.pop("mean_wall_time_s")
    return {"spec": spec_d, "per_cr": rows}


# -- compressor comparison ---------------------------------------------------

COMPRESSORS = ("DWT", "CS-Gaussian", "CS-Bernoulli")


def compare_compressors(n: int = 256, levels: int = 4, trials: int = 1, seed: int = 0,
                        cr: float = 0.6, amplitude: int = 2048) -> dict:
    """Operation counts of the three encoders on identical single-channel integer packets.

    ``latency_ops`` counts the arithmetic left once the final sample arrives
    (the work of folding that sample in, plus any post-processing). The DWT
    figure covers the lifting transform only; coefficient coding is not
    modelled.
    """
    if n % (1 << levels):
        raise ValueError(f"N={n} is not divisible by 2**{levels}")
    m = m_from_cr(n, cr)
    cfg = DwtConfig(levels)
    totals = {name: {"additions": 0, "multiplications": 0, "shifts": 0,
                     "post_acquisition_ops": 0, "latency_ops": 0} for name in COMPRESSORS}
    checks = {"cs_bernoulli_exact": True, "cs_gaussian_rel_err": 0.0, "dwt_perfect_reconstruction": True}
    rng = np.random.default_rng(seed)
    for t in range(trials):
        x = rng.integers(-amplitude, amplitude, size=n)
        bern = generate(MatrixKind.BERNOULLI, m, n, seed + 2 * t)
        gauss = generate(MatrixKind.GAUSSIAN, m, n, seed + 2 * t + 1)

        yb, ops_b = compress_packet(bern, x)
        yg, ops_g = compress_packet(gauss, x)
        dwt = dwt53_forward_counted(x, cfg)

        checks["cs_bernoulli_exact"] &= bool(np.array_equal(yb.values[:, 0], bern.to_dense() @ x))
        ref = gauss.to_dense() @ x
        checks["cs_gaussian_rel_err"] = max(
            checks["cs_gaussian_rel_err"],
            float(np.linalg.norm(yg.values[:, 0] - ref) / max(np.linalg.norm(ref), 1e-300)))
        checks["dwt_perfect_reconstruction"] &= bool(np.array_equal(dwt53_inverse(dwt.coefficients, cfg), x))

        for name, ops in (("CS-Bernoulli", ops_b), ("CS-Gaussian", ops_g), ("DWT", dwt.ops)):
            for key, val in ops.as_dict().items():
                totals[name][key] += val

    rows = []
    for name in COMPRESSORS:
        row = {"compressor": name}
        row.update({k: v // trials for k, v in totals[name].items()})
        rows.append(row)
    return {"n": n, "m": m, "cr": cr, "levels": levels, "trials": trials, "seed": seed,
            "channels": 1, "compressors": rows, "checks": checks,
            "note": "DWT counts cover the lifting transform only (no coefficient coding)"}


def compressor_markdown(report: dict) -> str:
    cols = ("latency_ops", "additions", "multiplications", "shifts", "post_acquisition_ops")
    lines = ["| compressor | " + " | ".join(cols) + " |",
             "|---|" + "---:|" * len(cols)]
    for row in report["compressors"]:
        lines.append(f"| {row['compressor']} | " + " | ".join(str(row[c]) for c in cols) + " |")
    return "\n".join(lines) + "\n"


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
