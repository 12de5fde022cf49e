"""``mbsbl`` command line: synth, compress, recover, bench.

Errors exit with status 2 and print one JSON line on stderr::

    {"error": "IngestionError", "message": "..."}
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, io
from .model import (
    LogdetMultiplier,
    MatrixKind,
    NoiseReference,
    SolverConfig,
    m_from_cr,
    make_partition_uniform,
)
from .sensing import compress_packet, generate
from .solver import solve
from .transform import make_dictionary


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """Usage errors become the same JSON line as runtime errors."""

    def error(self, message):
        print(json.dumps({"error": "UsageError", "message": f"{self.prog}: {message}"}), file=sys.stderr)
        self.exit(2)


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _ratio(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}")
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"compression ratio must lie in (0, 1), got {v}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _sidecar(path, suffix: str) -> Path:
    p = Path(path)
    return p.with_name(p.name + suffix)


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("solver")
    g.add_argument("--eta", type=_positive_float, default=SolverConfig.eta,
                   help="stop when the best cost decrease falls below this (default %(default)g)")
    g.add_argument("--beta-scale", type=_positive_float, default=SolverConfig.beta_inv_scale,
                   help="noise variance as a fraction of the reference power (default %(default)g)")
    g.add_argument("--noise-reference", choices=[e.value for e in NoiseReference],
                   default=NoiseReference.MEAN_POWER.value)
    g.add_argument("--multiplier", choices=[e.value for e in LogdetMultiplier],
                   default=LogdetMultiplier.CHANNELS.value, help="log|C| weight: channels (P) or rows (N)")
    g.add_argument("--max-iter", type=_positive_int, default=SolverConfig.max_iterations)


def _solver_cfg(args) -> SolverConfig:
    return SolverConfig(eta=args.eta, beta_inv_scale=args.beta_scale, max_iterations=args.max_iter,
                        logdet_multiplier=args.multiplier, noise_reference=args.noise_reference)


# -- subcommands -------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.model == "block-sparse":
        packet, coeffs = bench.synth_block_sparse(args.n, args.p, args.d, args.k, args.seed, args.dict)
    else:
        packet, coeffs = bench.synth_pulse_train(args.n, args.p, args.pulses, args.seed), None
    io.write_packet(args.output, packet, args.format)
    out = {"packet": str(args.output), "n": args.n, "p": args.p}
    if coeffs is not None:
        truth = args.truth or _sidecar(args.output, ".coef" + (".csv" if args.format == "csv" else ".bin"))
        io.write_matrix(truth, coeffs, args.format)
        out["coefficients"] = str(truth)
    print(json.dumps(out))
    return 0


def cmd_compress(args) -> int:
    packet = io.read_packet(args.packet, header=args.header)
    n = packet.n
    if args.m is not None:
        m = args.m
        if m > n:
            raise CliError(f"M={m} exceeds N={n}")
    elif args.cr is not None:
        m = m_from_cr(n, args.cr)
    else:
        raise CliError("give --cr or --m")
    phi = generate(args.matrix, m, n, args.seed)
    y, ops = compress_packet(phi, packet)
    io.write_measurements(args.output, y, args.format)

    matrix_path = args.matrix_info or _sidecar(args.output, ".matrix.json")
    io.write_sensing(matrix_path, phi, explicit=False)
    if args.export_matrix:
        io.write_sensing(args.export_matrix, phi, explicit=True)
    report = {"kind": phi.kind.value, "M": m, "N": n, "P": packet.p, "seed": args.seed,
              "cr": (n - m) / n, **ops.as_dict()}
    ops_path = args.ops or _sidecar(args.output, ".ops.json")
    bench.write_json(ops_path, report)
    print(json.dumps({"measurements": str(args.output), "matrix": str(matrix_path),
                      "ops": str(ops_path), "M": m}))
    return 0


def cmd_recover(args) -> int:
    y = io.read_measurements(args.measurements)
    if args.matrix_info:
        phi = io.read_sensing(args.matrix_info)
    else:
        info = _sidecar(args.measurements, ".matrix.json")
        if args.matrix is None and info.exists():
            phi = io.read_sensing(info)
        elif args.matrix is not None and args.n is not None and args.seed is not None:
            phi = generate(args.matrix, y.m, args.n, args.seed)
        else:
            raise CliError("need --matrix-info, or --matrix/--n/--seed, or a .matrix.json sidecar")
    if phi.rows != y.m:
        raise CliError(f"measurements have {y.m} rows but the sensing matrix has {phi.rows}")
    dictionary = make_dictionary(args.dict, phi.cols)
    part = make_partition_uniform(phi.cols, args.d)
    res = solve(y, phi, dictionary, part, _solver_cfg(args))
    io.write_matrix(args.output, res.signal, args.format)
    summary = res.to_json_dict()
    if args.truth:
        truth = io.read_matrix(args.truth)
        summary["nmse"] = bench.nmse(res.signal, truth)
    result_path = args.result or _sidecar(args.output, ".result.json")
    bench.write_json(result_path, summary)
    print(json.dumps({"signal": str(args.output), "result": str(result_path),
                      "iterations": res.iterations, "converged": res.converged,
                      **({"nmse": summary["nmse"]} if "nmse" in summary else {})}))
    return 0


def _spec_from_args(args) -> bench.ExperimentSpec:
    if args.spec:
        return bench.ExperimentSpec.from_dict(json.loads(Path(args.spec).read_text()))
    model = "file" if args.signal_file else args.model
    return bench.ExperimentSpec(
        n=args.n, p=args.p, d=args.d, cr_list=tuple(args.cr), trials=args.trials, seed=args.seed,
        dictionary=args.dict, signal_model=model, signal_path=args.signal_file,
        signal_header=args.header, k_active=args.k, pulses=args.pulses, matrix=args.matrix,
        solver=_solver_cfg(args),
    )


def cmd_bench(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    printed = {}
    if not args.compressors_only:
        spec = _spec_from_args(args)
        records = bench.run_sweep(spec, workers=args.workers)
        csv_path = out_dir / "trials.csv"
        bench.write_records_csv(records, csv_path, include_timing=not args.no_timing)
        summary = bench.summary_dict(spec, records, include_timing=not args.no_timing)
        bench.write_json(out_dir / "summary.json", summary)
        printed["trials"] = str(csv_path)
        printed["records"] = len(records)
        printed["mean_nmse"] = {str(r["cr"]): r["mean_nmse"] for r in summary["per_cr"]}
    if args.compressors or args.compressors_only:
        report = bench.compare_compressors(args.n, args.levels, args.trials, args.seed, args.compressor_cr)
        bench.write_json(out_dir / "compressors.json", report)
        (out_dir / "compressors.md").write_text(bench.compressor_markdown(report))
        printed["compressors"] = str(out_dir / "compressors.json")
    print(json.dumps(printed))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="mbsbl", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic packet")
    p.add_argument("--model", choices=["block-sparse", "pulse"], default="block-sparse")
    p.add_argument("--n", type=_positive_int, default=256)
    p.add_argument("--p", type=_positive_int, default=8)
    p.add_argument("--d", type=_positive_int, default=8)
    p.add_argument("--k", type=int, default=8, help="active blocks (block-sparse)")
    p.add_argument("--pulses", type=_positive_int, default=6)
    p.add_argument("--dict", choices=["dct", "identity"], default="dct")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["bin", "csv"], default="bin")
    p.add_argument("--truth", help="where to write ground-truth coefficients")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("compress", help="stream a packet through the sensing matrix")
    p.add_argument("packet")
    p.add_argument("--cr", type=_ratio)
    p.add_argument("--m", type=_positive_int)
    p.add_argument("--matrix", choices=[k.value for k in MatrixKind], default="bernoulli")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--header", action="store_true", help="skip one header line of a CSV packet")
    p.add_argument("--format", choices=["bin", "csv"], default="bin")
    p.add_argument("--ops", help="op-count report path (default <output>.ops.json)")
    p.add_argument("--matrix-info", help="matrix descriptor path (default <output>.matrix.json)")
    p.add_argument("--export-matrix", help="also dump the explicit matrix entries here")
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("recover", help="run MBSBL-FM on a measurement file")
    p.add_argument("measurements")
    p.add_argument("--matrix-info", help="matrix descriptor written by compress")
    p.add_argument("--matrix", choices=[k.value for k in MatrixKind])
    p.add_argument("--n", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--d", type=_positive_int, default=8)
    p.add_argument("--dict", choices=["dct", "identity"], default="dct")
    p.add_argument("--truth", help="reference packet; adds NMSE to the result")
    p.add_argument("--format", choices=["bin", "csv"], default="bin")
    p.add_argument("--result", help="result JSON path (default <output>.result.json)")
    p.add_argument("-o", "--output", required=True)
    _add_solver_flags(p)
    p.set_defaults(func=cmd_recover)

    p = sub.add_parser("bench", help="CR sweep and compressor op-count comparison")
    p.add_argument("--spec", help="JSON experiment spec (overrides the sweep flags)")
    p.add_argument("--n", type=_positive_int, default=256)
    p.add_argument("--p", type=_positive_int, default=8)
    p.add_argument("--d", type=_positive_int, default=8)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--pulses", type=_positive_int, default=6)
    p.add_argument("--cr", type=_ratio, nargs="+", default=[0.4, 0.5, 0.6, 0.7, 0.8])
    p.add_argument("--trials", type=_positive_int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--model", choices=["block-sparse", "pulse"], default="block-sparse")
    p.add_argument("--signal-file", help="packet file (CSV or binary) to use instead of synthetic data")
    p.add_argument("--header", action="store_true")
    p.add_argument("--dict", choices=["dct", "identity"], default="dct")
    p.add_argument("--matrix", choices=[k.value for k in MatrixKind], default="bernoulli")
    p.add_argument("--workers", type=_positive_int, help="trial pool size (default $MBSBL_THREADS or 1)")
    p.add_argument("--no-timing", action="store_true", help="leave wall-clock columns out of the outputs")
    p.add_argument("--compressors", action="store_true", help="also write the compressor op-count table")
    p.add_argument("--compressors-only", action="store_true")
    p.add_argument("--levels", type=_positive_int, default=4, help="DWT levels for --compressors")
    p.add_argument("--compressor-cr", type=_ratio, default=0.6, help="CR used to size the CS encoders")
    p.add_argument("--out-dir", default=".")
    _add_solver_flags(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ValueError, OSError, ArithmeticError, RuntimeError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
