"""Command-line entry point: ``splinecs {synth,measure,recover,experiment,report}``.

Exit codes: 0 on success, 2 when some sweep cells or intervals failed,
1 on configuration or input errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from collections import defaultdict
from dataclasses import replace

import numpy as np

from .acquisition import IntervalBatch, NoiseModel, add_noise, write_wav
from .experiment import (ConfigError, ExperimentConfig, cell_seeds, load_config, make_ensemble,
                         make_signal, measure_signal, reconstruct_to_grid, run_experiment)
from .recovery import recover_generalized, recover_rd
from .sensing import ensemble_from_csv, ensemble_to_csv, make_sparsity_basis
from .si_model import build_correction_matrix, make_correction_filter
from .spline_core import ExpansionCoefficients

log = logging.getLogger("splinecs")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL = 0, 1, 2


# ---------------------------------------------------------------------------
# small CSV formats


def coefficients_to_csv(d: ExpansionCoefficients) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["shift", "value"])
    for m, v in zip(d.shifts, d.values):
        w.writerow([int(m), repr(float(v))])
    return buf.getvalue()


def coefficients_from_csv(text: str) -> ExpansionCoefficients:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != ["shift", "value"]:
        raise ValueError("expected a 'shift,value' header")
    shifts = np.array([int(r[0]) for r in rows[1:]])
    if shifts.size and np.any(np.diff(shifts) != 1):
        raise ValueError("shifts must be consecutive")
    values = [float(r[1]) for r in rows[1:]]
    return ExpansionCoefficients(values, origin=int(shifts[0]) if shifts.size else 0)


def batch_to_csv(batch: IntervalBatch) -> str:
    """Header ``k,sigma,y_0..y_{M-1}``; one row per interval. ``N`` goes in a first line."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", batch.N])
    w.writerow(["k", "sigma", *(f"y_{i}" for i in range(batch.M))])
    sig = batch.noise_sigma if batch.noise_sigma is not None else np.zeros(batch.K)
    for k in range(batch.K):
        w.writerow([k, repr(float(sig[k])), *(repr(float(v)) for v in batch.y[k])])
    return buf.getvalue()


def batch_from_csv(text: str) -> IntervalBatch:
    rows = list(csv.reader(io.StringIO(text)))
    if len(rows) < 2 or rows[0][0] != "N" or rows[1][:2] != ["k", "sigma"]:
        raise ValueError("not a measurement file")
    N = int(rows[0][1])
    M = len(rows[1]) - 2
    body = rows[2:]
    y = np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), M)
    sig = np.array([float(r[1]) for r in body])
    return IntervalBatch(y, N, noise_sigma=sig)


def _read(path):
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _emit(text: str, out):
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# subcommands


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if getattr(args, "sparsify_wav", None):
        # keep the largest Q DCT coefficients per interval of a user recording
        sig = replace(cfg.signal, kind="wav_file", path=args.sparsify_wav, sparsify=True)
        cfg = replace(cfg, signal=sig)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def cmd_synth(args) -> int:
    cfg = _config(args)
    d, grid = make_signal(cfg, cell_seeds(cfg, args.trial, 0, 0)[0])
    if d is not None:
        _emit(coefficients_to_csv(d), args.out)
    else:
        R = cfg.signal.zoh_ratio
        t = -0.5 + (np.arange(grid.size) + 0.5) / R
        _emit("t,value\n" + "".join(f"{a!r},{b!r}\n" for a, b in zip(t, grid)), args.out)
    return EXIT_OK


def cmd_measure(args) -> int:
    cfg = _config(args)
    M = args.M if args.M is not None else cfg.M[0]
    noise = args.noise if args.noise is not None else cfg.noise[0]
    sig_seed, ens_seed, noise_seed = cell_seeds(cfg, args.trial, 0, M)
    ens = make_ensemble(cfg, M, ens_seed)
    if args.coefficients:
        d, grid = coefficients_from_csv(_read(args.coefficients)), None
    else:
        d, grid = make_signal(cfg, sig_seed)
    batch = add_noise(measure_signal(cfg, d, grid, ens), NoiseModel(noise, noise_seed))
    _emit(batch_to_csv(batch), args.out)
    ens_path = args.ensemble_out or (f"{args.out}.ensemble.csv" if args.out else None)
    if ens_path:
        _emit(ensemble_to_csv(ens), ens_path)
    return EXIT_OK


def cmd_recover(args) -> int:
    cfg = _config(args)
    batch = batch_from_csv(_read(args.measurements))
    ens = ensemble_from_csv(_read(args.ensemble))
    if ens.N != batch.N or ens.N != cfg.N:
        raise ConfigError(f"N mismatch: config {cfg.N}, ensemble {ens.N}, measurements {batch.N}")
    if ens.M != batch.M:
        raise ConfigError(f"ensemble has {ens.M} rows, measurements have {batch.M} channels")
    ref = coefficients_from_csv(_read(args.reference)) if args.reference else None
    kappa = None if cfg.kappa == "auto" else (0.0 if cfg.kappa == "zero" else float(cfg.kappa))
    if cfg.method == "rd_corrected":
        report = recover_rd(batch, ens, make_sparsity_basis(cfg.basis, cfg.N), kappa,
                            make_correction_filter(cfg.p_a, 0), cfg.solver, ref)
    else:
        R = build_correction_matrix(cfg.p_a, cfg.p_s, cfg.N)
        report = recover_generalized(batch, ens, R, make_sparsity_basis(cfg.basis, R.L), kappa,
                                     cfg.solver, ref)
    _emit(coefficients_to_csv(report.d_hat), args.out)
    if args.report:
        _emit(report.to_csv(), args.report)
    if args.grid_out:
        os_ = args.oversample
        g = reconstruct_to_grid(report.d_hat, cfg.p_a, os_, t0=-0.5 + 0.5 / os_,
                                count=batch.K * batch.N * os_)
        if args.grid_out.lower().endswith(".wav"):
            write_wav(args.grid_out, g, args.rate)
        else:
            t = -0.5 + (np.arange(g.size) + 0.5) / os_
            _emit("t,value\n" + "".join(f"{a!r},{b!r}\n" for a, b in zip(t, g)), args.grid_out)
    if ref is not None:
        log.info("SNR %.2f dB (%s)", report.snr_db, "perfect" if report.perfect else "not perfect")
    return EXIT_PARTIAL if any(report.failed) else EXIT_OK


def cmd_experiment(args) -> int:
    cfg = _config(args)
    text, failures = run_experiment(cfg, out=args.out)
    if not (args.out or cfg.output):
        sys.stdout.write(text)
    return EXIT_PARTIAL if failures else EXIT_OK


def summarize_results(text: str) -> str:
    """Average experiment rows over trials, per (method, p_a, p_s, M, noise)."""
    rows = list(csv.DictReader(io.StringIO(text)))
    groups = defaultdict(list)
    for r in rows:
        groups[(r["method"], int(r["p_a"]), int(r["p_s"]), int(r["M"]), float(r["noise"]))].append(r)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "p_a", "p_s", "M", "noise", "cells", "failed_cells",
                "mean_snr_db", "perfect_rate"])
    for key in sorted(groups):
        cells = groups[key]
        ok = [r for r in cells if not r["status"].startswith("error")]
        snr = [float(r["snr_db"]) for r in ok]
        rate = [float(r["perfect_rate"]) for r in ok]
        w.writerow([*key[:4], f"{key[4]:.6f}", len(cells), len(cells) - len(ok),
                    f"{np.mean(snr):.6f}" if snr else "nan",
                    f"{np.mean(rate):.6f}" if rate else "nan"])
    return buf.getvalue()


def cmd_report(args) -> int:
    _emit(summarize_results(_read(args.results)), args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------


def _wav_flag(s):
    s.add_argument("--sparsify-wav", default=None, metavar="PATH",
                   help="use this mono WAV, sparsified to Q DCT terms per interval")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splinecs", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=None, help="override the config's master seed")
    p.add_argument("--out", default=None, help="output path (default: stdout)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the test signal of one trial")
    s.add_argument("--config", required=True)
    s.add_argument("--trial", type=int, default=0)
    _wav_flag(s)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("measure", help="simulate the acquisition of one trial")
    s.add_argument("--config", required=True)
    s.add_argument("--trial", type=int, default=0)
    s.add_argument("--M", type=int, default=None, help="channels (default: first M of the config)")
    s.add_argument("--noise", type=float, default=None, help="noise fraction of sigma_y")
    s.add_argument("--coefficients", default=None, help="coefficient CSV instead of the generator")
    s.add_argument("--ensemble-out", default=None)
    _wav_flag(s)
    s.set_defaults(func=cmd_measure)

    s = sub.add_parser("recover", help="reconstruct from a measurement file")
    s.add_argument("--config", required=True)
    s.add_argument("--measurements", required=True)
    s.add_argument("--ensemble", required=True)
    s.add_argument("--reference", default=None, help="true coefficient CSV for SNR reporting")
    s.add_argument("--report", default=None, help="per-interval report CSV")
    s.add_argument("--grid-out", default=None, help="dense reconstruction (.wav or .csv)")
    s.add_argument("--oversample", type=int, default=8)
    s.add_argument("--rate", type=int, default=192000, help="WAV sample rate for --grid-out")
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("experiment", help="run a sweep from a JSON config")
    s.add_argument("--config", required=True)
    _wav_flag(s)
    s.set_defaults(func=cmd_experiment)

    s = sub.add_parser("report", help="average an experiment CSV over trials")
    s.add_argument("--results", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
