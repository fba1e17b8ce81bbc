"""Command-line interface: fit, infer, predict, and simulate on CSV data.

Input is RFC-4180 CSV with a header row; the label column (default "y")
holds positive integer classes 1..K with the largest label defining K.
Output files are CSV (floats stored with 17 significant digits, so a
write-then-read round-trip is exact) or line-delimited JSON for simulation
reports. Exit codes: 0 success, 2 usage/data error, 3 numerical failure.
Diagnostics go to stderr, data to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .baselines import SeparationError
from .debias import InferenceError, InferenceReport, infer
from .model import CoefficientSet, DataError, Dataset
from .simulate import (ExperimentError, SimulationReport, MetricSet,
                       model_config, run_experiment)
from .solver import fit_cv, predict_batch

USAGE_ERROR = 2
NUMERIC_ERROR = 3
INTERCEPT_NAME = "_intercept"


@dataclass(frozen=True)
class RunConfig:
    """Parsed invocation of one subcommand."""

    command: str
    input_path: Optional[str] = None
    output_path: Optional[str] = None
    coefficients_path: Optional[str] = None
    label_column: str = "y"
    alpha: float = 0.05
    seed: int = 0
    n_folds: int = 10
    method: str = "debiased"
    model_id: int = 1
    n: int = 400
    p: int = 200
    n_reps: int = 200
    n_boot: int = 200
    n_splits: int = 200
    threads: int = 1
    compat_nodewise: bool = False
    standardize: bool = False
    fit_intercepts: bool = False


def _fmt(x: float) -> str:
    """17 significant digits: enough for exact float round-trips."""
    if isinstance(x, float) and np.isnan(x):
        return "NA"
    return format(float(x), ".17g")


def _default_threads() -> int:
    env = os.environ.get("SPARSEMN_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            print(f"warning: ignoring bad SPARSEMN_THREADS={env!r}",
                  file=sys.stderr)
    return 1


def read_csv_dataset(path: str, label_column: str) -> tuple:
    """Parse (Dataset, feature_names) from a CSV file.

    Raises DataError (with the offending line number where possible) for
    malformed input: missing label column, non-numeric cells, non-integer or
    gapped labels, or an empty feature set.
    """
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if label_column not in header:
            raise DataError(f"{path}: label column {label_column!r} not in "
                            f"header {header}")
        y_col = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != y_col]
        if not feature_names:
            raise DataError(f"{path}: no feature columns besides the label")
        rows, labels = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{lineno}: expected {len(header)} "
                                f"fields, got {len(rec)}")
            try:
                vals = [float(v) for i, v in enumerate(rec) if i != y_col]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: non-numeric feature: {exc}")
            try:
                raw = float(rec[y_col])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric label "
                                f"{rec[y_col]!r}")
            if not raw.is_integer() or raw < 1:
                raise DataError(f"{path}:{lineno}: labels must be positive "
                                f"integers, got {rec[y_col]!r}")
            rows.append(vals)
            labels.append(int(raw))
        if not rows:
            raise DataError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    K = int(y.max())
    present = np.unique(y)
    expected = np.arange(1, K + 1)
    if present.size != K or np.any(present != expected):
        missing = sorted(set(expected.tolist()) - set(present.tolist()))
        raise DataError(f"{path}: class gap; labels up to {K} but classes "
                        f"{missing} never occur")
    if K < 2:
        raise DataError(f"{path}: need at least 2 classes, found {K}")
    return Dataset(np.array(rows), y, K), feature_names


def write_coefficients(path: str, beta: CoefficientSet, feature_names: list,
                       lam: float) -> None:
    """Coefficient CSV: metadata comments, then one row per (class, feature)."""
    with open(path, "w", newline="") as fh:
        fh.write("# sparsemn coefficients\n")
        fh.write(f"# num_classes={beta.num_classes}\n")
        fh.write(f"# lambda={_fmt(lam)}\n")
        fh.write(f"# intercepts={int(beta.intercepts is not None)}\n")
        w = csv.writer(fh)
        w.writerow(["class", "feature", "coefficient"])
        for k in range(beta.num_classes - 1):
            if beta.intercepts is not None:
                w.writerow([k + 1, INTERCEPT_NAME, _fmt(beta.intercepts[k])])
            for m, name in enumerate(feature_names):
                w.writerow([k + 1, name, _fmt(beta.contrasts[k, m])])


def read_coefficients(path: str) -> tuple:
    """Inverse of write_coefficients: (CoefficientSet, feature_names, lambda)."""
    meta = {}
    data_lines = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}")
    with fh:
        for line in fh:
            if line.startswith("#"):
                if "=" in line:
                    key, _, val = line[1:].strip().partition("=")
                    meta[key.strip()] = val.strip()
                continue
            data_lines.append(line)
    reader = csv.reader(data_lines)
    header = next(reader, None)
    if header != ["class", "feature", "coefficient"]:
        raise DataError(f"{path}: not a coefficient file")
    try:
        K = int(meta["num_classes"])
        lam = float(meta["lambda"])
        has_icpt = bool(int(meta.get("intercepts", "0")))
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad metadata: {exc}")
    values = {}
    feature_names = []
    for rec in reader:
        if not rec:
            continue
        k, name, val = int(rec[0]), rec[1], float(rec[2])
        values[(k, name)] = val
        if name != INTERCEPT_NAME and k == 1 and name not in feature_names:
            feature_names.append(name)
    p = len(feature_names)
    B = np.zeros((K - 1, p))
    a = np.zeros(K - 1) if has_icpt else None
    for k in range(1, K):
        for m, name in enumerate(feature_names):
            B[k - 1, m] = values[(k, name)]
        if has_icpt:
            a[k - 1] = values[(k, INTERCEPT_NAME)]
    return CoefficientSet(B, K, a), feature_names, lam


def cmd_fit(cfg: RunConfig) -> int:
    data, names = read_csv_dataset(cfg.input_path, cfg.label_column)
    cv, fit = fit_cv(data, n_folds=cfg.n_folds, seed=cfg.seed,
                     fit_intercepts=cfg.fit_intercepts,
                     standardize=cfg.standardize)
    write_coefficients(cfg.output_path, fit.beta, names, fit.lam)
    curve_path = cfg.output_path + ".cv.csv"
    with open(curve_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lambda", "mean_deviance", "se_deviance"])
        for lam, md, sd in zip(cv.lambda_grid.values, cv.mean_cv_deviance,
                               cv.se_cv_deviance):
            w.writerow([_fmt(lam), _fmt(md), _fmt(sd)])
    print(f"lambda_min={_fmt(cv.lambda_min)} support={fit.beta.support_size()} "
          f"converged={fit.converged}")
    print(f"coefficients written to {cfg.output_path}; CV curve to "
          f"{curve_path}", file=sys.stderr)
    return 0


def _render_pvalue(p: float) -> str:
    if np.isnan(p):
        return "NA"
    if p < 1e-16:
        return "< 1e-16"
    return f"{p:.4g}"


def write_inference_report(path: str, report: InferenceReport,
                           feature_names: list) -> None:
    cols = ["class", "feature", "beta_hat", "b_hat", "se", "ci_lower",
            "ci_upper", "p_value", "p_adjusted", "odds_ratio"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for j, (k, m) in enumerate(report.coordinate_labels()):
            if report.available[j]:
                odds = float(np.exp(report.b_hat[j]))
                row = [k, feature_names[m - 1], _fmt(report.beta_hat[j]),
                       _fmt(report.b_hat[j]), _fmt(report.se[j]),
                       _fmt(report.ci_lower[j]), _fmt(report.ci_upper[j]),
                       _fmt(report.p_values[j]), _fmt(report.p_adjusted[j]),
                       _fmt(odds)]
            else:
                row = [k, feature_names[m - 1], _fmt(report.beta_hat[j]),
                       "NA", "NA", "NA", "NA", "NA", "NA", "NA"]
            w.writerow(row)


def cmd_infer(cfg: RunConfig) -> int:
    data, names = read_csv_dataset(cfg.input_path, cfg.label_column)
    report = infer(data, cv_seed=cfg.seed, alpha=cfg.alpha,
                   n_folds=cfg.n_folds, threads=cfg.threads,
                   fit_intercepts=cfg.fit_intercepts,
                   standardize=cfg.standardize,
                   literal_divisor=cfg.compat_nodewise)
    write_inference_report(cfg.output_path, report, names)
    order = np.argsort(np.where(np.isnan(report.p_values), np.inf,
                                report.p_values), kind="stable")
    labels = report.coordinate_labels()
    print(f"{'class':>5} {'feature':>16} {'b_hat':>12} {'odds':>12} "
          f"{'p':>10} {'p_adj':>10}")
    for j in order[: min(10, order.size)]:
        k, m = labels[j]
        if not report.available[j]:
            continue
        print(f"{k:>5} {names[m - 1]:>16} {report.b_hat[j]:>12.4f} "
              f"{np.exp(report.b_hat[j]):>12.4g} "
              f"{_render_pvalue(report.p_values[j]):>10} "
              f"{_render_pvalue(report.p_adjusted[j]):>10}")
    n_unavail = int((~report.available).sum())
    if n_unavail:
        print(f"warning: {n_unavail} coordinates unavailable (see NA rows)",
              file=sys.stderr)
    print(f"report written to {cfg.output_path}", file=sys.stderr)
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    beta, coef_names, _ = read_coefficients(cfg.coefficients_path)
    data, names = read_csv_dataset(cfg.input_path, cfg.label_column)
    if names != coef_names:
        raise DataError(f"feature mismatch: input has {names}, coefficients "
                        f"expect {coef_names}")
    pred = predict_batch(beta, data.features)
    with open(cfg.output_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["y_pred"])
        for v in pred:
            w.writerow([int(v)])
    err = float(np.mean(pred != data.labels))
    print(f"misclassification={_fmt(err)}")
    print(f"predictions written to {cfg.output_path}", file=sys.stderr)
    return 0


def _report_records(report: SimulationReport) -> list:
    head = {"record": "config", "model": report.model_id,
            "method": report.method, "n": report.n, "p": report.p,
            "K": report.K, "alpha": report.alpha, "reps": report.n_reps,
            "seed": report.base_seed, "failures": len(report.failures)}
    recs = [head]
    for name in MetricSet.FIELDS:
        mean, sd = report.metrics[name]
        if np.isnan(mean):
            continue
        recs.append({"record": "metric", "name": name, "mean": mean,
                     "sd": sd, "cell": report.cell(name)})
    return recs


def cmd_simulate(cfg: RunConfig) -> int:
    if cfg.method not in ("debiased", "bootstrap", "multisplit"):
        raise DataError(f"unknown method {cfg.method!r}")
    config = model_config(cfg.model_id, cfg.n, cfg.p)
    report = run_experiment(config, cfg.method, cfg.n_reps, alpha=cfg.alpha,
                            base_seed=cfg.seed, threads=cfg.threads,
                            n_boot=cfg.n_boot, n_splits=cfg.n_splits,
                            cv_folds=cfg.n_folds)
    records = _report_records(report)
    if cfg.output_path:
        with open(cfg.output_path, "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(f"records written to {cfg.output_path}", file=sys.stderr)
    print(f"design {report.model_id} | method {report.method} | "
          f"n={report.n} p={report.p} reps={report.n_reps} "
          f"failures={len(report.failures)}")
    print(f"{'metric':>18} {'mean (sd)':>18}")
    for rec in records:
        if rec["record"] == "metric":
            print(f"{rec['name']:>18} {rec['cell']:>18}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsemn",
        description="Contrast-based l1-penalized multinomial regression: "
                    "estimation, debiased inference, prediction, simulation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(sp, io=True):
        if io:
            sp.add_argument("--input", required=True, help="input CSV path")
            sp.add_argument("--output", required=True, help="output file path")
            sp.add_argument("--label", default="y",
                            help="label column name (default y)")
        sp.add_argument("--seed", type=int, default=0, help="RNG seed")
        sp.add_argument("--folds", type=int, default=10, help="CV folds")
        sp.add_argument("--threads", type=int, default=None,
                        help="worker count (default $SPARSEMN_THREADS or 1)")

    sp = sub.add_parser("fit", help="CV-select lambda and fit coefficients")
    common(sp)
    sp.add_argument("--standardize", action="store_true",
                    help="scale features before fitting")
    sp.add_argument("--intercepts", action="store_true",
                    help="fit unpenalized intercepts")

    sp = sub.add_parser("infer", help="debiased CIs and p-values")
    common(sp)
    sp.add_argument("--alpha", type=float, default=0.05,
                    help="significance level (default 0.05)")
    sp.add_argument("--standardize", action="store_true")
    sp.add_argument("--intercepts", action="store_true")
    sp.add_argument("--compat-nodewise", action="store_true",
                    help="use the literal nodewise divisor Sigma_jj")

    sp = sub.add_parser("predict", help="predict labels from a coefficient file")
    common(sp)
    sp.add_argument("--coefficients", required=True,
                    help="coefficient CSV from 'fit'")

    sp = sub.add_parser("simulate", help="run a Monte-Carlo experiment")
    sp.add_argument("--model", type=int, required=True, choices=(1, 2, 3, 4),
                    help="simulation design id")
    sp.add_argument("--n", type=int, required=True, help="sample size")
    sp.add_argument("--p", type=int, default=200, help="feature count")
    sp.add_argument("--reps", type=int, default=200, help="replications")
    sp.add_argument("--method", default="debiased",
                    choices=("debiased", "bootstrap", "multisplit"))
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--boot", type=int, default=200,
                    help="bootstrap replicates per replication")
    sp.add_argument("--splits", type=int, default=200,
                    help="sample splits per replication")
    sp.add_argument("--output", default=None, help="JSONL output path")
    common(sp, io=False)
    return parser


def _to_config(args: argparse.Namespace) -> RunConfig:
    threads = args.threads if args.threads else _default_threads()
    return RunConfig(
        command=args.command,
        input_path=getattr(args, "input", None),
        output_path=getattr(args, "output", None),
        coefficients_path=getattr(args, "coefficients", None),
        label_column=getattr(args, "label", "y"),
        alpha=getattr(args, "alpha", 0.05),
        seed=args.seed,
        n_folds=args.folds,
        method=getattr(args, "method", "debiased"),
        model_id=getattr(args, "model", 1),
        n=getattr(args, "n", 400),
        p=getattr(args, "p", 200),
        n_reps=getattr(args, "reps", 200),
        n_boot=getattr(args, "boot", 200),
        n_splits=getattr(args, "splits", 200),
        threads=threads,
        compat_nodewise=getattr(args, "compat_nodewise", False),
        standardize=getattr(args, "standardize", False),
        fit_intercepts=getattr(args, "intercepts", False),
    )


COMMANDS = {"fit": cmd_fit, "infer": cmd_infer, "predict": cmd_predict,
            "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    cfg = _to_config(args)
    try:
        return COMMANDS[cfg.command](cfg)
    except (DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except (InferenceError, ExperimentError, SeparationError,
            np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return NUMERIC_ERROR


if __name__ == "__main__":
    sys.exit(main())
