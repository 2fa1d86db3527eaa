"""
Command-line interface: ``iwgvem fit | study | elbo``.

Exit status: 0 success, 2 usage error, 3 data error, 4 numerical failure.

Options may also come from a flat JSON file (``--config``) whose keys are
the long option names with dashes or underscores; options given on the
command line override the file.
"""

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .adam import AdamConfig, LearningRateSelectionError
from .gvem import CONFIRMATORY, EXPLORATORY, GvemConfig
from .iw import IwConfig
from .model import DomainError, LoadingStructure
from .pipeline import FitConfig, fit
from .simstudy import DesignError, METHODS, StudyDesign, elbo_experiment, paper_grid, run_study
from .simstudy import aggregate, write_records, write_summary, StudyResult

logger = logging.getLogger("iwgvem")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# input parsing
# --------------------------------------------------------------------------


def _is_number(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def read_matrix(path, what):
    """Numeric CSV with an optional header row (detected by parsing)."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise DataError(f"cannot read {what} file {path}: {exc.strerror}") from exc
    if rows and not all(_is_number(c) for c in rows[0]):
        rows = rows[1:]
    if not rows:
        raise DataError(f"malformed {what} CSV {path}: no data rows")
    width = len(rows[0])
    for n, r in enumerate(rows, 1):
        if len(r) != width:
            raise DataError(f"malformed {what} CSV {path}: row {n} has {len(r)} fields, expected {width}")
    try:
        return np.array([[float(c) for c in r] for r in rows])
    except ValueError as exc:
        raise DataError(f"malformed {what} CSV {path}: non-numeric entry ({exc})") from exc


def read_responses(path):
    Y = read_matrix(path, "response")
    if not np.all((Y == 0) | (Y == 1)):
        raise DataError(f"response file {path} has entries other than 0 and 1")
    return Y


def parse_structure(spec, n_items):
    """``exploratory:K`` or a CSV mask; returns (mode, structure-or-K)."""
    if spec.startswith("exploratory:"):
        try:
            K = int(spec.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad structure {spec!r}; expected exploratory:K") from None
        if K < 1:
            raise UsageError("number of factors must be positive")
        return EXPLORATORY, K
    mask = read_matrix(spec, "structure")
    if not np.all((mask == 0) | (mask == 1)):
        raise DataError(f"structure file {spec} has entries other than 0 and 1")
    if mask.shape[0] != n_items:
        raise DataError(
            f"dimension mismatch: structure has {mask.shape[0]} rows but responses have {n_items} columns"
        )
    try:
        return CONFIRMATORY, LoadingStructure(mask)
    except DomainError as exc:
        raise DataError(f"invalid structure: {exc}") from exc


# --------------------------------------------------------------------------
# outputs
# --------------------------------------------------------------------------


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def write_table(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in np.atleast_2d(rows):
            w.writerow([repr(float(v)) for v in r])


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def write_manifest(out, command, config, seed, inputs, outputs, started):
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "inputs": {p: sha256(p) for p in inputs},
        "outputs": {os.path.basename(p): sha256(p) for p in outputs},
        "started": started,
        "finished": _now(),
    }
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _floats(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


# (name, type, default, help) per subcommand; defaults are applied after the
# config file so that only explicit flags override it
_COMMON = [
    ("seed", int, 0, "root random seed"),
    ("threads", int, None, "worker/BLAS thread cap (default: all CPUs)"),
    ("out", str, None, "output directory"),
]
_FIT_OPTS = [
    ("n_outer", int, 10, "S, importance-sampling groups per person"),
    ("n_inner", int, 10, "M, draws per group"),
    ("gvem_tol", float, 1e-4, "GVEM convergence tolerance"),
    ("gvem_max_iter", int, 500, "GVEM iteration cap"),
    ("iw_tol", float, 1e-4, "IW ascent convergence tolerance"),
    ("iw_max_iter", int, 200, "IW ascent step cap (0 = GVEM only)"),
    ("lr_grid", _floats, (0.01, 0.05, 0.1, 0.5), "candidate learning rates"),
    ("lr_budget", int, 30, "steps per learning-rate trial"),
    ("promax_power", int, 4, "promax exponent"),
]
_OPTS = {
    "fit": _COMMON + _FIT_OPTS + [
        ("input", str, None, "CSV of 0/1 responses, persons x items"),
        ("structure", str, None, "CSV 0/1 loading mask (items x factors) or exploratory:K"),
    ],
    "study": _COMMON + _FIT_OPTS + [
        ("n", int, 200, "sample size"),
        ("k", int, 2, "number of factors"),
        ("j", int, None, "number of items (default 30 for k=2, 55 for k=5)"),
        ("structure", str, "between", "between or within"),
        ("correlation", str, "low", "low, high or lo:hi"),
        ("mode", str, CONFIRMATORY, "confirmatory or exploratory"),
        ("reps", int, 100, "replications per cell"),
        ("methods", str, ",".join(METHODS), "comma-separated subset of gvem,iw_gvem"),
        ("paper_grid", bool, False, "run all 32 cells of the simulation grid"),
        ("no_timing", bool, False, "leave the seconds column empty (byte-identical reruns)"),
    ],
    "elbo": _COMMON + [
        ("n", int, 200, "sample size"),
        ("k", int, 2, "number of factors"),
        ("j", int, 30, "number of items"),
        ("structure", str, "between", "between or within"),
        ("correlation", str, "low", "low, high or lo:hi"),
        ("m_grid", _ints, (5, 10, 50, 100), "importance sample sizes M"),
        ("reps", int, 20, "replications"),
        ("n_outer", int, 10, "S, groups per person"),
    ],
}


def build_parser():
    parser = _Parser(prog="iwgvem", description="IW-GVEM estimation for M2PL models")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, opts in _OPTS.items():
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat JSON file of option values")
        for opt, typ, default, help_ in opts:
            flag = "--" + opt.replace("_", "-")
            if typ is bool:
                p.add_argument(flag, dest=opt, action="store_const", const=True, default=None, help=help_)
            else:
                if default is not None:
                    shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
                    help_ = f"{help_} (default: {shown})"
                p.add_argument(flag, dest=opt, type=typ, default=None, help=help_)
    return parser


def resolve(args):
    """Merge defaults, the config file and explicit flags, in that order."""
    opts = {name: (typ, default) for name, typ, default, _ in _OPTS[args.command]}
    values = {name: default for name, (_, default) in opts.items()}
    if args.config:
        try:
            with open(args.config) as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config file {args.config}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise UsageError("config file must hold a flat JSON object")
        for key, val in file_values.items():
            key = key.replace("-", "_")
            if key not in opts:
                raise UsageError(f"unknown config key {key!r} for {args.command}")
            typ = opts[key][0]
            if typ in (_floats, _ints) and isinstance(val, (list, tuple)):
                val = tuple(float(v) if typ is _floats else int(v) for v in val)
            elif typ in (_floats, _ints) and isinstance(val, str):
                val = typ(val)
            values[key] = val
    for key in opts:
        val = getattr(args, key)
        if val is not None:
            values[key] = val
    if values["out"] is None:
        raise UsageError("--out is required")
    if values["threads"] is None:
        values["threads"] = os.cpu_count() or 1
    if values["threads"] < 1:
        raise UsageError("--threads must be positive")
    return values


def _fit_config(v, mode):
    try:
        return FitConfig(
            gvem=GvemConfig(tol=v["gvem_tol"], max_iter=v["gvem_max_iter"], mode=mode),
            iw=IwConfig(n_outer=v["n_outer"], n_inner=v["n_inner"]),
            adam=AdamConfig(),
            iw_tol=v["iw_tol"],
            iw_max_iter=v["iw_max_iter"],
            mode=mode,
            lr_grid=tuple(v["lr_grid"]),
            lr_budget=v["lr_budget"],
            promax_power=v["promax_power"],
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _correlation(text):
    if ":" in text:
        try:
            lo, hi = (float(t) for t in text.split(":"))
        except ValueError:
            raise UsageError(f"bad correlation band {text!r}") from None
        return (lo, hi)
    return text


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_fit(v):
    if not v["input"] or not v["structure"]:
        raise UsageError("fit needs --input and --structure")
    Y = read_responses(v["input"])
    mode, structure = parse_structure(v["structure"], Y.shape[1])
    config = _fit_config(v, mode)
    with threadpool_limits(limits=v["threads"]):
        res = fit(Y, structure, config, seed=v["seed"])
    out = v["out"]
    p = res.params
    K = p.n_factors
    factors = [f"f{k + 1}" for k in range(K)]
    paths = {
        "A.csv": (factors, p.A),
        "B.csv": (["b"], p.B[:, None]),
        "sigma_theta.csv": (factors, p.sigma_theta),
        "gvem_A.csv": (factors, res.gvem_fit.params.A),
        "gvem_B.csv": (["b"], res.gvem_fit.params.B[:, None]),
        "gvem_sigma_theta.csv": (factors, res.gvem_fit.params.sigma_theta),
    }
    if res.rotation is not None:
        paths["rotated_A.csv"] = (factors, res.rotation.loadings)
        paths["phi.csv"] = (factors, res.rotation.phi)
        paths["rotation.csv"] = (factors, res.rotation.transform)
    written = []
    for name, (header, rows) in paths.items():
        path = os.path.join(out, name)
        write_table(path, header, rows)
        written.append(path)
    meta = {
        "mode": mode,
        "n_persons": int(Y.shape[0]),
        "n_items": int(Y.shape[1]),
        "n_factors": K,
        "gvem_iterations": res.gvem_fit.n_iters,
        "gvem_converged": bool(res.gvem_fit.converged),
        "gvem_elbo": float(res.gvem_fit.elbo_trace[-1]) if len(res.gvem_fit.elbo_trace) else None,
        "iw_iterations": res.iw_iters,
        "iw_converged": bool(res.converged),
        "chosen_lr": None if np.isnan(res.chosen_lr) else res.chosen_lr,
        "lr_scores": {repr(k): s for k, s in res.lr_scores.items()},
        "warnings": list(res.warnings),
        "timings": res.timings,
    }
    path = os.path.join(out, "fit.json")
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    written.append(path)
    inputs = [v["input"]] + ([] if mode == EXPLORATORY else [v["structure"]])
    return inputs, written


def cmd_study(v):
    methods = tuple(m.strip() for m in v["methods"].split(",") if m.strip())
    config = _fit_config(v, CONFIRMATORY)
    try:
        if v["paper_grid"]:
            designs = paper_grid(reps=v["reps"], base_seed=v["seed"])
        else:
            designs = [StudyDesign(
                n=v["n"], k=v["k"], j=v["j"], structure=v["structure"],
                correlation=_correlation(v["correlation"]), mode=v["mode"],
                reps=v["reps"], base_seed=v["seed"],
            )]
        results = [run_study(d, methods, replace(config, mode=d.mode), threads=v["threads"]) for d in designs]
    except DesignError as exc:
        raise UsageError(f"invalid design: {exc}") from exc
    timing = not v["no_timing"]
    out = v["out"]
    records = [r for res in results for r in res.records]
    failures = [f for res in results for f in res.failures]
    combined = StudyResult(designs[0], records, aggregate(records), failures)
    rec_path = os.path.join(out, "records.csv")
    write_records(combined, rec_path, timing=timing)
    sum_path = os.path.join(out, "summary.json")
    if len(results) == 1:
        write_summary(results[0], sum_path, timing=timing)
    else:
        cells = []
        for i, res in enumerate(results):
            tmp = sum_path + f".{i}"
            write_summary(res, tmp, timing=timing)
            with open(tmp) as fh:
                cells.append(json.load(fh))
            os.remove(tmp)
        with open(sum_path, "w") as fh:
            json.dump({"cells": cells}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return [], [rec_path, sum_path]


def cmd_elbo(v):
    try:
        table = elbo_experiment(
            n=v["n"], j=v["j"], k=v["k"], structure=v["structure"],
            correlation=_correlation(v["correlation"]), m_grid=v["m_grid"], reps=v["reps"],
            base_seed=v["seed"], n_outer=v["n_outer"], threads=v["threads"],
        )
    except DesignError as exc:
        raise UsageError(f"invalid design: {exc}") from exc
    path = os.path.join(v["out"], "elbo.csv")
    table.write(path)
    return [], [path]


COMMANDS = {"fit": cmd_fit, "study": cmd_study, "elbo": cmd_elbo}


def main(argv=None):
    started = _now()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        values = resolve(args)
        os.makedirs(values["out"], exist_ok=True)
        inputs, outputs = COMMANDS[args.command](values)
        config = {k: (list(val) if isinstance(val, tuple) else val) for k, val in values.items()}
        write_manifest(values["out"], args.command, config, values["seed"], inputs, outputs, started)
    except UsageError as exc:
        print(f"iwgvem: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DomainError) as exc:
        print(f"iwgvem: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, np.linalg.LinAlgError, LearningRateSelectionError) as exc:
        print(f"iwgvem: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
