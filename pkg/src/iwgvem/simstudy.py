"""
Simulation studies: data generation, replication loop and evaluation.

A study is a grid cell (sample size, factors, items, structure, latent
correlation band, estimation mode) replicated ``reps`` times. Replication
``r`` uses the seed ``base_seed + r`` for both data generation and the fit,
so every record is a pure function of the design and the base seed.

CSV layout
----------
:data:`RECORD_COLUMNS` fixes the column order of :func:`write_records`; the
ELBO experiment table has ``rep, seed, gvem`` followed by one ``iw_m<M>``
column per entry of the M grid.
"""

import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Union

import numpy as np
from threadpoolctl import threadpool_limits

from .gvem import CONFIRMATORY, EXPLORATORY, MODES, expected_elbo, fit_gvem
from .iw import check_monotone_in_M
from .model import LoadingStructure, ModelParams, ResponseMatrix, simulate_responses
from .pipeline import FitConfig, fit
from .rotation import align_to_truth, promax

logger = logging.getLogger(__name__)

GVEM, IW_GVEM = "gvem", "iw_gvem"
METHODS = (GVEM, IW_GVEM)
BLOCKS = ("A", "B", "sigma")
BANDS = {"low": (0.1, 0.3), "high": (0.5, 0.7)}
DEFAULT_ITEMS = {2: 30, 5: 55}

DESIGN_COLUMNS = ("n", "k", "j", "structure", "correlation", "mode")
RECORD_COLUMNS = DESIGN_COLUMNS + (
    "rep", "seed", "method", "block", "bias", "rmse", "seconds", "converged",
)

_ELBO_STREAM = 4


class DesignError(ValueError):
    """The requested design cannot be generated."""


@dataclass
class StudyDesign:
    """One cell of a simulation grid.

    ``correlation`` is ``"low"``, ``"high"`` or an explicit ``(lo, hi)``
    band for the off-diagonal latent correlations. ``j`` defaults to 30
    items for two factors and 55 for five.
    """

    n: int = 200
    k: int = 2
    j: Optional[int] = None
    structure: str = "between"
    correlation: Union[str, tuple] = "low"
    mode: str = CONFIRMATORY
    reps: int = 100
    base_seed: int = 0

    def __post_init__(self):
        if self.j is None:
            if self.k not in DEFAULT_ITEMS:
                raise DesignError(f"no default item count for k={self.k}; pass j")
            self.j = DEFAULT_ITEMS[self.k]
        if self.structure not in ("between", "within"):
            raise DesignError(f"structure must be 'between' or 'within', got {self.structure!r}")
        if self.mode not in MODES:
            raise DesignError(f"mode must be one of {MODES}")
        if self.n < 1 or self.k < 1 or self.j < 1 or self.reps < 0:
            raise DesignError("n, k and j must be positive and reps non-negative")
        self.band()

    def band(self):
        if isinstance(self.correlation, str):
            if self.correlation not in BANDS:
                raise DesignError(f"unknown correlation level {self.correlation!r}")
            return BANDS[self.correlation]
        lo, hi = (float(v) for v in self.correlation)
        if not -1 < lo <= hi < 1:
            raise DesignError("correlation band must satisfy -1 < lo <= hi < 1")
        return lo, hi

    def label(self):
        if isinstance(self.correlation, str):
            return self.correlation
        lo, hi = self.band()
        return f"{lo:g}:{hi:g}"

    def columns(self):
        return {
            "n": self.n, "k": self.k, "j": self.j, "structure": self.structure,
            "correlation": self.label(), "mode": self.mode,
        }


@dataclass
class TrueModel:
    params: ModelParams
    structure: LoadingStructure
    thetas: np.ndarray


@dataclass
class StudyResult:
    """Per-replication records plus aggregates per (method, block).

    ``records`` are dicts keyed by :data:`RECORD_COLUMNS`; ``failures``
    lists ``(rep, method, message)`` for fits that raised.
    """

    design: StudyDesign
    records: list
    aggregates: dict
    failures: list = field(default_factory=list)


# --------------------------------------------------------------------------
# data generation
# --------------------------------------------------------------------------


def _blocks(n, parts):
    """Contiguous near-equal block sizes, larger blocks first."""
    base, extra = divmod(n, parts)
    return [base + (i < extra) for i in range(parts)]


def generate_structure(k, j, kind):
    """Loading mask for the simulation designs.

    ``between``: contiguous near-equal blocks of items, one factor each.
    ``within`` with two factors: thirds loading on factor 1, factor 2 and
    both. ``within`` with three or more factors: thirds loading on one, two
    and three factors; inside a third, items cycle through the factor
    combinations of that size in lexicographic order.
    """
    if kind not in ("between", "within"):
        raise DesignError(f"unknown structure {kind!r}")
    if k < 1 or j < 1:
        raise DesignError("k and j must be positive")
    mask = np.zeros((j, k), dtype=bool)
    if kind == "between":
        if j < k:
            raise DesignError(f"cannot spread {j} items over {k} factors")
        row = 0
        for f, size in enumerate(_blocks(j, k)):
            mask[row:row + size, f] = True
            row += size
    else:
        if k < 2:
            raise DesignError("within-item structure needs at least two factors")
        if k == 2:
            groups = [[(0,)], [(1,)], [(0, 1)]]
        else:
            groups = [list(itertools.combinations(range(k), r)) for r in (1, 2, 3)]
        row = 0
        for combos, size in zip(groups, _blocks(j, 3)):
            for t in range(size):
                mask[row, list(combos[t % len(combos)])] = True
                row += 1
    if not mask.any(axis=0).all():
        raise DesignError(f"design with k={k}, j={j}, {kind} leaves a factor without items")
    return LoadingStructure(mask)


def _latent_cov(k, band, rng, max_tries=100):
    lo, hi = band
    iu = np.triu_indices(k, 1)
    for _ in range(max_tries):
        S = np.eye(k)
        S[iu] = rng.uniform(lo, hi, size=len(iu[0]))
        S = np.triu(S) + np.triu(S, 1).T
        if np.linalg.eigvalsh(S).min() > 1e-8:
            return S
    raise DesignError(f"no positive definite correlation matrix in {max_tries} draws")


def generate_dataset(design, rep_seed):
    """Responses and generating model for one replication.

    Free loadings are uniform on [1, 2], intercepts standard normal and the
    latent correlations uniform on the design's band (redrawn until the
    matrix is positive definite).

    Returns
    -------
    (ResponseMatrix, TrueModel)
    """
    rng = np.random.default_rng(np.random.SeedSequence(rep_seed))
    structure = generate_structure(design.k, design.j, design.structure)
    A = np.where(structure.mask, rng.uniform(1.0, 2.0, size=structure.mask.shape), 0.0)
    B = rng.standard_normal(design.j)
    S = _latent_cov(design.k, design.band(), rng)
    params = ModelParams(A, B, S)
    Y, theta = simulate_responses(params, design.n, rng)
    return ResponseMatrix(Y), TrueModel(params, structure, theta)


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def _metrics(err):
    err = np.asarray(err, dtype=float).ravel()
    if err.size == 0:
        return math.nan, math.nan
    return float(err.mean()), float(np.sqrt(np.mean(err * err)))


def evaluate_estimates(A, B, sigma, truth, mode):
    """Bias and RMSE per block for given estimates.

    In confirmatory mode ``A`` errors are taken over the free entries only
    and ``sigma`` is the latent covariance. In exploratory mode ``A`` and
    ``sigma`` are the rotated loadings and factor correlations, aligned to
    the truth by column permutation and sign before comparison, and every
    loading counts.

    Returns
    -------
    dict of block -> (bias, rmse)
    """
    tp = truth.params
    A = np.asarray(A, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if A.shape != tp.A.shape or sigma.shape != tp.sigma_theta.shape:
        raise ValueError("estimate and truth shapes differ")
    if mode == EXPLORATORY:
        _, _, A, sigma = align_to_truth(A, tp.A, sigma)
        errA = (A - tp.A).ravel()
    else:
        errA = (A - tp.A)[truth.structure.mask]
    iu = np.triu_indices(tp.n_factors, 1)
    return {
        "A": _metrics(errA),
        "B": _metrics(np.asarray(B) - tp.B),
        "sigma": _metrics(sigma[iu] - tp.sigma_theta[iu]),
    }


def evaluate(fit_result, truth, mode):
    """Bias/RMSE of the final estimates of a :class:`FitResult`."""
    p = fit_result.params
    if mode == EXPLORATORY:
        rot = fit_result.rotation or promax(p.A)
        return evaluate_estimates(rot.loadings, p.B, rot.phi, truth, mode)
    return evaluate_estimates(p.A, p.B, p.sigma_theta, truth, mode)


def _evaluate_gvem(fit_result, truth, mode, power):
    p = fit_result.gvem_fit.params
    if mode == EXPLORATORY:
        rot = promax(p.A, power=power)
        return evaluate_estimates(rot.loadings, p.B, rot.phi, truth, mode)
    return evaluate_estimates(p.A, p.B, p.sigma_theta, truth, mode)


# --------------------------------------------------------------------------
# replication loop
# --------------------------------------------------------------------------


def _fit_config(design, config):
    config = config or FitConfig()
    return config if config.mode == design.mode else replace(config, mode=design.mode)


def _rows(design, rep, seed, method, metrics, seconds, converged):
    base = design.columns()
    out = []
    for block in BLOCKS:
        bias, rmse = metrics[block] if metrics else (math.nan, math.nan)
        out.append({**base, "rep": rep, "seed": seed, "method": method, "block": block,
                    "bias": bias, "rmse": rmse, "seconds": seconds, "converged": converged})
    return out


def run_replication(design, rep, methods=METHODS, config=None):
    """Generate, fit and evaluate one replication.

    A single pipeline run yields both methods: its GVEM phase is the GVEM
    estimate and its final output the IW-GVEM estimate. GVEM time is the
    GVEM phase; IW-GVEM time is the whole run, GVEM start included.

    Returns
    -------
    rows : list of dict
    failures : list of (rep, method, message)
    """
    methods = tuple(m for m in METHODS if m in methods)
    seed = design.base_seed + rep
    config = _fit_config(design, config)
    Y, truth = generate_dataset(design, seed)
    structure = design.k if design.mode == EXPLORATORY else truth.structure
    rows, failures = [], []
    try:
        if IW_GVEM not in methods:
            config = replace(config, iw_max_iter=0)
        res = fit(Y, structure, config, seed=seed)
    except (ArithmeticError, ValueError, np.linalg.LinAlgError) as exc:
        logger.warning("replication %d failed: %s", rep, exc)
        for m in methods:
            failures.append((rep, m, f"{type(exc).__name__}: {exc}"))
            rows += _rows(design, rep, seed, m, None, math.nan, False)
        return rows, failures
    if GVEM in methods:
        metrics = _evaluate_gvem(res, truth, design.mode, config.promax_power)
        rows += _rows(design, rep, seed, GVEM, metrics, res.timings["gvem"], res.gvem_fit.converged)
    if IW_GVEM in methods:
        rows += _rows(design, rep, seed, IW_GVEM, evaluate(res, truth, design.mode),
                      res.timings["total"], res.converged)
    return rows, failures


def _worker(args):
    with threadpool_limits(limits=1):
        return run_replication(*args)


def aggregate(records):
    """Mean bias, RMSE and seconds per (method, block), ignoring failures."""
    out = {}
    for method in METHODS:
        for block in BLOCKS:
            sel = [r for r in records if r["method"] == method and r["block"] == block]
            if not sel:
                continue
            ok = [r for r in sel if math.isfinite(r["bias"])]
            mean = (lambda key: float(np.mean([r[key] for r in ok])) if ok else math.nan)
            out[f"{method}/{block}"] = {
                "bias": mean("bias"), "rmse": mean("rmse"), "seconds": mean("seconds"),
                "n_ok": len(ok), "n": len(sel),
            }
    return out


def run_study(design, methods=METHODS, config=None, threads=1):
    """Run every replication of ``design``.

    Replications run on up to ``threads`` worker processes, each limited to
    one BLAS thread; records are merged in replication order, so the
    result does not depend on ``threads`` (apart from wall times).
    """
    unknown = set(methods) - set(METHODS)
    if unknown:
        raise DesignError(f"unknown methods {sorted(unknown)}")
    jobs = [(design, rep, tuple(methods), config) for rep in range(design.reps)]
    if threads is None or threads <= 1 or len(jobs) <= 1:
        results = [_worker(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_worker, jobs))
    records, failures = [], []
    for rows, fails in results:
        records += rows
        failures += fails
    return StudyResult(design, records, aggregate(records), failures)


def _fmt(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def write_records(result, path, timing=True):
    """Write the records as CSV in :data:`RECORD_COLUMNS` order.

    With ``timing=False`` the ``seconds`` column is left empty, which makes
    reruns byte-identical.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in result.records:
            w.writerow(["" if (c == "seconds" and not timing) else _fmt(r[c]) for c in RECORD_COLUMNS])


def write_summary(result, path, timing=True):
    """Aggregates, design and failures as JSON."""
    agg = result.aggregates
    if not timing:
        agg = {k: {kk: vv for kk, vv in v.items() if kk != "seconds"} for k, v in agg.items()}
    design = asdict(result.design)
    design["correlation"] = result.design.label()
    payload = {"design": design, "aggregates": agg,
               "failures": [list(f) for f in result.failures]}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def paper_grid(reps=100, base_seed=0):
    """The 32 design cells: n x k x structure x correlation x mode."""
    return [
        StudyDesign(n=n, k=k, structure=s, correlation=c, mode=m, reps=reps, base_seed=base_seed)
        for n, k, s, c, m in itertools.product(
            (200, 500), (2, 5), ("between", "within"), ("low", "high"), (CONFIRMATORY, EXPLORATORY)
        )
    ]


# --------------------------------------------------------------------------
# ELBO experiment
# --------------------------------------------------------------------------


@dataclass
class ElboTable:
    """Per-replication GVEM ELBO and IW-ELBO at every ``M``."""

    m_grid: tuple
    rows: list

    @property
    def columns(self):
        return ("rep", "seed", "gvem") + tuple(f"iw_m{m}" for m in self.m_grid)

    def matrix(self):
        """(reps, 1 + len(m_grid)) array of the ELBO columns."""
        return np.array([[r[c] for c in self.columns[2:]] for r in self.rows], dtype=float)

    def write(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([_fmt(r[c]) for c in self.columns])


def _elbo_rep(args):
    design, rep, m_grid, n_outer = args
    seed = design.base_seed + rep
    with threadpool_limits(limits=1):
        Y, truth = generate_dataset(design, seed)
        gv = fit_gvem(Y, truth.structure)
        row = {"rep": rep, "seed": seed, "gvem": expected_elbo(Y.data, gv.vstate, gv.params)}
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(_ELBO_STREAM,)))
        vals = check_monotone_in_M(Y, gv.vstate, gv.params, m_grid, n_outer, rng)
    row.update({f"iw_m{m}": v for m, v in zip(m_grid, vals)})
    return row


def elbo_experiment(n=200, j=30, k=2, structure="between", correlation="low",
                    m_grid=(5, 10, 50, 100), reps=20, base_seed=0, n_outer=10, threads=1):
    """GVEM ELBO against IW-ELBOs at several ``M``, per replication.

    Both are evaluated at the GVEM estimates with the GVEM posteriors as
    proposals. IW-ELBOs for different ``M`` use nested prefixes of the same
    draws.
    """
    m_grid = tuple(int(m) for m in m_grid)
    if not m_grid or min(m_grid) < 1:
        raise DesignError("m_grid needs positive entries")
    if list(m_grid) != sorted(m_grid):
        raise DesignError("m_grid must be ascending")
    design = StudyDesign(n=n, k=k, j=j, structure=structure, correlation=correlation,
                         reps=reps, base_seed=base_seed)
    jobs = [(design, rep, m_grid, n_outer) for rep in range(reps)]
    if threads is None or threads <= 1 or reps <= 1:
        rows = [_elbo_rep(job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_elbo_rep, jobs))
    return ElboTable(m_grid, rows)
