"""
End-to-end IW-GVEM fit.

1. GVEM gives item parameters, latent covariance and per-person Gaussian
   posteriors.
2. The posteriors are frozen as importance-sampling proposals.
3. A learning rate is chosen by short runs scored on data simulated from
   the GVEM estimates.
4. Adam ascends the importance-weighted ELBO, redrawing samples every step.
   The winning trial run is continued rather than restarted; with shared
   draws the two are identical.
5. The latent covariance is made a valid correlation matrix and, in
   exploratory mode, the loadings are promax-rotated.

Random streams
--------------
Every stream is ``numpy.random.SeedSequence(seed, spawn_key=key)``:

=============  =====================================================
key            use
=============  =====================================================
``(0,)``       held-aside data for learning-rate selection
``(1, t)``     draws at step ``t`` of the ascent, shared by every
               learning-rate trial; the main run continues the
               winning trial
``(3,)``       draws for scoring the learning-rate trials
=============  =====================================================
"""

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import adam as adam_mod
from .adam import AdamConfig, AdamState, adam_step, select_learning_rate
from .gvem import (
    CONFIRMATORY,
    EXPLORATORY,
    MODES,
    GvemConfig,
    GvemFit,
    fit_gvem,
    fit_variational,
    rescale_identification,
)
from .iw import FrozenProposal, IwConfig, fast_weights_and_gradients, iw_elbo
from .model import DomainError, LoadingStructure, ModelParams, check_responses, simulate_responses
from .rotation import RotationResult, promax

logger = logging.getLogger(__name__)

HELD_ASIDE, ASCENT, TRIAL_SCORE = 0, 1, 3


def stream(seed, *key):
    """Generator for one named sub-stream of ``seed``."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass
class FitConfig:
    """Configuration of a full IW-GVEM fit.

    ``redraw_samples=False`` reuses the first set of draws for every step
    (for sensitivity checks); the default redraws each step.
    """

    gvem: GvemConfig = field(default_factory=GvemConfig)
    iw: IwConfig = field(default_factory=IwConfig)
    adam: AdamConfig = field(default_factory=AdamConfig)
    iw_tol: float = 1e-4
    iw_max_iter: int = 200
    mode: str = CONFIRMATORY
    lr_grid: tuple = adam_mod.DEFAULT_LR_GRID
    lr_budget: int = 30
    redraw_samples: bool = True
    eigen_floor: float = 1e-6
    promax_power: int = 4

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not self.iw_tol > 0:
            raise ValueError("iw_tol must be positive")
        if self.iw_max_iter < 0 or self.lr_budget < 0:
            raise ValueError("iteration budgets must be non-negative")
        if self.gvem.mode != self.mode:
            self.gvem = replace(self.gvem, mode=self.mode)


@dataclass
class FitResult:
    params: ModelParams
    gvem_fit: GvemFit
    rotation: Optional[RotationResult]
    chosen_lr: float
    iw_iters: int
    converged: bool
    timings: dict
    lr_scores: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)


# --------------------------------------------------------------------------
# the importance-weighted ascent
# --------------------------------------------------------------------------


def project_precision(P, floor):
    """Symmetrize and, if needed, lift eigenvalues to ``floor``."""
    P = 0.5 * (P + P.T)
    vals, vecs = np.linalg.eigh(P)
    if vals.min() < floor:
        P = (vecs * np.maximum(vals, floor)) @ vecs.T
        P = 0.5 * (P + P.T)
    return P


def _inverse_spd(P):
    L = np.linalg.cholesky(P)
    Linv = np.linalg.inv(L)
    S = Linv.T @ Linv
    return 0.5 * (S + S.T)


class IwAscent:
    """Adam ascent of the IW-ELBO with a frozen proposal.

    The state can be advanced in pieces: ``run(30)`` followed by
    ``run(170)`` gives the same trajectory as ``run(200)``, because the
    draws of step ``t`` come from the stream ``(seed, key, t)``.

    Parameters
    ----------
    Y : array of shape (N, J)
    proposal : FrozenProposal
    start : ModelParams
    mask : bool array of shape (J, K)
    config : FitConfig
    lr : float
        Base learning rate.
    seed : int
    key : int
        Stream family for the draws (see module docstring).
    """

    def __init__(self, Y, proposal, start, mask, config, lr, seed, key):
        self.Y = Y
        self.proposal = proposal
        self.mask = mask
        self.config = config
        self.seed = seed
        self.key = key
        self.exploratory = config.mode == EXPLORATORY
        self.acfg = AdamConfig(
            beta1=config.adam.beta1,
            beta2=config.adam.beta2,
            epsilon=config.adam.epsilon,
            base_lr=lr,
            sigma_lr_factor=config.adam.sigma_lr_factor,
            sigma_group="precision",
        )
        self.A, self.B = start.A.copy(), start.B.copy()
        self.S = start.sigma_theta.copy()
        self.P = _inverse_spd(self.S)
        self.state = AdamState()
        self.t = 0
        self.converged = False
        self._z = None

    @property
    def params(self):
        return ModelParams(self.A, self.B, self.S)

    def _draws(self, t):
        if self.config.redraw_samples or self._z is None:
            self._z = self.proposal.standard_draws(self.config.iw, stream(self.seed, self.key, t))
        return self._z

    def step(self):
        """One Adam step; returns the largest parameter change norm."""
        t = self.t + 1
        _, g = fast_weights_and_gradients(self.Y, self._draws(t), self.proposal, self.params, self.mask)
        grads = {"A": g.g_A, "B": g.g_B}
        if not self.exploratory:
            grads["precision"] = g.g_precision
        deltas, self.state = adam_step(self.state, grads, self.acfg)

        A_new = np.where(self.mask, self.A + deltas["A"], 0.0)
        B_new = self.B + deltas["B"]
        if self.exploratory:
            S_new = self.S
        else:
            self.P = project_precision(self.P + deltas["precision"], self.config.eigen_floor)
            S_new = _inverse_spd(self.P)
        if not (np.all(np.isfinite(A_new)) and np.all(np.isfinite(B_new)) and np.all(np.isfinite(S_new))):
            raise FloatingPointError("non-finite parameters during IW ascent")
        change = max(
            np.linalg.norm(A_new - self.A), np.linalg.norm(B_new - self.B), np.linalg.norm(S_new - self.S)
        )
        self.A, self.B, self.S = A_new, B_new, S_new
        self.t = t
        return change

    def run(self, until, tol=None):
        """Step until ``self.t == until`` or the change drops to ``tol``."""
        while not self.converged and self.t < until:
            change = self.step()
            if tol is not None and change <= tol:
                self.converged = True
        return self


def iw_ascent(Y, vstate, start, mask, config, lr, n_steps, seed, key=1, tol=None):
    """Run :class:`IwAscent` for at most ``n_steps`` steps.

    Returns
    -------
    params : ModelParams
        Latent covariance not yet rescaled.
    n_iters : int
    converged : bool
    """
    run = IwAscent(Y, FrozenProposal.from_state(vstate), start, mask, config, lr, seed, key)
    run.run(n_steps, tol)
    return run.params, run.t, run.converged


def finalize_covariance(params, floor=1e-6):
    """Symmetrize, clip eigenvalues below ``floor`` and rescale to unit variances."""
    S = 0.5 * (params.sigma_theta + params.sigma_theta.T)
    vals, vecs = np.linalg.eigh(S)
    if vals.min() < floor:
        S = (vecs * np.maximum(vals, floor)) @ vecs.T
        S = 0.5 * (S + S.T)
    return rescale_identification(ModelParams(params.A, params.B, S))


# --------------------------------------------------------------------------
# drivers
# --------------------------------------------------------------------------


def _choose_lr(Y, gv, proposal, mask, config, seed):
    """Run the trials and return ``(lr, scores, runs)``.

    Trials share the ascent streams, so the winning run is simply
    continued by the caller.
    """
    grid = tuple(config.lr_grid)
    if len(grid) == 1 or config.lr_budget == 0:
        return grid[0], {}, {}
    Y_eval, _ = simulate_responses(gv.params, Y.shape[0], stream(seed, HELD_ASIDE))
    vstate_eval = fit_variational(Y_eval, gv.params)
    runs = {}

    def trial(lr):
        run = IwAscent(Y, proposal, gv.params, mask, config, lr, seed, ASCENT)
        runs[lr] = run.run(min(config.lr_budget, config.iw_max_iter), config.iw_tol)
        return run.params

    def score(params):
        return iw_elbo(Y_eval, vstate_eval, params, config.iw, stream(seed, TRIAL_SCORE))

    lr, scores = select_learning_rate(grid, trial, score)
    return lr, scores, runs


def fit(Y, structure, config=None, seed=0):
    """Fit an M2PL model with IW-GVEM.

    Parameters
    ----------
    Y : array of shape (N, J)
        Binary responses.
    structure : LoadingStructure or int
        Loading pattern. In exploratory mode an integer number of factors
        is also accepted.
    config : FitConfig, optional
    seed : int
        Root of every random stream used by the fit.

    Returns
    -------
    FitResult
        With ``config.iw_max_iter == 0`` the result reproduces the GVEM
        estimates.
    """
    config = config or FitConfig()
    Y = check_responses(Y)
    if config.mode == EXPLORATORY:
        K = structure if isinstance(structure, int) else structure.n_factors
        structure = LoadingStructure.full(Y.shape[1], K)
    elif not isinstance(structure, LoadingStructure):
        structure = LoadingStructure(structure)
    if structure.n_items != Y.shape[1]:
        raise DomainError(
            f"structure has {structure.n_items} items but responses have {Y.shape[1]}"
        )
    mask = structure.mask
    warnings = []
    timings = {}

    t0 = time.perf_counter()
    gv = fit_gvem(Y, structure, config.gvem)
    timings["gvem"] = time.perf_counter() - t0
    if not gv.converged:
        warnings.append("gvem_not_converged")

    chosen_lr, scores = math.nan, {}
    params, n_iters, converged = gv.params.copy(), 0, True
    t1 = time.perf_counter()
    if config.iw_max_iter > 0:
        proposal = FrozenProposal.from_state(gv.vstate)
        chosen_lr, scores, runs = _choose_lr(Y, gv, proposal, mask, config, seed)
        timings["lr_select"] = time.perf_counter() - t1
        t2 = time.perf_counter()
        run = runs.get(chosen_lr)
        if run is None:
            run = IwAscent(Y, proposal, gv.params, mask, config, chosen_lr, seed, ASCENT)
        run.run(config.iw_max_iter, config.iw_tol)
        raw, n_iters, converged = run.params, run.t, run.converged
        if config.mode == EXPLORATORY:
            params = ModelParams(raw.A, raw.B, np.eye(structure.n_factors))
        else:
            params = finalize_covariance(raw, config.eigen_floor)
        timings["iw"] = time.perf_counter() - t2
    else:
        timings["lr_select"] = 0.0
        timings["iw"] = 0.0

    rotation = None
    if config.mode == EXPLORATORY:
        rotation = promax(params.A, power=config.promax_power)
    timings["total"] = time.perf_counter() - t0
    return FitResult(params, gv, rotation, chosen_lr, n_iters, converged, timings, scores, warnings)


def fit_gvem_only(Y, structure, config=None):
    """GVEM estimates wrapped as a :class:`FitResult` (no IW phase)."""
    config = config or FitConfig()
    cfg = FitConfig(
        gvem=config.gvem, iw=config.iw, adam=config.adam, iw_tol=config.iw_tol, iw_max_iter=0,
        mode=config.mode, promax_power=config.promax_power,
    )
    return fit(Y, structure, cfg)


def score_persons(Y, params):
    """Posterior means of the latent traits under fixed item parameters.

    These are the means of the Gaussian approximations after ``xi`` has
    converged, an approximation to EAP scores.
    """
    return fit_variational(check_responses(Y), params).mu
