"""
Gaussian variational EM for the M2PL model.

Each person gets a Gaussian posterior approximation ``q_i = N(mu_i, Sigma_i)``
obtained in closed form from the quadratic local bound on the logistic
likelihood. Item parameters, the variational ``xi`` and (in confirmatory
mode) the latent covariance are then updated in closed form, and the two
steps alternate until the parameters stop moving.

All person-level updates are vectorized over persons; the M-step reductions
use numpy's fixed summation order, so results do not depend on scheduling.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    LOG_2PI,
    DomainError,
    LoadingStructure,
    ModelParams,
    check_responses,
    eta,
    log1pexp,
)

logger = logging.getLogger(__name__)

CONFIRMATORY = "confirmatory"
EXPLORATORY = "exploratory"
MODES = (CONFIRMATORY, EXPLORATORY)


class RankDeficiencyError(np.linalg.LinAlgError):
    """The restricted M-step system for an item is singular."""


@dataclass
class VariationalState:
    """Per-person Gaussian posteriors and local variational parameters.

    Attributes
    ----------
    mu : array of shape (N, K)
    sigma : array of shape (N, K, K)
    xi : array of shape (N, J), non-negative
    """

    mu: np.ndarray
    sigma: np.ndarray
    xi: np.ndarray

    def copy(self):
        return VariationalState(self.mu.copy(), self.sigma.copy(), self.xi.copy())


@dataclass
class GvemConfig:
    tol: float = 1e-4
    max_iter: int = 500
    mode: str = CONFIRMATORY

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")


@dataclass
class GvemFit:
    params: ModelParams
    vstate: VariationalState
    n_iters: int
    converged: bool
    elbo_trace: list = field(default_factory=list)


# --------------------------------------------------------------------------
# E-step
# --------------------------------------------------------------------------


def _spd_inverse(P):
    """Inverse of a batch of SPD matrices through their Cholesky factors."""
    L = np.linalg.cholesky(P)
    Linv = np.linalg.inv(L)
    out = np.swapaxes(Linv, -1, -2) @ Linv
    return 0.5 * (out + np.swapaxes(out, -1, -2))


def estep(Y, params, xi):
    """Closed-form Gaussian posteriors for every person.

    Parameters
    ----------
    Y : array of shape (N, J)
    params : ModelParams
    xi : array of shape (N, J)

    Returns
    -------
    mu : array of shape (N, K)
    sigma : array of shape (N, K, K)
    """
    A, B = params.A, params.B
    e = eta(xi)
    prior_prec = _spd_inverse(params.sigma_theta)
    prec = prior_prec + 2.0 * np.einsum("nj,jk,jl->nkl", e, A, A)
    try:
        sigma = _spd_inverse(prec)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("posterior precision is not positive definite") from exc
    lin = (2.0 * e * B + Y - 0.5) @ A
    mu = np.einsum("nkl,nl->nk", sigma, lin)
    return mu, sigma


def estep_person(y_i, params, xi_i):
    """Posterior mean and covariance for a single person."""
    mu, sigma = estep(np.atleast_2d(y_i), params, np.atleast_2d(xi_i))
    return mu[0], sigma[0]


def update_xi(mu, sigma, params):
    """Optimal local variational parameters for the current posteriors.

    ``xi_ij^2 = E_q[(b_j - a_j' theta_i)^2]``; the non-negative root is
    returned. Accepts a single person (mu of shape (K,)) or a batch.
    """
    single = np.ndim(mu) == 1
    mu, sigma = np.atleast_2d(mu), np.asarray(sigma)
    if single:
        sigma = sigma[None]
    A, B = params.A, params.B
    mean_x = mu @ A.T - B
    var_x = np.einsum("jk,nkl,jl->nj", A, sigma, A)
    sq = mean_x * mean_x + var_x
    if np.any(sq < -1e-12):
        raise ArithmeticError("negative radicand in xi update")
    xi = np.sqrt(np.maximum(sq, 0.0))
    return xi[0] if single else xi


# --------------------------------------------------------------------------
# M-step
# --------------------------------------------------------------------------


def _augmented_moments(vstate):
    """E_q[z z'] and E_q[z] for ``z = (theta, -1)``, so that ``a'theta - b = (a, b)'z``."""
    mu, sigma = vstate.mu, vstate.sigma
    N, K = mu.shape
    Z = np.empty((N, K + 1, K + 1))
    Z[:, :K, :K] = sigma + mu[:, :, None] * mu[:, None, :]
    Z[:, :K, K] = -mu
    Z[:, K, :K] = -mu
    Z[:, K, K] = 1.0
    z = np.concatenate([mu, -np.ones((N, 1))], axis=1)
    return Z, z


def mstep_item(Y, vstate, mask):
    """Maximize the expected bound over every item's ``(a_j, b_j)``.

    The expected bound is quadratic in ``w_j = (a_j, b_j)``; its maximizer
    solves ``[2 sum_i eta_ij E(z_i z_i')] w_j = sum_i (y_ij - 1/2) E(z_i)``
    restricted to the free coordinates. Fixed loadings come back as exact
    zeros.

    Returns
    -------
    A : array of shape (J, K)
    B : array of shape (J,)
    """
    Y = np.asarray(Y, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    J, K = mask.shape
    e = eta(vstate.xi)
    Z, z = _augmented_moments(vstate)
    H = 2.0 * np.einsum("nj,nab->jab", e, Z)
    rhs = (Y - 0.5).T @ z
    A = np.zeros((J, K))
    B = np.zeros(J)
    for j in range(J):
        free = np.append(mask[j], True)
        Hj = H[j][np.ix_(free, free)]
        try:
            w = np.linalg.solve(Hj, rhs[j][free])
        except np.linalg.LinAlgError as exc:
            raise RankDeficiencyError(f"singular M-step system for item {j}") from exc
        A[j, mask[j]] = w[:-1]
        B[j] = w[-1]
    return A, B


def update_sigma_theta(vstate):
    """Average second moment of the posteriors, ``mean_i(Sigma_i + mu_i mu_i')``."""
    mu, sigma = vstate.mu, vstate.sigma
    S = (sigma + mu[:, :, None] * mu[:, None, :]).mean(axis=0)
    return 0.5 * (S + S.T)


def rescale_identification(params, vstate=None):
    """Rescale to unit latent variances without changing the model.

    ``theta -> D^{-1/2} theta`` with ``D = diag(sigma_theta)``: the latent
    covariance becomes a correlation matrix, each loading column is
    multiplied by the matching standard deviation, and (if given) the
    posteriors are transformed the same way so they stay consistent with
    the rescaled parameters.
    """
    d = np.diag(params.sigma_theta)
    if np.any(d <= 0):
        raise DomainError("latent variances must be positive to rescale")
    s = np.sqrt(d)
    S = params.sigma_theta / np.outer(s, s)
    np.fill_diagonal(S, 1.0)
    out = ModelParams(params.A * s, params.B.copy(), 0.5 * (S + S.T))
    if vstate is None:
        return out
    mu = vstate.mu / s
    sigma = vstate.sigma / np.outer(s, s)
    return out, VariationalState(mu, sigma, vstate.xi.copy())


# --------------------------------------------------------------------------
# objective
# --------------------------------------------------------------------------


def expected_elbo(Y, vstate, params):
    """Closed-form ELBO with the quadratic bound substituted for the likelihood.

    ``sum_i E_q[bound_i(theta)] + H(q_i)``, using ``E_q theta = mu_i`` and
    ``E_q theta theta' = Sigma_i + mu_i mu_i'``.
    """
    Y = np.asarray(Y, dtype=float)
    mu, sigma, xi = vstate.mu, vstate.sigma, vstate.xi
    A, B = params.A, params.B
    N, K = mu.shape
    e = eta(xi)

    mean_x = B - mu @ A.T
    sq_x = mean_x * mean_x + np.einsum("jk,nkl,jl->nj", A, sigma, A)
    lik = -log1pexp(-xi) - Y * mean_x + (mean_x - xi) / 2.0 - e * (sq_x - xi * xi)

    Lp = np.linalg.cholesky(params.sigma_theta)
    logdet_prior = 2.0 * np.log(np.diag(Lp)).sum()
    prior_inv = _spd_inverse(params.sigma_theta)
    second = sigma + mu[:, :, None] * mu[:, None, :]
    prior = -0.5 * (K * LOG_2PI + logdet_prior + np.einsum("kl,nlk->n", prior_inv, second))

    logdet_q = 2.0 * np.log(np.diagonal(np.linalg.cholesky(sigma), axis1=1, axis2=2)).sum(axis=1)
    entropy = 0.5 * (K * (1.0 + LOG_2PI) + logdet_q)
    return float(lik.sum() + prior.sum() + entropy.sum())


# --------------------------------------------------------------------------
# drivers
# --------------------------------------------------------------------------


def default_init(structure):
    """Starting values: free loadings 1, intercepts 0, identity covariance."""
    mask = structure.mask
    return ModelParams(mask.astype(float), np.zeros(mask.shape[0]), np.eye(mask.shape[1]))


def _param_change(new, old):
    return (
        np.linalg.norm(new.A - old.A)
        + np.linalg.norm(new.B - old.B)
        + np.linalg.norm(new.sigma_theta - old.sigma_theta)
    )


def fit_variational(Y, params, tol=1e-8, max_iter=200, xi=None):
    """Optimize the posteriors and ``xi`` with the item parameters held fixed.

    Used to score persons and to build proposals for data that the item
    parameters were not fit on.
    """
    Y = check_responses(Y)
    xi = np.ones_like(Y) if xi is None else xi
    mu, sigma = estep(Y, params, xi)
    for _ in range(max_iter):
        xi_new = update_xi(mu, sigma, params)
        mu, sigma = estep(Y, params, xi_new)
        delta = np.max(np.abs(xi_new - xi))
        xi = xi_new
        if delta < tol:
            break
    return VariationalState(mu, sigma, xi)


def fit_gvem(Y, structure, config=None, init: Optional[ModelParams] = None):
    """Fit the M2PL model by Gaussian variational EM.

    Parameters
    ----------
    Y : array of shape (N, J)
        Binary responses.
    structure : LoadingStructure
        Free/fixed loading pattern; use ``LoadingStructure.full`` for
        exploratory analysis.
    config : GvemConfig, optional
    init : ModelParams, optional
        Starting values; see :func:`default_init` for the default.

    Returns
    -------
    GvemFit
        In confirmatory mode the returned parameters (and posteriors) are
        rescaled so that the latent covariance has a unit diagonal. In
        exploratory mode the latent covariance is the identity throughout.
    """
    config = config or GvemConfig()
    Y = check_responses(Y)
    if not isinstance(structure, LoadingStructure):
        structure = LoadingStructure(structure)
    if structure.n_items != Y.shape[1]:
        raise DomainError("structure rows must match the number of items")
    mask = structure.mask
    exploratory = config.mode == EXPLORATORY

    params = default_init(structure) if init is None else init.copy()
    params.A = np.where(mask, params.A, 0.0)
    if exploratory:
        params.sigma_theta = np.eye(structure.n_factors)

    xi = np.ones_like(Y)
    mu, sigma = estep(Y, params, xi)
    vstate = VariationalState(mu, sigma, xi)
    trace = [expected_elbo(Y, vstate, params)]

    converged = False
    n_iters = 0
    for n_iters in range(1, config.max_iter + 1):
        old = params
        xi = update_xi(vstate.mu, vstate.sigma, params)
        vstate = VariationalState(vstate.mu, vstate.sigma, xi)
        A, B = mstep_item(Y, vstate, mask)
        S = params.sigma_theta if exploratory else update_sigma_theta(vstate)
        params = ModelParams(A, B, S)
        mu, sigma = estep(Y, params, xi)
        vstate = VariationalState(mu, sigma, xi)
        trace.append(expected_elbo(Y, vstate, params))
        if _param_change(params, old) <= config.tol:
            converged = True
            break

    if not converged:
        logger.warning("GVEM stopped at max_iter=%d without converging", config.max_iter)
    if not exploratory:
        params, vstate = rescale_identification(params, vstate)
    return GvemFit(params, vstate, n_iters, converged, trace)
