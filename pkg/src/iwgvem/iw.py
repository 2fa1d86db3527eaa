"""
Importance-weighted ELBO and its stochastic gradients.

The Gaussian posteriors from GVEM are frozen and used as proposals. For
each person, ``S`` independent groups of ``M`` draws give the estimator

    sum_i (1/S) sum_s log( (1/M) sum_m w_i^(s,m) ),
    w = p(y_i, theta) / q_i(theta),

which lower-bounds the log-marginal likelihood more tightly as ``M`` grows.
All weight arithmetic is done on the log scale.

Because the proposal does not depend on the item parameters, the gradient
of the estimator with the draws held fixed is exactly the
self-normalized-weight average of the joint log-density gradient. The
latent-covariance gradient is taken with respect to the *precision*
matrix ``P = inv(sigma_theta)``: ``d/dP log N(theta; 0, inv(P))`` is
``(inv(P) - theta theta') / 2``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._kernels import iw_block
from .gvem import VariationalState
from .model import (
    LOG_2PI,
    check_responses,
    log1pexp,
    log_lik_batch,
    mvn_logpdf_zero_mean,
    sigmoid,
)


class DegenerateWeightsError(FloatingPointError):
    """Every log-weight in a block is -inf or nan."""


@dataclass
class IwConfig:
    n_outer: int = 10
    n_inner: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.n_outer < 1 or self.n_inner < 1:
            raise ValueError("n_outer and n_inner must be at least 1")


@dataclass
class ThetaSamples:
    """Draws of shape (N, S, M, K) from the frozen proposals."""

    draws: np.ndarray

    @property
    def shape(self):
        return self.draws.shape


@dataclass
class WeightBlock:
    """Log importance weights and their within-(i, s) normalization.

    Attributes
    ----------
    log_raw : array of shape (N, S, M)
        ``log w``.
    normalized : array of shape (N, S, M)
        Weights normalized over ``m`` within each (i, s) block.
    log_scale : array of shape (N, S)
        Per-block maximum subtracted before exponentiating.
    """

    log_raw: np.ndarray
    normalized: np.ndarray
    log_scale: np.ndarray

    @property
    def raw(self):
        return np.exp(self.log_raw)

    def log_mean(self):
        """``log((1/M) sum_m w)`` for every (i, s) block."""
        M = self.log_raw.shape[-1]
        s = np.sum(np.exp(self.log_raw - self.log_scale[..., None]), axis=-1)
        return self.log_scale + np.log(s) - np.log(M)


@dataclass
class IwGradients:
    g_A: np.ndarray
    g_B: np.ndarray
    g_precision: np.ndarray


def as_generator(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def _cholesky_batch(sigma):
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("proposal covariance is not positive definite") from exc


@dataclass
class FrozenProposal:
    """Cholesky factors of the proposals, computed once per fit."""

    mu: np.ndarray
    chol: np.ndarray
    logdet: np.ndarray

    @classmethod
    def from_state(cls, vstate):
        L = _cholesky_batch(vstate.sigma)
        logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
        return cls(np.ascontiguousarray(vstate.mu), np.ascontiguousarray(L), logdet)

    def standard_draws(self, cfg, rng):
        N, K = self.mu.shape
        return rng.standard_normal((N, cfg.n_outer, cfg.n_inner, K))

    def transform(self, z):
        return self.mu[:, None, None, :] + np.einsum("nkl,nsml->nsmk", self.chol, z)


def draw_samples(vstate, cfg, rng):
    """Draw ``theta = mu_i + L_i z`` with ``L_i L_i' = Sigma_i``, z standard normal.

    The standard-normal block is generated in (person, s, m, k) order from a
    single stream, so a given generator state always yields the same draws.
    """
    rng = as_generator(rng)
    prop = vstate if isinstance(vstate, FrozenProposal) else FrozenProposal.from_state(vstate)
    return ThetaSamples(prop.transform(prop.standard_draws(cfg, rng)))


def proposal_logpdf(draws, vstate):
    """``log q_i(theta)`` for draws of shape (N, ..., K)."""
    L = _cholesky_batch(vstate.sigma)
    N, K = vstate.mu.shape
    Linv = np.linalg.inv(L)
    diff = (draws - vstate.mu.reshape((N,) + (1,) * (draws.ndim - 2) + (K,))).reshape(N, -1, K)
    z = np.einsum("nkl,nrl->nrk", Linv, diff)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    out = -0.5 * (np.sum(z * z, axis=-1) + K * LOG_2PI + logdet[:, None])
    return out.reshape(draws.shape[:-1])


def log_weights(Y, draws, params, vstate):
    """``log p(y_i, theta) - log q_i(theta)`` for draws of shape (N, ..., K)."""
    return (
        log_lik_batch(Y, draws, params)
        + mvn_logpdf_zero_mean(draws, params.sigma_theta)
        - proposal_logpdf(draws, vstate)
    )


def normalize_log_weights(logw):
    """Self-normalize over the last axis using max subtraction."""
    scale = np.max(logw, axis=-1)
    if not np.all(np.isfinite(scale)):
        raise DegenerateWeightsError("a weight block has no finite log-weight")
    w = np.exp(logw - scale[..., None])
    w /= np.sum(w, axis=-1, keepdims=True)
    return w, scale


def compute_weights(Y, samples, params, vstate):
    """Importance weights of the draws under the current parameters."""
    Y = check_responses(Y)
    logw = log_weights(Y, samples.draws, params, vstate)
    w, scale = normalize_log_weights(logw)
    return WeightBlock(logw, w, scale)


def iw_elbo_terms(Y, vstate, params, cfg, rng, chunk=None):
    """Per-(person, s) values ``log((1/M) sum_m w)``, shape (N, S).

    ``chunk`` limits how many persons are processed at once; draws are taken
    from the stream in person order, so the result does not depend on it.
    """
    Y = check_responses(Y)
    rng = as_generator(rng)
    N = Y.shape[0]
    chunk = chunk or N
    out = []
    for start in range(0, N, chunk):
        sl = slice(start, start + chunk)
        sub = _slice_state(vstate, sl)
        samples = draw_samples(sub, cfg, rng)
        out.append(compute_weights(Y[sl], samples, params, sub).log_mean())
    return np.concatenate(out, axis=0)


def iw_elbo(Y, vstate, params, cfg, rng, chunk=None):
    """Monte Carlo estimate of the importance-weighted ELBO (summed over persons)."""
    return float(iw_elbo_terms(Y, vstate, params, cfg, rng, chunk).mean(axis=1).sum())


def iw_elbo_with_se(Y, vstate, params, cfg, rng, chunk=None):
    """Estimate and its Monte Carlo standard error across the ``S`` groups."""
    terms = iw_elbo_terms(Y, vstate, params, cfg, rng, chunk)
    S = terms.shape[1]
    est = terms.mean(axis=1).sum()
    var = terms.var(axis=1, ddof=1).sum() / S if S > 1 else np.nan
    return float(est), float(np.sqrt(var))


def gradients(Y, samples, weights, params, mask=None):
    """Gradient of the IW-ELBO estimate with the draws held fixed.

    Returns
    -------
    IwGradients
        ``g_A`` (J, K) with fixed loadings set to zero, ``g_B`` (J,), and
        ``g_precision`` (K, K), the symmetric gradient with respect to the
        latent precision matrix.
    """
    Y = check_responses(Y)
    theta = samples.draws
    N, S, M, K = theta.shape
    wt = weights.normalized / S
    resid = Y[:, None, None, :] - sigmoid(theta @ params.A.T - params.B)
    W = (wt[..., None] * resid).reshape(-1, Y.shape[1])
    flat = theta.reshape(-1, K)
    g_A = W.T @ flat
    if mask is not None:
        g_A = np.where(mask, g_A, 0.0)
    g_B = -W.sum(axis=0)
    second = (wt.reshape(-1)[:, None] * flat).T @ flat
    G = 0.5 * (N * params.sigma_theta - second)
    return IwGradients(g_A, g_B, 0.5 * (G + G.T))


def weights_and_gradients(Y, samples, params, vstate, mask=None, log_q=None):
    """Weights and gradients in one pass over the linear predictors.

    Equivalent to :func:`compute_weights` followed by :func:`gradients`;
    ``log_q`` may be passed when the proposal densities of the draws are
    already known.
    """
    theta = samples.draws
    N, S, M, K = theta.shape
    x = theta @ params.A.T - params.B
    y = Y[:, None, None, :]
    logw = np.sum(y * x - log1pexp(x), axis=-1) + mvn_logpdf_zero_mean(theta, params.sigma_theta)
    logw -= proposal_logpdf(theta, vstate) if log_q is None else log_q
    w, scale = normalize_log_weights(logw)
    weights = WeightBlock(logw, w, scale)

    wt = w / S
    W = (wt[..., None] * (y - sigmoid(x))).reshape(-1, Y.shape[1])
    flat = theta.reshape(-1, K)
    g_A = W.T @ flat
    if mask is not None:
        g_A = np.where(mask, g_A, 0.0)
    second = (wt.reshape(-1)[:, None] * flat).T @ flat
    G = 0.5 * (N * params.sigma_theta - second)
    return weights, IwGradients(g_A, -W.sum(axis=0), 0.5 * (G + G.T))


def fast_weights_and_gradients(Y, z, proposal, params, mask=None):
    """Compiled equivalent of :func:`weights_and_gradients` for draws ``mu + L z``.

    Returns the log-weights (N, S, M) and the gradients.
    """
    N, S = z.shape[:2]
    Lp = np.linalg.cholesky(params.sigma_theta)
    logdet_prior = 2.0 * np.log(np.diag(Lp)).sum()
    Lpinv = np.linalg.inv(Lp)
    prec = Lpinv.T @ Lpinv
    logw, g_A, g_B, second = iw_block(
        Y, z, proposal.mu, proposal.chol, proposal.logdet,
        np.ascontiguousarray(params.A), params.B, prec, logdet_prior,
    )
    if not np.all(np.isfinite(logw.max(axis=-1))):
        raise DegenerateWeightsError("a weight block has no finite log-weight")
    if mask is not None:
        g_A = np.where(mask, g_A, 0.0)
    G = 0.5 * (N * params.sigma_theta - second)
    return logw, IwGradients(g_A, g_B, 0.5 * (G + G.T))


def check_monotone_in_M(Y, vstate, params, m_grid, s_large, rng, chunk=20):
    """IW-ELBO estimates for each ``M`` in ``m_grid`` from shared draws.

    For every (person, s) block ``max(m_grid)`` draws are made once; the
    estimate for ``M`` uses the first ``M`` of them, so the sequence differs
    only through ``M``.

    Returns
    -------
    list of float, one estimate per entry of ``m_grid``.
    """
    m_grid = [int(m) for m in m_grid]
    if any(b < a for a, b in zip(m_grid, m_grid[1:])):
        raise ValueError("m_grid must be ascending")
    Y = check_responses(Y)
    rng = as_generator(rng)
    cfg = IwConfig(n_outer=s_large, n_inner=max(m_grid))
    totals = np.zeros(len(m_grid))
    N = Y.shape[0]
    for start in range(0, N, chunk):
        sl = slice(start, start + chunk)
        sub = _slice_state(vstate, sl)
        samples = draw_samples(sub, cfg, rng)
        logw = log_weights(Y[sl], samples.draws, params, sub)
        for idx, M in enumerate(m_grid):
            lm = logsumexp(logw[..., :M], axis=-1) - np.log(M)
            totals[idx] += lm.mean(axis=1).sum()
    return totals.tolist()


def _slice_state(vstate, sl):
    return VariationalState(vstate.mu[sl], vstate.sigma[sl], vstate.xi[sl])
