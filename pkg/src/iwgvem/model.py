"""
Multidimensional two-parameter logistic (M2PL) model.

Holds the data containers shared by every estimator in the package and the
density functions they are built on: the item response function, the joint
log-density of responses and latent traits, and the quadratic (local
variational) lower bound on that joint log-density.

Conventions
-----------
``A`` is the J x K discrimination matrix (row j is the item's loading
vector), ``B`` the length-J intercept vector and the linear predictor of
person i on item j is ``A[j] @ theta_i - B[j]``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

LOG_2PI = np.log(2.0 * np.pi)


class DomainError(ValueError):
    """Input outside the domain of a model function."""


# --------------------------------------------------------------------------
# containers
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ResponseMatrix:
    """N x J binary response data."""

    data: np.ndarray

    def __post_init__(self):
        data = check_responses(self.data)
        object.__setattr__(self, "data", data)

    @property
    def n_persons(self):
        return self.data.shape[0]

    @property
    def n_items(self):
        return self.data.shape[1]


def check_responses(Y):
    """Validate a response matrix and return it as a float array.

    Raises ``DomainError`` for anything other than a non-empty 2-D array of
    zeros and ones.
    """
    if isinstance(Y, ResponseMatrix):
        return Y.data
    Y = np.asarray(Y, dtype=float)
    if Y.ndim != 2 or Y.shape[0] < 1:
        raise DomainError(f"responses must be a non-empty N x J matrix, got shape {Y.shape}")
    if not np.all((Y == 0) | (Y == 1)):
        raise DomainError("responses must be binary (0/1) with no missing values")
    return Y


@dataclass(frozen=True)
class LoadingStructure:
    """Which discrimination entries are free (1) or fixed at zero (0).

    Parameters
    ----------
    mask : array of shape (J, K)
        Binary pattern matrix.
    exploratory : bool
        True when every entry is free and the solution is identified by
        rotation rather than by zeros.
    """

    mask: np.ndarray
    exploratory: bool = False

    def __post_init__(self):
        mask = np.asarray(self.mask)
        if mask.ndim != 2:
            raise DomainError("loading mask must be a J x K matrix")
        if not np.all((mask == 0) | (mask == 1)):
            raise DomainError("loading mask must be binary")
        mask = mask.astype(bool)
        if not mask.any(axis=1).all():
            raise DomainError("every item must load on at least one factor")
        if self.exploratory and not mask.all():
            raise DomainError("an exploratory structure frees every loading")
        object.__setattr__(self, "mask", mask)

    @classmethod
    def full(cls, n_items, n_factors):
        """All-free structure for exploratory analysis."""
        return cls(np.ones((n_items, n_factors), dtype=bool), exploratory=True)

    @property
    def n_items(self):
        return self.mask.shape[0]

    @property
    def n_factors(self):
        return self.mask.shape[1]


@dataclass
class ModelParams:
    """Item parameters and latent covariance of an M2PL model."""

    A: np.ndarray
    B: np.ndarray
    sigma_theta: np.ndarray

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.B = np.asarray(self.B, dtype=float).reshape(-1)
        self.sigma_theta = np.atleast_2d(np.asarray(self.sigma_theta, dtype=float))
        J, K = self.A.shape
        if self.B.shape != (J,):
            raise DomainError(f"B must have length {J}, got {self.B.shape}")
        if self.sigma_theta.shape != (K, K):
            raise DomainError(f"sigma_theta must be {K} x {K}")

    @property
    def n_items(self):
        return self.A.shape[0]

    @property
    def n_factors(self):
        return self.A.shape[1]

    def copy(self):
        return ModelParams(self.A.copy(), self.B.copy(), self.sigma_theta.copy())

    def check(self, structure=None, unit_diagonal=False):
        """Raise ``DomainError`` unless the parameters satisfy their invariants."""
        S = self.sigma_theta
        if np.max(np.abs(S - S.T)) > 1e-12:
            raise DomainError("sigma_theta is not symmetric")
        if np.linalg.eigvalsh(S).min() <= 0:
            raise DomainError("sigma_theta is not positive definite")
        if unit_diagonal and np.max(np.abs(np.diag(S) - 1)) > 1e-10:
            raise DomainError("sigma_theta does not have a unit diagonal")
        if structure is not None and np.any(self.A[~structure.mask] != 0):
            raise DomainError("A has non-zero entries where the structure fixes zeros")
        return self


# --------------------------------------------------------------------------
# scalar building blocks
# --------------------------------------------------------------------------


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DomainError("non-finite input")


def log1pexp(x):
    """log(1 + exp(x)) without overflow."""
    return np.logaddexp(0.0, x)


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    out = expit(np.asarray(x, dtype=float))
    return out if out.ndim else float(out)


def irf_prob(a, b, theta):
    """Probability of a correct response, ``P(Y = 1 | theta)``.

    Parameters
    ----------
    a : array of shape (K,)
        Item discriminations.
    b : float
        Item intercept.
    theta : array of shape (..., K)
        Latent trait vector(s).
    """
    a, theta = np.asarray(a, dtype=float), np.asarray(theta, dtype=float)
    _check_finite(a, b, theta)
    return sigmoid(theta @ a - b)


def eta(xi):
    """Curvature coefficient of the local bound, ``(sigmoid(xi) - 1/2) / (2 xi)``.

    Even in ``xi``; at zero the limit 1/8 is returned and a Taylor expansion
    is used for ``|xi| < 1e-4`` where the direct formula cancels.
    """
    xi = np.abs(np.asarray(xi, dtype=float))
    _check_finite(xi)
    small = xi < 1e-4
    safe = np.where(small, 1.0, xi)
    direct = np.tanh(safe / 2.0) / (4.0 * safe)
    x2 = xi * xi
    taylor = 0.125 - x2 / 96.0 + x2 * x2 / 960.0
    out = np.where(small, taylor, direct)
    return out if out.ndim else float(out)


# --------------------------------------------------------------------------
# densities
# --------------------------------------------------------------------------


def mvn_logpdf_zero_mean(theta, cov):
    """Log-density of N(0, cov) evaluated at ``theta`` of shape (..., K)."""
    theta = np.asarray(theta, dtype=float)
    cov = np.atleast_2d(cov)
    K = cov.shape[0]
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, theta.reshape(-1, K).T).T.reshape(theta.shape)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * (np.sum(z * z, axis=-1) + K * LOG_2PI + logdet)


def log_joint(y_i, theta, params):
    """Joint log-density ``log p(y_i, theta)`` for one person.

    ``theta`` may carry leading batch dimensions (..., K); the result then
    has shape (...). With zero items this reduces to the prior log-density.
    """
    y_i = np.asarray(y_i, dtype=float)
    theta = np.asarray(theta, dtype=float)
    x = theta @ params.A.T - params.B
    _check_finite(x)
    loglik = np.sum(y_i * x - log1pexp(x), axis=-1)
    return loglik + mvn_logpdf_zero_mean(theta, params.sigma_theta)


def log_lik_batch(Y, theta, params):
    """Conditional log-likelihood ``log p(Y_i | theta)`` for a batch.

    Parameters
    ----------
    Y : array of shape (N, J)
    theta : array of shape (N, ..., K)

    Returns
    -------
    array of shape (N, ...)
    """
    x = theta @ params.A.T - params.B
    y = Y.reshape((Y.shape[0],) + (1,) * (theta.ndim - 2) + (Y.shape[1],))
    return np.sum(y * x - log1pexp(x), axis=-1)


def variational_bound_pointwise(y_i, theta, xi_i, params):
    """Quadratic lower bound on :func:`log_joint` at fixed ``xi_i``.

    Each ``-log(1 + exp(a'theta - b))`` term is replaced by its tangent
    quadratic in ``x = b - a'theta``, which touches the exact value at
    ``|xi| = |x|``.
    """
    y_i = np.asarray(y_i, dtype=float)
    xi_i = np.asarray(xi_i, dtype=float)
    theta = np.asarray(theta, dtype=float)
    x = params.B - theta @ params.A.T
    e = eta(xi_i)
    terms = (
        -log1pexp(-xi_i)
        - y_i * x
        + (x - xi_i) / 2.0
        - e * (x * x - xi_i * xi_i)
    )
    return np.sum(terms, axis=-1) + mvn_logpdf_zero_mean(theta, params.sigma_theta)


def simulate_responses(params, n, rng):
    """Draw ``theta ~ N(0, sigma_theta)`` and Bernoulli responses.

    Returns
    -------
    Y : array of shape (n, J)
    theta : array of shape (n, K)
    """
    rng = np.random.default_rng(rng)
    K = params.n_factors
    theta = rng.multivariate_normal(np.zeros(K), params.sigma_theta, size=n, method="cholesky")
    p = sigmoid(theta @ params.A.T - params.B)
    Y = (rng.random(p.shape) < p).astype(float)
    return Y, theta
