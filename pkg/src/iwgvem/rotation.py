"""
Varimax and promax rotation of loading matrices, and alignment of an
estimated loading matrix to a reference.
"""

import itertools
import math
from dataclasses import dataclass

import numpy as np


class RotationError(np.linalg.LinAlgError):
    """The promax transform could not be formed."""


@dataclass
class RotationResult:
    """Output of an oblique rotation.

    Attributes
    ----------
    loadings : array of shape (J, K)
        Rotated pattern loadings, ``input @ transform``.
    phi : array of shape (K, K)
        Factor correlation matrix.
    transform : array of shape (K, K)
    varimax_iters : int
    """

    loadings: np.ndarray
    phi: np.ndarray
    transform: np.ndarray
    varimax_iters: int


def varimax_criterion(loadings, normalize=True):
    """Sum over columns of the variance of the squared loadings."""
    L = np.asarray(loadings, dtype=float)
    if normalize:
        L = L / _row_norms(L)[:, None]
    sq = L * L
    return float(np.sum(np.mean(sq * sq, axis=0) - np.mean(sq, axis=0) ** 2))


def _row_norms(L):
    h = np.sqrt(np.sum(L * L, axis=1))
    return np.where(h > 0, h, 1.0)


def varimax(loadings, normalize=True, tol=1e-8, max_iter=1000):
    """Orthogonal varimax rotation by successive pairwise plane rotations.

    Parameters
    ----------
    loadings : array of shape (J, K)
    normalize : bool
        Apply Kaiser row normalization during the rotation (undone on
        output).
    tol : float
        Stop when a full sweep changes the criterion by less than ``tol``.
    max_iter : int
        Maximum number of sweeps.

    Returns
    -------
    rotated : array of shape (J, K)
        ``loadings @ T``.
    T : array of shape (K, K)
        Orthogonal rotation matrix.
    n_sweeps : int
    """
    L = np.asarray(loadings, dtype=float)
    J, K = L.shape
    if K == 1:
        return L.copy(), np.eye(1), 0
    if not np.any(L):
        raise ValueError("cannot rotate an all-zero loading matrix")
    h = _row_norms(L) if normalize else np.ones(J)
    X = L / h[:, None]
    T = np.eye(K)
    crit = varimax_criterion(X, normalize=False)
    sweeps = 0
    for sweeps in range(1, max_iter + 1):
        for p, q in itertools.combinations(range(K), 2):
            x, y = X[:, p], X[:, q]
            u = x * x - y * y
            v = 2.0 * x * y
            a, b = u.sum(), v.sum()
            num = 2.0 * np.dot(u, v) - 2.0 * a * b / J
            den = np.dot(u, u) - np.dot(v, v) - (a * a - b * b) / J
            phi = 0.25 * math.atan2(num, den)
            c, s = math.cos(phi), math.sin(phi)
            G = np.eye(K)
            G[p, p], G[q, p], G[p, q], G[q, q] = c, s, -s, c
            X = X @ G
            T = T @ G
        new = varimax_criterion(X, normalize=False)
        done = abs(new - crit) < tol
        crit = new
        if done:
            break
    return L @ T, T, sweeps


def promax(loadings, power=4):
    """Oblique promax rotation.

    Varimax first; the target is the varimax solution with every loading
    raised to ``power`` (sign kept); a least-squares fit to the target gives
    the transform, whose columns are scaled so the implied factor
    correlation matrix has a unit diagonal.

    Returns
    -------
    RotationResult
        ``phi = inv(U'U)`` for the scaled transform ``U``, so that
        ``loadings @ loadings.T == rotated @ phi @ rotated.T``.
    """
    L = np.asarray(loadings, dtype=float)
    J, K = L.shape
    if K == 1:
        return RotationResult(L.copy(), np.eye(1), np.eye(1), 0)
    V, T, sweeps = varimax(L)
    target = V * np.abs(V) ** (power - 1)
    U, *_ = np.linalg.lstsq(V, target, rcond=None)
    try:
        d = np.diag(np.linalg.inv(U.T @ U))
    except np.linalg.LinAlgError as exc:
        raise RotationError("promax transform is singular") from exc
    if np.any(d <= 0) or not np.all(np.isfinite(d)):
        raise RotationError("promax transform is singular")
    U = U * np.sqrt(d)
    phi = np.linalg.inv(U.T @ U)
    phi = 0.5 * (phi + phi.T)
    np.fill_diagonal(phi, 1.0)
    return RotationResult(V @ U, phi, T @ U, sweeps)


def align_to_truth(est_loadings, true_loadings, phi=None):
    """Column permutation and sign flips bringing an estimate closest to truth.

    Exhaustive over all ``K!`` permutations; for each, the best sign of a
    column is that of its inner product with the matching true column.

    Returns
    -------
    perm : tuple of int
        ``aligned[:, k] = signs[k] * est[:, perm[k]]``.
    signs : array of shape (K,)
    aligned : array of shape (J, K)
    aligned_phi : array of shape (K, K) or None
        ``phi`` transformed consistently, when given.
    """
    E = np.asarray(est_loadings, dtype=float)
    T = np.asarray(true_loadings, dtype=float)
    if E.shape != T.shape:
        raise ValueError("estimate and truth must have the same shape")
    K = E.shape[1]
    best = None
    for perm in itertools.permutations(range(K)):
        P = E[:, perm]
        signs = np.where(np.sum(P * T, axis=0) < 0, -1.0, 1.0)
        dist = np.sum((P * signs - T) ** 2)
        if best is None or dist < best[0]:
            best = (dist, perm, signs)
    _, perm, signs = best
    aligned = E[:, perm] * signs
    aligned_phi = None
    if phi is not None:
        phi = np.asarray(phi, dtype=float)
        aligned_phi = phi[np.ix_(perm, perm)] * np.outer(signs, signs)
    return perm, signs, aligned, aligned_phi
