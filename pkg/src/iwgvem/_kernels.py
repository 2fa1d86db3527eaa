"""Compiled inner loop of the importance-weighted ascent."""

import math

import numpy as np
from numba import njit

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


@njit(cache=True)
def iw_block(Y, z, mu, L, logdet_q, A, B, prec, logdet_prior):
    """Log-weights and weighted gradient sums for draws ``mu_i + L_i z``.

    Parameters
    ----------
    Y : (N, J) responses
    z : (N, S, M, K) standard-normal draws
    mu, L, logdet_q : proposal means, Cholesky factors and log-determinants
    A, B : item parameters
    prec, logdet_prior : inverse and log-determinant of the latent covariance

    Returns
    -------
    logw : (N, S, M)
    g_A : (J, K)
        ``sum_i (1/S) sum_s sum_m wn (y - sigmoid(x)) theta``.
    g_B : (J,)
    second : (K, K)
        ``sum_i (1/S) sum_s sum_m wn theta theta'``.
    """
    N, S, M, K = z.shape
    J = A.shape[0]
    logw = np.empty((N, S, M))
    g_A = np.zeros((J, K))
    g_B = np.zeros(J)
    second = np.zeros((K, K))
    theta = np.empty((M, K))
    resid = np.empty((M, J))
    w = np.empty(M)
    const_prior = -K * HALF_LOG_2PI - 0.5 * logdet_prior
    for i in range(N):
        const_q = -K * HALF_LOG_2PI - 0.5 * logdet_q[i]
        for s in range(S):
            for m in range(M):
                zz = 0.0
                for k in range(K):
                    acc = mu[i, k]
                    for l in range(k + 1):
                        acc += L[i, k, l] * z[i, s, m, l]
                    theta[m, k] = acc
                    zz += z[i, s, m, k] * z[i, s, m, k]
                quad = 0.0
                for k in range(K):
                    row = 0.0
                    for l in range(K):
                        row += prec[k, l] * theta[m, l]
                    quad += theta[m, k] * row
                lin = 0.0
                pos = 0.0
                prod = 1.0
                logacc = 0.0
                for j in range(J):
                    x = -B[j]
                    for k in range(K):
                        x += A[j, k] * theta[m, k]
                    e = math.exp(-abs(x))
                    onepe = 1.0 + e
                    prod *= onepe
                    # each factor is at most 2, so folding every 512 items
                    # keeps the product finite
                    if (j & 511) == 511:
                        logacc += math.log(prod)
                        prod = 1.0
                    num = e
                    if x >= 0.0:
                        pos += x
                        num = 1.0
                    lin += Y[i, j] * x
                    resid[m, j] = Y[i, j] - num / onepe
                loglik = lin - pos - logacc - math.log(prod)
                logw[i, s, m] = loglik + const_prior - 0.5 * quad - const_q + 0.5 * zz
            top = logw[i, s, 0]
            for m in range(1, M):
                if logw[i, s, m] > top:
                    top = logw[i, s, m]
            total = 0.0
            for m in range(M):
                w[m] = math.exp(logw[i, s, m] - top)
                total += w[m]
            for m in range(M):
                wm = w[m] / total / S
                for j in range(J):
                    r = wm * resid[m, j]
                    g_B[j] -= r
                    for k in range(K):
                        g_A[j, k] += r * theta[m, k]
                for k in range(K):
                    for l in range(K):
                        second[k, l] += wm * theta[m, k] * theta[m, l]
    return logw, g_A, g_B, second
