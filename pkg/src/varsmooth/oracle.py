"""Dense and classical reference implementations, used only by tests.

Production paths never import this module. Everything here is allowed to be
O(L^3): dense covariances, textbook Kalman filtering and RTS smoothing,
brute-force Gaussian KL, and joint-Gaussian log densities.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from varsmooth.lowrank import PosteriorGaussian, PredictiveGaussian


def dense_cov(dist) -> np.ndarray:
    """Materializes the full covariance of a structured Gaussian."""
    if isinstance(dist, PredictiveGaussian):
        Mc = np.asarray(dist.Mc)
        return Mc @ Mc.T + np.diag(np.asarray(dist.q.d))
    base = dense_cov(dist.pred)
    U = np.asarray(dist.pbar_K)
    G_inv = np.asarray(dist.ups) @ np.asarray(dist.ups).T
    return base - U @ G_inv @ U.T


def dense_prec(dist) -> np.ndarray:
    return np.linalg.inv(dense_cov(dist))


def dense_posterior_update(m_bar, P_bar, k, K):
    """Textbook natural-parameter update: P = (Pbar^-1 + K K^T)^-1, m = P (Pbar^-1 mbar + k)."""
    m_bar = np.asarray(m_bar)
    P_bar = np.asarray(P_bar)
    K = np.asarray(K)
    J = np.linalg.inv(P_bar) + K @ K.T
    P = np.linalg.inv(J)
    m = P @ (np.linalg.solve(P_bar, m_bar) + np.asarray(k))
    return m, P


def dense_kl(m0, P0, m1, P1) -> float:
    """KL(N(m0, P0) || N(m1, P1)) via dense Cholesky."""
    m0, m1 = np.asarray(m0), np.asarray(m1)
    P0, P1 = np.asarray(P0), np.asarray(P1)
    L = m0.shape[0]
    C1 = np.linalg.cholesky(P1)
    sol = np.linalg.solve(P1, P0)
    delta = m1 - m0
    quad = delta @ np.linalg.solve(P1, delta)
    _, ld0 = np.linalg.slogdet(P0)
    ld1 = 2.0 * np.sum(np.log(np.diag(C1)))
    return 0.5 * (np.trace(sol) + quad - L + ld1 - ld0)


class KalmanResult(NamedTuple):
    means: np.ndarray       # (T, L) filtered means
    covs: np.ndarray        # (T, L, L) filtered covariances
    pred_means: np.ndarray  # (T, L) one-step predictive means
    pred_covs: np.ndarray   # (T, L, L)
    loglik: float
    A: np.ndarray
    Q: np.ndarray


def _as_cov(M, n):
    M = np.asarray(M, dtype=np.float64)
    if M.ndim == 1:
        return np.diag(M)
    if M.shape != (n, n):
        raise ValueError(f"covariance has shape {M.shape}, expected ({n}, {n})")
    return M


def kalman_filter(A, Q, C, R, m1, P1, ys) -> KalmanResult:
    """Textbook Kalman filter returning filtered moments and the exact
    log marginal likelihood. Q, R, P1 accept a diagonal vector or a full
    matrix."""
    A = np.asarray(A, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    T, N = ys.shape
    L = A.shape[0]
    Q = _as_cov(Q, L)
    R = _as_cov(R, N)
    P1 = _as_cov(P1, L)
    m_pred = np.asarray(m1, dtype=np.float64)
    P_pred = P1
    means = np.zeros((T, L))
    covs = np.zeros((T, L, L))
    pred_means = np.zeros((T, L))
    pred_covs = np.zeros((T, L, L))
    loglik = 0.0
    for t in range(T):
        pred_means[t] = m_pred
        pred_covs[t] = P_pred
        S = C @ P_pred @ C.T + R
        CS = np.linalg.cholesky(S)
        resid = ys[t] - C @ m_pred
        alpha = np.linalg.solve(S, resid)
        loglik += -0.5 * (
            resid @ alpha + 2.0 * np.sum(np.log(np.diag(CS))) + N * np.log(2.0 * np.pi)
        )
        gain = P_pred @ C.T @ np.linalg.inv(S)
        m = m_pred + gain @ resid
        P = P_pred - gain @ S @ gain.T
        P = 0.5 * (P + P.T)
        means[t] = m
        covs[t] = P
        m_pred = A @ m
        P_pred = A @ P @ A.T + Q
    return KalmanResult(means, covs, pred_means, pred_covs, float(loglik), A, Q)


def rts_smoother(res: KalmanResult):
    """Backward Rauch-Tung-Striebel recursion over a Kalman filter result."""
    T, L = res.means.shape
    sm = np.zeros((T, L))
    sP = np.zeros((T, L, L))
    sm[-1] = res.means[-1]
    sP[-1] = res.covs[-1]
    for t in range(T - 2, -1, -1):
        P_pred = res.pred_covs[t + 1]
        J = res.covs[t] @ res.A.T @ np.linalg.inv(P_pred)
        sm[t] = res.means[t] + J @ (sm[t + 1] - res.pred_means[t + 1])
        sP[t] = res.covs[t] + J @ (sP[t + 1] - P_pred) @ J.T
        sP[t] = 0.5 * (sP[t] + sP[t].T)
    return sm, sP


def lgssm_loglik_joint(A, Q, C, R, m1, P1, ys) -> float:
    """Log density of the stacked observation vector under the joint Gaussian
    implied by the LGSSM; cross-check for the Kalman likelihood."""
    A = np.asarray(A, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    T, N = ys.shape
    L = A.shape[0]
    Q = _as_cov(Q, L)
    R = _as_cov(R, N)
    P1 = _as_cov(P1, L)

    mz = np.zeros(T * L)
    mz[:L] = np.asarray(m1)
    for t in range(1, T):
        mz[t * L:(t + 1) * L] = A @ mz[(t - 1) * L:t * L]
    Pz = np.zeros((T * L, T * L))
    Pz[:L, :L] = P1
    for t in range(1, T):
        prev = Pz[(t - 1) * L:t * L, (t - 1) * L:t * L]
        Pz[t * L:(t + 1) * L, t * L:(t + 1) * L] = A @ prev @ A.T + Q
        for s in range(t):
            block = Pz[(t - 1) * L:t * L, s * L:(s + 1) * L]
            Pz[t * L:(t + 1) * L, s * L:(s + 1) * L] = A @ block
            Pz[s * L:(s + 1) * L, t * L:(t + 1) * L] = (A @ block).T
    Cbig = np.kron(np.eye(T), C)
    mean_y = Cbig @ mz
    cov_y = Cbig @ Pz @ Cbig.T + np.kron(np.eye(T), R)
    resid = ys.reshape(-1) - mean_y
    CS = np.linalg.cholesky(cov_y)
    alpha = np.linalg.solve(cov_y, resid)
    return float(
        -0.5 * (resid @ alpha + 2.0 * np.sum(np.log(np.diag(CS)))
                + T * N * np.log(2.0 * np.pi))
    )


def gaussian_expected_loglik_dense(C, d, R_diag, y, m, P) -> float:
    """E_{z ~ N(m, P)}[log N(y | C z + d, diag(R))] in dense arithmetic."""
    C = np.asarray(C, dtype=np.float64)
    R_diag = np.asarray(R_diag, dtype=np.float64)
    resid = np.asarray(y) - C @ np.asarray(m) - np.asarray(d)
    quad = np.sum(resid**2 / R_diag)
    trace = np.trace(C @ np.asarray(P) @ C.T @ np.diag(1.0 / R_diag))
    return float(-0.5 * (quad + trace + np.sum(np.log(2.0 * np.pi * R_diag))))
