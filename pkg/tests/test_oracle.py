"""Reference implementations validated against first principles."""

import numpy as np
from scipy import integrate, stats

from varsmooth import oracle


def random_lgssm(rng, L=3, N=2):
    A = rng.normal(size=(L, L))
    A *= 0.9 / np.max(np.abs(np.linalg.eigvals(A)))
    C = rng.normal(size=(N, L))
    Q = rng.uniform(0.2, 1.0, size=L)
    R = rng.uniform(0.2, 1.0, size=N)
    m1 = rng.normal(size=L)
    P1 = rng.uniform(0.5, 1.5, size=L)
    return A, Q, C, R, m1, P1


def simulate_lgssm(rng, A, Q, C, R, m1, P1, T):
    L = A.shape[0]
    N = C.shape[0]
    z = m1 + np.sqrt(P1) * rng.normal(size=L)
    ys = np.zeros((T, N))
    for t in range(T):
        ys[t] = C @ z + np.sqrt(R) * rng.normal(size=N)
        z = A @ z + np.sqrt(Q) * rng.normal(size=L)
    return ys


class TestKalmanFilter:
    def test_near_exact_observation(self):
        rng = np.random.default_rng(0)
        L = 2
        A = 0.8 * np.eye(L)
        ys = rng.normal(size=(4, L))
        res = oracle.kalman_filter(A, np.ones(L), np.eye(L), 1e-10 * np.ones(L),
                                   np.zeros(L), np.ones(L), ys)
        np.testing.assert_allclose(res.means, ys, atol=1e-6)

    def test_memoryless_when_dynamics_zero(self):
        rng = np.random.default_rng(1)
        L, N, T = 2, 2, 5
        C = rng.normal(size=(N, L))
        R = np.array([0.5, 0.7])
        ys = rng.normal(size=(T, N))
        res = oracle.kalman_filter(np.zeros((L, L)), np.ones(L), C, R,
                                   np.zeros(L), np.ones(L), ys)
        for t in range(1, T):
            single = oracle.kalman_filter(np.zeros((L, L)), np.ones(L), C, R,
                                          np.zeros(L), np.ones(L), ys[t:t + 1])
            np.testing.assert_allclose(res.means[t], single.means[0], atol=1e-12)

    def test_loglik_matches_joint_gaussian(self):
        rng = np.random.default_rng(2)
        A, Q, C, R, m1, P1 = random_lgssm(rng)
        ys = simulate_lgssm(rng, A, Q, C, R, m1, P1, T=12)
        res = oracle.kalman_filter(A, Q, C, R, m1, P1, ys)
        joint = oracle.lgssm_loglik_joint(A, Q, C, R, m1, P1, ys)
        np.testing.assert_allclose(res.loglik, joint, rtol=1e-8)


class TestRtsSmoother:
    def test_last_step_equals_filtered(self):
        rng = np.random.default_rng(3)
        A, Q, C, R, m1, P1 = random_lgssm(rng)
        ys = simulate_lgssm(rng, A, Q, C, R, m1, P1, T=8)
        res = oracle.kalman_filter(A, Q, C, R, m1, P1, ys)
        sm, sP = oracle.rts_smoother(res)
        np.testing.assert_allclose(sm[-1], res.means[-1], atol=1e-12)
        np.testing.assert_allclose(sP[-1], res.covs[-1], atol=1e-12)

    def test_matches_joint_gaussian_conditioning(self):
        rng = np.random.default_rng(4)
        L, N, T = 2, 2, 6
        A, Q, C, R, m1, P1 = random_lgssm(rng, L=L, N=N)
        ys = simulate_lgssm(rng, A, Q, C, R, m1, P1, T=T)
        res = oracle.kalman_filter(A, Q, C, R, m1, P1, ys)
        sm, sP = oracle.rts_smoother(res)

        # brute force: condition the stacked joint Gaussian on all observations
        mz = np.zeros(T * L)
        mz[:L] = m1
        for t in range(1, T):
            mz[t * L:(t + 1) * L] = A @ mz[(t - 1) * L:t * L]
        Pz = np.zeros((T * L, T * L))
        Pz[:L, :L] = np.diag(P1)
        for t in range(1, T):
            prev = Pz[(t - 1) * L:t * L, (t - 1) * L:t * L]
            Pz[t * L:(t + 1) * L, t * L:(t + 1) * L] = A @ prev @ A.T + np.diag(Q)
            for s in range(t):
                blk = Pz[(t - 1) * L:t * L, s * L:(s + 1) * L]
                Pz[t * L:(t + 1) * L, s * L:(s + 1) * L] = A @ blk
                Pz[s * L:(s + 1) * L, t * L:(t + 1) * L] = (A @ blk).T
        Cbig = np.kron(np.eye(T), C)
        Sy = Cbig @ Pz @ Cbig.T + np.kron(np.eye(T), np.diag(R))
        gain = Pz @ Cbig.T @ np.linalg.inv(Sy)
        post_m = mz + gain @ (ys.reshape(-1) - Cbig @ mz)
        post_P = Pz - gain @ Cbig @ Pz
        for t in range(T):
            np.testing.assert_allclose(sm[t], post_m[t * L:(t + 1) * L], atol=1e-8)
            np.testing.assert_allclose(
                sP[t], post_P[t * L:(t + 1) * L, t * L:(t + 1) * L], atol=1e-8
            )


class TestDenseKl:
    def test_identical_is_zero(self):
        rng = np.random.default_rng(5)
        B = rng.normal(size=(3, 3))
        P = B @ B.T + np.eye(3)
        m = rng.normal(size=3)
        assert abs(oracle.dense_kl(m, P, m, P)) < 1e-12

    def test_scalar_formula(self):
        got = oracle.dense_kl(np.zeros(1), np.eye(1), np.zeros(1), 2.0 * np.eye(1))
        np.testing.assert_allclose(got, 0.5 * (0.5 + np.log(2.0) - 1.0), rtol=1e-12)

    def test_matches_quadrature_1d(self):
        m0, p0 = 0.3, 0.8
        m1, p1 = -0.5, 1.7

        def integrand(x):
            q = stats.norm.pdf(x, m0, np.sqrt(p0))
            return q * (stats.norm.logpdf(x, m0, np.sqrt(p0))
                        - stats.norm.logpdf(x, m1, np.sqrt(p1)))

        expected, _ = integrate.quad(integrand, -12, 12)
        got = oracle.dense_kl(np.array([m0]), np.array([[p0]]),
                              np.array([m1]), np.array([[p1]]))
        np.testing.assert_allclose(got, expected, atol=1e-9)


def test_gaussian_expected_loglik_matches_mc():
    rng = np.random.default_rng(6)
    N, L = 2, 3
    C = rng.normal(size=(N, L))
    d = rng.normal(size=N)
    R = rng.uniform(0.5, 1.5, size=N)
    m = rng.normal(size=L)
    B = rng.normal(size=(L, L))
    P = B @ B.T + 0.5 * np.eye(L)
    y = rng.normal(size=N)
    exact = oracle.gaussian_expected_loglik_dense(C, d, R, y, m, P)
    n = 200_000
    zs = rng.multivariate_normal(m, P, size=n)
    resid = y - zs @ C.T - d
    ll = -0.5 * (np.sum(resid**2 / R, axis=1) + np.sum(np.log(2 * np.pi * R)))
    se = ll.std() / np.sqrt(n)
    assert abs(ll.mean() - exact) < 4 * se
