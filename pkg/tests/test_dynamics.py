"""Dynamics module: mean functions, parameter mappings, simulation."""

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from varsmooth import dynamics


def mlp_cfg(L=2, hidden=(8,)):
    return dynamics.DynamicsConfig(state_dim=L, kind="mlp", hidden=hidden)


def randomized_params(cfg, seed=0, scale=0.3):
    params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(seed))
    rng = np.random.default_rng(seed + 1)
    return jax.tree_util.tree_map(
        lambda x: x + scale * jnp.asarray(rng.normal(size=x.shape)), params
    )


class TestMeanFn:
    def test_identity_at_init(self):
        cfg = mlp_cfg()
        params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
        z = jnp.asarray(np.random.default_rng(0).normal(size=2))
        np.testing.assert_array_equal(dynamics.mean_fn(cfg, params, z), z)

    def test_linear_contraction(self):
        cfg = dynamics.DynamicsConfig(state_dim=2, kind="linear")
        params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
        out = dynamics.mean_fn(cfg, params, jnp.array([1.0, 0.0]))
        np.testing.assert_allclose(out, [0.9, 0.0], rtol=1e-15)

    def test_pendulum_equilibrium(self):
        cfg = dynamics.DynamicsConfig(state_dim=2, kind="pendulum")
        params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
        out = dynamics.mean_fn(cfg, params, jnp.zeros(2))
        np.testing.assert_array_equal(out, np.zeros(2))

    def test_gradients_match_finite_differences(self):
        cfg = mlp_cfg(hidden=(5,))
        params = randomized_params(cfg, seed=3)
        z0 = jnp.asarray(np.random.default_rng(4).normal(size=2))

        g_z = jax.grad(lambda z: jnp.sum(dynamics.mean_fn(cfg, params, z)))(z0)
        eps = 1e-5
        for i in range(2):
            zp = z0.at[i].add(eps)
            zm = z0.at[i].add(-eps)
            fd = (jnp.sum(dynamics.mean_fn(cfg, params, zp))
                  - jnp.sum(dynamics.mean_fn(cfg, params, zm))) / (2 * eps)
            np.testing.assert_allclose(g_z[i], fd, rtol=1e-5)

        flat, unravel = ravel_pytree(params["net"])

        def f(v):
            p = dict(params)
            p["net"] = unravel(v)
            return jnp.sum(dynamics.mean_fn(cfg, p, z0))

        g = jax.grad(f)(flat)
        rng = np.random.default_rng(5)
        idx = rng.choice(flat.shape[0], size=8, replace=False)
        for i in idx:
            vp = flat.at[i].add(eps)
            vm = flat.at[i].add(-eps)
            fd = (f(vp) - f(vm)) / (2 * eps)
            np.testing.assert_allclose(g[i], fd, rtol=1e-5, atol=1e-10)


class TestNaturalParams:
    def test_unit_noise(self):
        cfg = dynamics.DynamicsConfig(state_dim=2, kind="linear")
        params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
        params["log_q"] = jnp.zeros(2)
        z = jnp.array([1.0, 2.0])
        nat = dynamics.natural_params(cfg, params, z)
        np.testing.assert_allclose(nat.h, dynamics.mean_fn(cfg, params, z), rtol=1e-15)

    def test_scaled_noise(self):
        cfg = dynamics.DynamicsConfig(state_dim=2, kind="linear")
        params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
        params["net"]["A"] = jnp.eye(2)
        params["net"]["b"] = jnp.array([1.0, 1.0])
        params["log_q"] = jnp.log(4.0) * jnp.ones(2)
        nat = dynamics.natural_params(cfg, params, jnp.array([1.0, 1.0]))
        np.testing.assert_allclose(nat.h, [0.5, 0.5], rtol=1e-14)
        np.testing.assert_allclose(nat.q.d_inv @ np.eye(2), np.eye(2).sum(0) / 4.0)


class TestMeanParams:
    def test_zero_mean(self):
        cfg = dynamics.DynamicsConfig(state_dim=2, kind="linear")
        params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
        params["net"]["A"] = jnp.zeros((2, 2))
        params["log_q"] = jnp.zeros(2)
        m, second = dynamics.mean_params(cfg, params, jnp.array([3.0, -1.0]))
        np.testing.assert_allclose(m, 0.0, atol=1e-15)
        np.testing.assert_allclose(second, -0.5 * np.eye(2), atol=1e-15)

    def test_unit_vector_mean(self):
        cfg = dynamics.DynamicsConfig(state_dim=2, kind="linear")
        params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
        params["net"]["A"] = jnp.zeros((2, 2))
        params["net"]["b"] = jnp.array([1.0, 0.0])
        params["log_q"] = jnp.zeros(2)
        _, second = dynamics.mean_params(cfg, params, jnp.zeros(2))
        np.testing.assert_allclose(second, -0.5 * np.array([[2.0, 0.0], [0.0, 1.0]]))

    def test_matches_monte_carlo_moments(self):
        cfg = mlp_cfg(hidden=(6,))
        params = randomized_params(cfg, seed=7)
        z = jnp.asarray(np.random.default_rng(8).normal(size=2))
        m, second = dynamics.mean_params(cfg, params, z)
        q = dynamics.process_noise(params)
        rng = np.random.default_rng(9)
        n = 200_000
        draws = np.asarray(m) + np.asarray(q.d_sqrt) * rng.normal(size=(n, 2))
        emp_second = -0.5 * (draws[:, :, None] * draws[:, None, :]).mean(axis=0)
        P = np.diag(np.asarray(q.d))
        mm = np.asarray(m)
        var = (
            np.outer(mm**2, np.diag(P)) + np.outer(np.diag(P), mm**2)
            + np.outer(np.diag(P), np.diag(P)) + P**2 + 2 * np.outer(mm, mm) * P
        )
        se = np.sqrt(var / n)
        assert np.all(np.abs(emp_second - np.asarray(second)) < 4 * (0.5 * se + 1e-4))


class TestPropagate:
    def test_columnwise_application(self):
        cfg = mlp_cfg(hidden=(6,))
        params = randomized_params(cfg, seed=10)
        zs = jnp.asarray(np.random.default_rng(11).normal(size=(2, 5)))
        out = dynamics.propagate(cfg, params, zs)
        for s in range(5):
            np.testing.assert_allclose(
                out[:, s], dynamics.mean_fn(cfg, params, zs[:, s]), rtol=1e-14
            )


class TestSimulate:
    def test_constant_under_identity(self):
        cfg = dynamics.DynamicsConfig(state_dim=2, kind="linear")
        params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
        params["net"]["A"] = jnp.eye(2)
        params["init_mean"] = jnp.array([1.0, -2.0])
        traj = dynamics.simulate(cfg, params, jnp.zeros(2), jnp.zeros((9, 2)))
        np.testing.assert_allclose(traj, np.tile([[1.0], [-2.0]], (1, 10)), atol=1e-14)

    def test_geometric_decay(self):
        cfg = dynamics.DynamicsConfig(state_dim=1, kind="linear")
        params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
        params["net"]["A"] = 0.5 * jnp.eye(1)
        params["init_mean"] = jnp.array([1.0])
        traj = dynamics.simulate(cfg, params, jnp.zeros(1), jnp.zeros((4, 1)))
        np.testing.assert_allclose(traj[0], [1.0, 0.5, 0.25, 0.125, 0.0625], rtol=1e-14)

    def test_linear_statistics_match_lyapunov(self):
        cfg = dynamics.DynamicsConfig(state_dim=2, kind="linear")
        params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
        rng = np.random.default_rng(12)
        A = rng.normal(size=(2, 2))
        A *= 0.8 / np.max(np.abs(np.linalg.eigvals(A)))
        params["net"]["A"] = jnp.asarray(A)
        params["log_q"] = jnp.log(jnp.asarray([0.3, 0.6]))
        T, n = 6, 40_000
        z1n = jnp.asarray(rng.normal(size=(n, 2)))
        stepn = jnp.asarray(rng.normal(size=(n, T - 1, 2)))
        trajs = jax.vmap(lambda a, b: dynamics.simulate(cfg, params, a, b))(z1n, stepn)
        # Lyapunov recursion for the marginal covariance
        P = np.eye(2)
        mean = np.zeros(2)
        Q = np.diag([0.3, 0.6])
        for _ in range(T - 1):
            P = A @ P @ A.T + Q
            mean = A @ mean
        final = np.asarray(trajs[:, :, -1])
        np.testing.assert_allclose(final.mean(axis=0), mean, atol=4 * np.sqrt(P.max() / n) + 1e-3)
        np.testing.assert_allclose(np.cov(final.T), P, atol=0.1)


def test_moment_matching_approaches_kalman_predict():
    # with linear dynamics the moment-matched predictive converges to the
    # exact Kalman predict step as the sample count grows
    from varsmooth import oracle
    from varsmooth.lowrank import diag_cov, predictive_from_samples

    cfg = dynamics.DynamicsConfig(state_dim=2, kind="linear")
    params = dynamics.init_dynamics_params(cfg, jax.random.PRNGKey(0))
    rng = np.random.default_rng(13)
    A = rng.normal(size=(2, 2))
    A *= 0.9 / np.max(np.abs(np.linalg.eigvals(A)))
    params["net"]["A"] = jnp.asarray(A)
    q = np.array([0.4, 0.8])
    params["log_q"] = jnp.log(jnp.asarray(q))

    m_prev = rng.normal(size=2)
    B = rng.normal(size=(2, 2))
    P_prev = B @ B.T + 0.5 * np.eye(2)
    S = 2000
    zs = rng.multivariate_normal(m_prev, P_prev, size=S).T
    pred = predictive_from_samples(
        dynamics.propagate(cfg, params, jnp.asarray(zs)), diag_cov(q)
    )
    exact_m = A @ m_prev
    exact_P = A @ P_prev @ A.T + np.diag(q)
    se = np.sqrt(np.diag(A @ P_prev @ A.T) / S)
    assert np.all(np.abs(np.asarray(pred.m) - exact_m) < 5 * se)
    np.testing.assert_allclose(oracle.dense_cov(pred), exact_P, atol=0.2)
