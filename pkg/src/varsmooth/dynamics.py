"""Prior generative dynamics: p(z_t | z_{t-1}) = N(m(z_{t-1}), Q) with diagonal Q.

The mean function comes in three kinds:
    mlp       residual network m(z) = z + MLP(z), tanh hidden layers,
              zero-initialized output layer so the initial map is the identity
    linear    m(z) = A z + b
    pendulum  Euler step of theta'' = -omega2 sin(theta) - damping theta',
              state (theta, velocity), learnable omega2 and damping

Parameters live in a nested dict pytree: the mean-function block under
"net", plus "log_q" (log diagonal of Q), "init_mean", and "log_init_var"
for the learnable initial state N(init_mean, diag(init_var)).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import jax
import jax.numpy as jnp

from varsmooth.errors import ShapeError
from varsmooth.lowrank import DiagCov, diag_cov


@dataclass(frozen=True)
class DynamicsConfig:
    state_dim: int
    kind: str = "mlp"
    hidden: tuple = (64,)
    pendulum_dt: float = 0.05

    def __post_init__(self):
        if self.kind not in ("mlp", "linear", "pendulum"):
            raise ValueError(f"unknown dynamics kind {self.kind!r}")
        if self.kind == "pendulum" and self.state_dim != 2:
            raise ValueError("pendulum dynamics need state_dim 2")


class NatParams(NamedTuple):
    """Gaussian natural parameters of the transition: h = Q^(-1) m(z).

    The precision J = Q^(-1) is carried implicitly as the DiagCov q.
    """

    h: jnp.ndarray
    q: DiagCov


def init_dynamics_params(cfg: DynamicsConfig, key) -> dict:
    L = cfg.state_dim
    if cfg.kind == "mlp":
        widths = (L,) + tuple(cfg.hidden) + (L,)
        net = {}
        keys = jax.random.split(key, len(widths) - 1)
        for i in range(len(widths) - 1):
            fan_in = widths[i]
            scale = 1.0 / jnp.sqrt(fan_in)
            w = scale * jax.random.normal(keys[i], (widths[i], widths[i + 1]))
            if i == len(widths) - 2:
                w = jnp.zeros_like(w)  # identity map at init
            net[f"w{i}"] = w
            net[f"b{i}"] = jnp.zeros(widths[i + 1])
    elif cfg.kind == "linear":
        net = {"A": 0.9 * jnp.eye(L), "b": jnp.zeros(L)}
    else:
        net = {"omega2": jnp.asarray(1.0), "damping": jnp.asarray(0.0)}
    return {
        "net": net,
        "log_q": jnp.full(L, jnp.log(0.1)),
        "init_mean": jnp.zeros(L),
        "log_init_var": jnp.zeros(L),
    }


def mean_fn(cfg: DynamicsConfig, params: dict, z):
    """Transition mean m(z) for a single state z of shape (L,)."""
    net = params["net"]
    if cfg.kind == "mlp":
        n_hidden = len(cfg.hidden)
        h = z
        for i in range(n_hidden):
            h = jnp.tanh(h @ net[f"w{i}"] + net[f"b{i}"])
        return z + h @ net[f"w{n_hidden}"] + net[f"b{n_hidden}"]
    if cfg.kind == "linear":
        return net["A"] @ z + net["b"]
    theta, vel = z[0], z[1]
    dt = cfg.pendulum_dt
    acc = -net["omega2"] * jnp.sin(theta) - net["damping"] * vel
    return jnp.stack([theta + dt * vel, vel + dt * acc])


def propagate(cfg: DynamicsConfig, params: dict, samples):
    """Applies the transition mean to each column of an (L, S) sample panel."""
    samples = jnp.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] != cfg.state_dim:
        raise ShapeError(f"expected ({cfg.state_dim}, S) panel, got {samples.shape}")
    return jax.vmap(lambda z: mean_fn(cfg, params, z), in_axes=1, out_axes=1)(samples)


def process_noise(params: dict) -> DiagCov:
    return diag_cov(jnp.exp(params["log_q"]))


def initial_state(params: dict):
    """Mean and diagonal covariance of the learnable initial distribution."""
    return params["init_mean"], diag_cov(jnp.exp(params["log_init_var"]))


def natural_params(cfg: DynamicsConfig, params: dict, z) -> NatParams:
    q = process_noise(params)
    return NatParams(h=q.d_inv * mean_fn(cfg, params, z), q=q)


def mean_params(cfg: DynamicsConfig, params: dict, z):
    """Mean-parameter pair (m, -1/2 (m m^T + Q)). Dense; diagnostic use only."""
    m = mean_fn(cfg, params, z)
    q = process_noise(params)
    return m, -0.5 * (jnp.outer(m, m) + jnp.diag(q.d))


def simulate(cfg: DynamicsConfig, params: dict, z1_noise, step_noise):
    """Generative rollout driven by caller-supplied standard normal noise.

    Args:
        z1_noise: (L,) noise for the initial draw.
        step_noise: (T-1, L) noise for the transitions.

    Returns:
        (L, T) latent trajectory with z_1 = init_mean + init_var^(1/2) noise
        and z_t = m(z_{t-1}) + Q^(1/2) noise_t.
    """
    m1, v1 = initial_state(params)
    q = process_noise(params)
    z1 = m1 + v1.d_sqrt * z1_noise

    def step(z, eps):
        z_next = mean_fn(cfg, params, z) + q.d_sqrt * eps
        return z_next, z_next

    _, rest = jax.lax.scan(step, z1, jnp.asarray(step_noise))
    return jnp.concatenate([z1[None, :], rest], axis=0).T
