"""Observation models p(y_t | z_t) and their expected log-likelihoods.

Only the first read_dim latent coordinates drive the observation; latents
beyond read_dim receive no direct likelihood gradient and are free to carry
dynamics-only structure.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import jax
import jax.numpy as jnp
import numpy as np
from jax import core as jax_core
from jax.scipy.special import gammaln

from varsmooth.errors import ShapeError
from varsmooth.lowrank import cov_mvm

logger = logging.getLogger("varsmooth.likelihoods")

LOG_RATE_CLAMP = 30.0


@dataclass(frozen=True)
class LikelihoodConfig:
    kind: str  # "gaussian" or "poisson"
    obs_dim: int
    read_dim: int

    def __post_init__(self):
        if self.kind not in ("gaussian", "poisson"):
            raise ValueError(f"unknown likelihood kind {self.kind!r}")


def init_likelihood_params(cfg: LikelihoodConfig, key) -> dict:
    C = jax.random.normal(key, (cfg.obs_dim, cfg.read_dim)) / jnp.sqrt(cfg.read_dim)
    if cfg.kind == "gaussian":
        return {"C": C, "d": jnp.zeros(cfg.obs_dim), "log_r": jnp.zeros(cfg.obs_dim)}
    return {"C": C, "b": jnp.zeros(cfg.obs_dim)}


def _check_counts(cfg, y):
    # numpy so the check cannot be staged out under an active trace
    if cfg.kind == "poisson" and not isinstance(y, jax_core.Tracer):
        if np.any(np.asarray(y) < 0):
            raise ValueError("Poisson counts must be nonnegative")


def loglik(cfg: LikelihoodConfig, params: dict, y, z):
    """Exact log density log p(y | z) for one observation and one state."""
    y = jnp.asarray(y, dtype=jnp.float64)
    z = jnp.asarray(z)
    if y.shape != (cfg.obs_dim,):
        raise ShapeError(f"y has shape {y.shape}, expected ({cfg.obs_dim},)")
    zr = z[: cfg.read_dim]
    if cfg.kind == "gaussian":
        r = jnp.exp(params["log_r"])
        resid = y - params["C"] @ zr - params["d"]
        return -0.5 * jnp.sum(resid**2 / r + jnp.log(2.0 * jnp.pi * r))
    _check_counts(cfg, y)
    eta_raw = params["C"] @ zr + params["b"]
    eta = jnp.clip(eta_raw, -LOG_RATE_CLAMP, LOG_RATE_CLAMP)
    if not isinstance(eta_raw, jax_core.Tracer) and np.any(
        np.abs(np.asarray(eta_raw)) > LOG_RATE_CLAMP
    ):
        logger.warning("Poisson log rate clamped to +/-%s", LOG_RATE_CLAMP)
    return jnp.sum(y * eta - jnp.exp(eta) - gammaln(y + 1.0))


def expected_loglik(cfg: LikelihoodConfig, params: dict, y, samples):
    """Monte-Carlo expected log-likelihood over an (L, S) sample panel."""
    samples = jnp.asarray(samples)
    if samples.ndim != 2:
        raise ShapeError(f"expected (L, S) sample panel, got {samples.shape}")
    lls = jax.vmap(lambda z: loglik(cfg, params, y, z), in_axes=1)(samples)
    return jnp.mean(lls)


def expected_loglik_gaussian_exact(cfg: LikelihoodConfig, params: dict, y, post):
    """Closed form E_{z ~ post}[log N(y | C z + d, R)] for Gaussian readouts.

    Equals log N(y | C m + d, R) - 1/2 tr(C^T R^(-1) C P), with the trace
    evaluated through structured covariance products (no dense P).
    """
    if cfg.kind != "gaussian":
        raise ValueError("closed-form expectation is Gaussian-only")
    C = params["C"]
    r = jnp.exp(params["log_r"])
    L = post.m.shape[0]
    E = jnp.zeros((L, cfg.obs_dim)).at[: cfg.read_dim, :].set(C.T)
    X = cov_mvm(post, E)
    quad_trace = jnp.einsum("ji,ij->j", C, X[: cfg.read_dim])
    resid = jnp.asarray(y) - C @ post.m[: cfg.read_dim] - params["d"]
    return -0.5 * jnp.sum(
        resid**2 / r + quad_trace / r + jnp.log(2.0 * jnp.pi * r)
    )


def predict_obs(cfg: LikelihoodConfig, params: dict, samples):
    """Posterior-predictive observation mean from a (T, L, S) sample stack.

    Gaussian readouts return the mean of C z + d across draws; Poisson ones
    the mean rate E[exp(eta)], which is the predictive count mean.
    """
    samples = jnp.asarray(samples)
    if samples.ndim != 3:
        raise ShapeError(f"expected (T, L, S) samples, got {samples.shape}")
    zr = samples[:, : cfg.read_dim, :]
    eta = jnp.einsum("nl,tls->tns", params["C"], zr)
    if cfg.kind == "gaussian":
        return jnp.mean(eta, axis=2) + params["d"]
    eta = jnp.clip(eta + params["b"][:, None], -LOG_RATE_CLAMP, LOG_RATE_CLAMP)
    return jnp.mean(jnp.exp(eta), axis=2)
