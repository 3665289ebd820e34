"""Single-pass variational filtering and ELBO assembly.

Two recursions over t = 1..T:

  - variational_filter: smoothing-focused. Each step propagates the previous
    posterior's samples through the dynamics, moment-matches a structured
    predictive, applies the step's low-rank natural-parameter update, samples
    the new posterior, and accumulates KL(q_t || qbar_t) in closed form.
  - realtime_filter: filtering-focused. The recursion runs through the
    filtered posterior (predictive + alpha_t); the smoothed posterior adds
    beta_{t+1} on top as a second rank update. Its KL reference is a
    predictive built from propagated smoothed samples, so two sample streams
    are maintained.

The first step uses the prior initial distribution as predictive, encoded
with an all-zero factor panel so every step of a pass has identical shapes
and the whole pass stacks into one pytree.

All randomness is caller-supplied standard-normal noise, making passes
bit-reproducible and differentiable end to end.
"""

from __future__ import annotations

from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from . import dynamics, likelihoods
from .errors import ConsistencyError, ShapeError, VarsmoothError
from .lowrank import (
    KL_NEGATIVITY_TOL,
    LowRankNatUpdate,
    PosteriorGaussian,
    PredictiveGaussian,
    cov_mvm,
    kl_post_pred,
    kl_vs_predictive,
    kl_vs_predictive_terms,
    posterior_update,
    predictive_from_moments,
    predictive_from_samples,
    sample_posterior,
)


class SmoothingPass(NamedTuple):
    """Stacked per-step results of one smoothing-focused pass.

    posts holds the T posteriors as one pytree with a leading time axis on
    every leaf; posts.pred is the matching stack of predictives. samples is
    (T, L, S) and kls is (T,).
    """

    posts: PosteriorGaussian
    samples: jnp.ndarray
    kls: jnp.ndarray


class RealtimePass(NamedTuple):
    """Stacked per-step results of one filtering-focused pass.

    filt_posts are the filtered posteriors (predictive + alpha); smooth_posts
    the smoothed ones (filtered + beta_{t+1}) whose base is the filtered
    posterior. smooth_preds are the smoothed-sample predictives the KL is
    measured against. samples is the smoothed stream (used by the ELBO),
    filt_samples the filtered stream (used by the recursion).
    """

    filt_posts: PosteriorGaussian
    smooth_posts: PosteriorGaussian
    smooth_preds: PredictiveGaussian
    samples: jnp.ndarray
    filt_samples: jnp.ndarray
    kls: jnp.ndarray


class FilterNoise(NamedTuple):
    zbar: jnp.ndarray  # (T, L + S, S)
    w: jnp.ndarray     # (T, r, S)


class RealtimeNoise(NamedTuple):
    filt_zbar: jnp.ndarray    # (T, L + S, S)
    filt_w: jnp.ndarray       # (T, r_alpha, S)
    smooth_zbar: jnp.ndarray  # (T, L + S + r_alpha, S)
    smooth_w: jnp.ndarray     # (T, r_beta, S)


def filter_noise(key, T: int, L: int, S: int, r: int) -> FilterNoise:
    k1, k2 = jax.random.split(key)
    return FilterNoise(
        zbar=jax.random.normal(k1, (T, L + S, S)),
        w=jax.random.normal(k2, (T, r, S)),
    )


def realtime_noise(key, T: int, L: int, S: int, r_alpha: int, r_beta: int) -> RealtimeNoise:
    k1, k2, k3, k4 = jax.random.split(key, 4)
    return RealtimeNoise(
        filt_zbar=jax.random.normal(k1, (T, L + S, S)),
        filt_w=jax.random.normal(k2, (T, r_alpha, S)),
        smooth_zbar=jax.random.normal(k3, (T, L + S + r_alpha, S)),
        smooth_w=jax.random.normal(k4, (T, r_beta, S)),
    )


def initial_predictive(dyn_params: dict, S: int) -> PredictiveGaussian:
    """The prior initial distribution as a rank-S predictive with zero panel.

    The zero columns contribute nothing (the covariance stays diagonal) but
    keep the step-1 pytree the same shape as every later step.
    """
    m1, q1 = dynamics.initial_state(dyn_params)
    L = m1.shape[0]
    return predictive_from_moments(m1, jnp.zeros((L, S)), q1)


def _prepend(first, rest):
    return jax.tree_util.tree_map(
        lambda a, b: jnp.concatenate([a[None], b], axis=0), first, rest
    )


def _annotate(step: int, err: Exception):
    raise type(err)(f"step {step}: {err}") from err


def variational_filter(dyn_cfg, dyn_params, kk, KK, noise: FilterNoise,
                       checked: bool = False) -> SmoothingPass:
    """Runs the smoothing-focused pass over one sequence.

    Args:
        kk: (T, L) pseudo-observation shifts.
        KK: (T, L, r) pseudo-observation factor panels.
        noise: pre-drawn standard normal noise; S is taken from its shape.
        checked: run an eager Python loop instead of a compiled scan, so
            numeric failures raise immediately with the step index attached.

    Returns:
        SmoothingPass with every per-step quantity stacked along time.
    """
    kk = jnp.asarray(kk, dtype=jnp.float64)
    KK = jnp.asarray(KK, dtype=jnp.float64)
    if kk.ndim != 2 or KK.ndim != 3 or kk.shape != KK.shape[:2]:
        raise ShapeError(f"incompatible pseudo-obs shapes {kk.shape}, {KK.shape}")
    T, L = kk.shape
    S = noise.zbar.shape[2]
    if noise.zbar.shape != (T, L + S, S) or noise.w.shape[:2] != (T, KK.shape[2]):
        raise ShapeError(
            f"noise shapes {noise.zbar.shape}, {noise.w.shape} do not match "
            f"T={T}, L={L}, r={KK.shape[2]}"
        )
    q = dynamics.process_noise(dyn_params)

    def first_step():
        pred = initial_predictive(dyn_params, S)
        post = posterior_update(pred, LowRankNatUpdate(k=kk[0], K=KK[0]))
        zs = sample_posterior(post, noise.zbar[0], noise.w[0])
        return post, zs, kl_post_pred(post)

    def step(zs_prev, t):
        prop = dynamics.propagate(dyn_cfg, dyn_params, zs_prev)
        pred = predictive_from_samples(prop, q)
        post = posterior_update(pred, LowRankNatUpdate(k=kk[t], K=KK[t]))
        zs = sample_posterior(post, noise.zbar[t], noise.w[t])
        return zs, (post, zs, kl_post_pred(post))

    if checked:
        try:
            post1, z1, kl1 = first_step()
        except VarsmoothError as e:
            _annotate(1, e)
        outs = []
        zs = z1
        for t in range(1, T):
            try:
                zs, out = step(zs, t)
            except VarsmoothError as e:
                _annotate(t + 1, e)
            outs.append(out)
        if outs:
            rest = jax.tree_util.tree_map(lambda *xs: jnp.stack(xs), *outs)
            posts, samples, kls = _prepend((post1, z1, kl1), rest)
        else:
            posts, samples, kls = jax.tree_util.tree_map(
                lambda x: x[None], (post1, z1, kl1)
            )
        return SmoothingPass(posts=posts, samples=samples, kls=kls)

    post1, z1, kl1 = first_step()
    if T == 1:
        posts, samples, kls = jax.tree_util.tree_map(
            lambda x: x[None], (post1, z1, kl1)
        )
        return SmoothingPass(posts=posts, samples=samples, kls=kls)
    _, rest = jax.lax.scan(step, z1, jnp.arange(1, T))
    posts, samples, kls = _prepend((post1, z1, kl1), rest)
    return SmoothingPass(posts=posts, samples=samples, kls=kls)


def variational_filter_exact(dyn_cfg, dyn_params, kk, KK) -> SmoothingPass:
    """Smoothing pass with closed-form moment propagation (linear dynamics).

    Replaces the Monte-Carlo moment matching by the exact affine pushforward:
    the predictive factor panel is A chol(P_{t-1}), which reproduces
    A P_{t-1} A^T + Q without sampling error. With conjugate pseudo
    observations this makes the whole pass exact, so the bound is tight.

    The stored "samples" are the propagated posterior mean replicated twice
    (enough for downstream shape contracts; Monte-Carlo quantities should not
    be read off an exact pass).
    """
    if dyn_cfg.kind != "linear":
        raise ValueError("exact propagation requires linear dynamics")
    kk = jnp.asarray(kk, dtype=jnp.float64)
    KK = jnp.asarray(KK, dtype=jnp.float64)
    T, L = kk.shape
    A = dyn_params["net"]["A"]
    b = dyn_params["net"]["b"]
    q = dynamics.process_noise(dyn_params)
    eye = jnp.eye(L)

    def finish(pred, t):
        post = posterior_update(pred, LowRankNatUpdate(k=kk[t], K=KK[t]))
        P = cov_mvm(post, eye)
        return post, P

    pred1 = initial_predictive(dyn_params, L)
    post1, P1 = finish(pred1, 0)

    def step(carry, t):
        m_prev, P_prev = carry
        Mc = A @ jnp.linalg.cholesky(P_prev)
        pred = predictive_from_moments(A @ m_prev + b, Mc, q)
        post, P = finish(pred, t)
        return (post.m, P), (post, kl_post_pred(post))

    if T == 1:
        posts, kls = jax.tree_util.tree_map(
            lambda x: x[None], (post1, kl_post_pred(post1))
        )
    else:
        _, rest = jax.lax.scan(step, (post1.m, P1), jnp.arange(1, T))
        posts, kls = _prepend((post1, kl_post_pred(post1)), rest)
    samples = jnp.broadcast_to(posts.m[:, :, None], (T, L, 2))
    return SmoothingPass(posts=posts, samples=samples, kls=kls)


def realtime_filter(dyn_cfg, dyn_params, a, A, b, B, noise: RealtimeNoise,
                    checked: bool = False) -> RealtimePass:
    """Runs the filtering-focused pass over one sequence.

    Args:
        a, A: (T, L) and (T, L, r_alpha) local updates, aligned to their own
            step.
        b, B: (T, L) and (T, L, r_beta) backward updates, aligned to their
            own step; the recursion pairs step t with beta_{t+1} and uses
            beta_{T+1} = 0, so the shift happens here.
        noise: four pre-drawn noise tensors, one pair per sample stream.
    """
    a = jnp.asarray(a, dtype=jnp.float64)
    A = jnp.asarray(A, dtype=jnp.float64)
    b = jnp.asarray(b, dtype=jnp.float64)
    B = jnp.asarray(B, dtype=jnp.float64)
    if a.shape != b.shape or a.shape != A.shape[:2] or b.shape != B.shape[:2]:
        raise ShapeError("local and backward update shapes disagree")
    T, L = a.shape
    S = noise.filt_zbar.shape[2]
    q = dynamics.process_noise(dyn_params)
    b_next = jnp.concatenate([b[1:], jnp.zeros((1, L))], axis=0)
    B_next = jnp.concatenate([B[1:], jnp.zeros((1,) + B.shape[1:])], axis=0)

    def updates(t):
        return (LowRankNatUpdate(k=a[t], K=A[t]),
                LowRankNatUpdate(k=b_next[t], K=B_next[t]))

    def build(pred_filt, pred_smooth, t):
        alpha, beta = updates(t)
        filt = posterior_update(pred_filt, alpha)
        smooth = posterior_update(filt, beta)
        z_filt = sample_posterior(filt, noise.filt_zbar[t], noise.filt_w[t])
        z_smooth = sample_posterior(smooth, noise.smooth_zbar[t], noise.smooth_w[t])
        kl = kl_vs_predictive(smooth, pred_smooth)
        return (filt, smooth, pred_smooth, z_smooth, z_filt, kl)

    def first_step():
        pred = initial_predictive(dyn_params, S)
        return build(pred, pred, 0)

    def step(carry, t):
        z_filt_prev, z_smooth_prev = carry
        pred_filt = predictive_from_samples(
            dynamics.propagate(dyn_cfg, dyn_params, z_filt_prev), q
        )
        pred_smooth = predictive_from_samples(
            dynamics.propagate(dyn_cfg, dyn_params, z_smooth_prev), q
        )
        out = build(pred_filt, pred_smooth, t)
        return (out[4], out[3]), out

    if checked:
        try:
            first = first_step()
        except VarsmoothError as e:
            _annotate(1, e)
        outs = []
        carry = (first[4], first[3])
        for t in range(1, T):
            try:
                carry, out = step(carry, t)
            except VarsmoothError as e:
                _annotate(t + 1, e)
            outs.append(out)
        if outs:
            rest = jax.tree_util.tree_map(lambda *xs: jnp.stack(xs), *outs)
            stacked = _prepend(first, rest)
        else:
            stacked = jax.tree_util.tree_map(lambda x: x[None], first)
        return RealtimePass(*stacked)

    first = first_step()
    if T == 1:
        return RealtimePass(*jax.tree_util.tree_map(lambda x: x[None], first))
    _, rest = jax.lax.scan(step, (first[4], first[3]), jnp.arange(1, T))
    return RealtimePass(*_prepend(first, rest))


def realtime_kl_terms(smooth_post, smooth_pred):
    """(logdet_ratio, trace, mean_term) of one realtime step's KL.

    The smoothed posterior's update chain sits on the filtered predictive,
    while the KL reference is the smoothed-sample predictive; the pieces are
    evaluated structurally without materializing either covariance.
    """
    return kl_vs_predictive_terms(smooth_post, smooth_pred)


def expected_logliks(lik_cfg, lik_params, ys, samples, obs_mask=None):
    """Per-step Monte-Carlo expected log-likelihood, (T,).

    Masked steps contribute exactly zero: their observation is replaced by
    zeros before evaluation (so arbitrary payloads in masked slots cannot
    poison the value) and the result is multiplied by the keep indicator.
    """
    ys = jnp.asarray(ys, dtype=jnp.float64)
    if obs_mask is None:
        keep = jnp.ones(ys.shape[0])
        y_safe = ys
    else:
        mask = jnp.asarray(obs_mask, dtype=bool)
        keep = 1.0 - mask.astype(ys.dtype)
        y_safe = jnp.where(mask[:, None], 0.0, ys)
    ell = jax.vmap(
        lambda y, zs: likelihoods.expected_loglik(lik_cfg, lik_params, y, zs)
    )(y_safe, samples)
    return ell * keep


def elbo_terms(pass_, lik_cfg, lik_params, ys, obs_mask=None):
    """(per-step expected log-likelihood, per-step KL) for either pass type."""
    ell = expected_logliks(lik_cfg, lik_params, ys, pass_.samples, obs_mask)
    return ell, pass_.kls


def elbo(pass_, lik_cfg, lik_params, ys, obs_mask=None):
    """Evidence lower bound of one pass: sum of step log-likelihoods minus KLs."""
    ell, kls = elbo_terms(pass_, lik_cfg, lik_params, ys, obs_mask)
    return jnp.sum(ell) - jnp.sum(kls)


def elbo_exact_gaussian(pass_, lik_cfg, lik_params, ys, obs_mask=None):
    """ELBO with the Gaussian expected log-likelihood in closed form.

    Replaces the Monte-Carlo reconstruction term by its exact value under
    each step's posterior; with an exact pass on a linear-Gaussian model this
    equals the log marginal likelihood.
    """
    ys = jnp.asarray(ys, dtype=jnp.float64)
    ell = jax.vmap(
        lambda y, post: likelihoods.expected_loglik_gaussian_exact(
            lik_cfg, lik_params, y, post
        )
    )(ys, pass_.posts)
    if obs_mask is not None:
        ell = ell * (1.0 - jnp.asarray(obs_mask, dtype=ys.dtype))
    return jnp.sum(ell) - jnp.sum(pass_.kls)


def validate_pass(pass_) -> None:
    """Raises ConsistencyError if any step's KL dips below the tolerance.

    Compiled passes skip the per-step eager check, so callers that want the
    numeric-consistency guarantee run this on the stacked result.
    """
    kls = np.asarray(pass_.kls)
    if np.any(kls < KL_NEGATIVITY_TOL):
        t = int(np.argmin(kls))
        raise ConsistencyError(
            f"KL divergence {float(kls[t])} below {KL_NEGATIVITY_TOL} at step {t + 1}"
        )


class ForecastResult(NamedTuple):
    samples: jnp.ndarray  # (horizon + 1, L, S')
    mean: jnp.ndarray     # (horizon + 1, L)
    std: jnp.ndarray      # (horizon + 1, L)


def forecast(dyn_cfg, dyn_params, post, horizon: int, zbar_noise, w_noise,
             step_noise) -> ForecastResult:
    """Rolls sampled trajectories forward from a posterior.

    Args:
        post: posterior at the forecast origin.
        horizon: number of steps to push forward (0 returns just the origin
            samples).
        zbar_noise, w_noise: posterior sampling noise (see sample_posterior).
        step_noise: (horizon, L, S') process noise, zero for mean rollouts.

    Returns:
        samples (horizon+1, L, S') with index 0 the origin draws, plus the
        per-horizon sample mean and standard deviation.
    """
    step_noise = jnp.asarray(step_noise, dtype=jnp.float64)
    if step_noise.ndim != 3 or step_noise.shape[0] != horizon:
        raise ShapeError(
            f"step noise has shape {step_noise.shape}, expected ({horizon}, L, draws)"
        )
    z0 = sample_posterior(post, zbar_noise, w_noise)
    q = dynamics.process_noise(dyn_params)

    def step(zs, eps):
        nxt = dynamics.propagate(dyn_cfg, dyn_params, zs) + q.d_sqrt[:, None] * eps
        return nxt, nxt

    _, rolled = jax.lax.scan(step, z0, step_noise)
    samples = jnp.concatenate([z0[None], rolled], axis=0)
    return ForecastResult(
        samples=samples, mean=jnp.mean(samples, axis=2), std=jnp.std(samples, axis=2)
    )


def _marginals(posts, samples, max_dense_dim: int):
    means = posts.m
    L = means.shape[1]
    if L <= max_dense_dim:
        eye = jnp.eye(L)
        variances = jax.vmap(
            lambda post: jnp.diagonal(cov_mvm(post, eye))
        )(posts)
    else:
        variances = jnp.var(samples, axis=2)
    return means, variances


def posterior_marginals(pass_, max_dense_dim: int = 512):
    """Per-step marginal means and variances of a pass.

    Small state dimensions materialize the diagonal exactly through
    covariance multiplies against the identity; larger ones fall back to the
    sample variance of the stored draws.
    """
    posts = pass_.posts if isinstance(pass_, SmoothingPass) else pass_.smooth_posts
    return _marginals(posts, pass_.samples, max_dense_dim)


def filtered_marginals(pass_: RealtimePass, max_dense_dim: int = 512):
    """Marginals of the filtered (causal) posteriors of a realtime pass."""
    return _marginals(pass_.filt_posts, pass_.filt_samples, max_dense_dim)
