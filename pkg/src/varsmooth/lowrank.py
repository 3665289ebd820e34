"""Structured Gaussian algebra on low-rank-plus-diagonal covariances.

A one-step predictive carries its covariance as Pbar = Mc Mc^T + Q with Q
diagonal, so the explicit square root [Mc Q^(1/2)] is always available. A
posterior adds a low-rank precision update K K^T and stores the small
triangular factor ups with ups ups^T = (I_r + K^T Pbar K)^(-1). Every
operation here touches only L-vectors and skinny L x S / L x r panels; no
L x L matrix is ever formed. Costs are O(L (S r + S^2 + r^2)) per call.

The update base may itself be a posterior (nested rank updates); covariance
and precision products, sampling, and log-determinants recurse through the
chain.

Everything is a pytree of float64 arrays and safe to jit, vmap, and
differentiate. Input validation (finiteness, positivity) runs only in eager
execution; traced values skip it. All inner Cholesky factorizations act on
matrices of the form I + PSD whose smallest eigenvalue is at least one, so
plain factorizations are used on the differentiable path; the escalating
jitter policy in ``robust_cholesky`` serves the dense and oracle paths where
breakdown is actually possible.
"""

from __future__ import annotations

from typing import NamedTuple, Union

import jax.numpy as jnp
import numpy as np
from jax import core as jax_core
from jax.scipy.linalg import solve_triangular

from varsmooth.errors import (
    CholeskyBreakdownError,
    ConsistencyError,
    NumericInputError,
    ShapeError,
)

KL_NEGATIVITY_TOL = -1e-9


def _is_concrete(*arrays) -> bool:
    return not any(isinstance(a, jax_core.Tracer) for a in arrays)


def _check_finite(name: str, x) -> None:
    # numpy on purpose: under an active trace, jnp ops stage out even for
    # concrete operands, and a staged check cannot be converted to bool
    if _is_concrete(x):
        arr = np.asarray(x)
        if arr.size and not np.all(np.isfinite(arr)):
            raise NumericInputError(f"{name} has non-finite entries")


class DiagCov(NamedTuple):
    """Diagonal covariance with cached inverse and square root."""

    d: jnp.ndarray
    d_inv: jnp.ndarray
    d_sqrt: jnp.ndarray


class PredictiveGaussian(NamedTuple):
    """One-step predictive N(m, Pbar) with Pbar = Mc Mc^T + Q.

    Fields:
        m: mean, shape (L,).
        Mc: centered scaled sample panel, shape (L, S).
        q: DiagCov holding the diagonal part Q.
        ups_bar: lower-triangular (S, S) factor with
            ups_bar ups_bar^T = (I_S + Mc^T Q^(-1) Mc)^(-1).
    """

    m: jnp.ndarray
    Mc: jnp.ndarray
    q: DiagCov
    ups_bar: jnp.ndarray


class LowRankNatUpdate(NamedTuple):
    """Natural-parameter update (k, K K^T) from a pseudo observation.

    r = K.shape[1] may be zero, which encodes a missing update.
    """

    k: jnp.ndarray
    K: jnp.ndarray


class PosteriorGaussian(NamedTuple):
    """Posterior N(m, P) with P^(-1) = Pbar^(-1) + K K^T, stored implicitly.

    Fields:
        m: posterior mean, shape (L,).
        pred: the base distribution the update was applied to, either a
            PredictiveGaussian or another PosteriorGaussian (nested update).
        K: precision-update square root, shape (L, r).
        ups: lower-triangular (r, r) factor with
            ups ups^T = (I_r + K^T Pbar K)^(-1).
        pbar_K: cached Pbar K, shape (L, r), where Pbar is the base covariance.

    P = Pbar - (pbar_K) ups ups^T (pbar_K)^T, never materialized.
    """

    m: jnp.ndarray
    pred: Union[PredictiveGaussian, "PosteriorGaussian"]
    K: jnp.ndarray
    ups: jnp.ndarray
    pbar_K: jnp.ndarray


def diag_cov(d) -> DiagCov:
    """Builds a DiagCov from a strictly positive diagonal of shape (L,)."""
    d = jnp.asarray(d, dtype=jnp.float64)
    if d.ndim != 1:
        raise ShapeError(f"diagonal must be a vector, got shape {d.shape}")
    _check_finite("diagonal", d)
    if _is_concrete(d) and not np.all(np.asarray(d) > 0):
        raise NumericInputError("diagonal covariance entries must be strictly positive")
    return DiagCov(d=d, d_inv=1.0 / d, d_sqrt=jnp.sqrt(d))


def inv_tril_factor(G: jnp.ndarray) -> jnp.ndarray:
    """Lower-triangular U with U U^T = G^(-1) and positive diagonal.

    Factors G = W W^T with W upper triangular (Cholesky of the index-reversed
    matrix) and returns W^(-T). For the I + PSD matrices produced in this
    module the factorization cannot break down unless the input is already
    non-finite.
    """
    r = G.shape[0]
    if r == 0:
        return jnp.zeros((0, 0), dtype=G.dtype)
    Cf = jnp.linalg.cholesky(jnp.flip(G, axis=(0, 1)))
    if _is_concrete(Cf):
        bad = ~np.isfinite(np.diagonal(np.asarray(Cf)))
        if np.any(bad):
            pivot = r - 1 - int(np.argmax(bad))
            raise CholeskyBreakdownError(
                f"Cholesky factorization failed at pivot {pivot}", pivot=pivot
            )
    W = jnp.flip(Cf, axis=(0, 1))
    return solve_triangular(W, jnp.eye(r, dtype=G.dtype), trans=1, lower=False)


def robust_cholesky(A, jitter_scale: float = 1e-8, max_tries: int = 3):
    """Lower Cholesky factor with escalating additive jitter on breakdown.

    Retries with jitter_scale * mean(diag(A)) scaled by 10 on each failure,
    up to max_tries times, then raises CholeskyBreakdownError carrying the
    offending pivot. Eager use only (dense and oracle paths); the structured
    path never needs it.
    """
    A = jnp.asarray(A)
    n = A.shape[0]
    if n == 0:
        return jnp.zeros((0, 0), dtype=A.dtype)
    C = jnp.linalg.cholesky(A)
    if isinstance(C, jax_core.Tracer):
        raise ShapeError("robust_cholesky runs eagerly only; jit plain cholesky instead")
    if np.all(np.isfinite(np.diagonal(np.asarray(C)))):
        return C
    jitter = jitter_scale * float(jnp.mean(jnp.diagonal(A)))
    eye = jnp.eye(n, dtype=A.dtype)
    for _ in range(max_tries):
        C = jnp.linalg.cholesky(A + jitter * eye)
        if np.all(np.isfinite(np.diagonal(np.asarray(C)))):
            return C
        jitter *= 10.0
    bad = ~np.isfinite(np.diagonal(np.asarray(C)))
    pivot = int(np.argmax(bad))
    raise CholeskyBreakdownError(
        f"Cholesky failed after {max_tries} jitter retries at pivot {pivot}",
        pivot=pivot,
    )


def predictive_from_moments(m, Mc, q: DiagCov) -> PredictiveGaussian:
    """Builds a PredictiveGaussian from an explicit mean and factor panel."""
    m = jnp.asarray(m, dtype=jnp.float64)
    Mc = jnp.asarray(Mc, dtype=jnp.float64)
    if m.ndim != 1 or Mc.ndim != 2 or Mc.shape[0] != m.shape[0]:
        raise ShapeError(f"incompatible shapes m {m.shape}, Mc {Mc.shape}")
    if q.d.shape != m.shape:
        raise ShapeError(f"diagonal shape {q.d.shape} does not match state dim {m.shape}")
    _check_finite("m", m)
    _check_finite("Mc", Mc)
    W = Mc / q.d_sqrt[:, None]
    G = jnp.eye(Mc.shape[1], dtype=Mc.dtype) + W.T @ W
    return PredictiveGaussian(m=m, Mc=Mc, q=q, ups_bar=inv_tril_factor(G))


def predictive_from_samples(propagated, q: DiagCov) -> PredictiveGaussian:
    """Moment-matched predictive from propagated samples.

    Args:
        propagated: (L, S) panel whose columns are the S propagated sample
            means; S >= 2.
        q: diagonal process noise.

    The mean is the column average and Mc holds the centered columns scaled
    by S^(-1/2), so Mc Mc^T is the (1/S)-normalized sample covariance.
    """
    propagated = jnp.asarray(propagated, dtype=jnp.float64)
    if propagated.ndim != 2:
        raise ShapeError(f"expected (L, S) sample panel, got {propagated.shape}")
    S = propagated.shape[1]
    if S < 2:
        raise ShapeError(f"need at least 2 samples, got {S}")
    _check_finite("propagated samples", propagated)
    m = jnp.mean(propagated, axis=1)
    Mc = (propagated - m[:, None]) / np.sqrt(S)
    return predictive_from_moments(m, Mc, q)


def _cols(v):
    if v.ndim == 1:
        return v[:, None], True
    return v, False


def prec_mvm(dist, v):
    """Applies the precision P^(-1) to v without forming any L x L matrix.

    For a predictive this is the Woodbury form
    Q^(-1) v - Q^(-1) Mc (ups_bar ups_bar^T) Mc^T Q^(-1) v in O(L S + S^2);
    for a posterior it adds K K^T v and recurses into the base. Accepts a
    vector (L,) or a panel (L, k).
    """
    V, squeeze = _cols(jnp.asarray(v))
    if V.shape[0] != dist.m.shape[0]:
        raise ShapeError(f"operand has {V.shape[0]} rows, state dim is {dist.m.shape[0]}")
    _check_finite("operand", V)
    out = _prec_cols(dist, V)
    return out[:, 0] if squeeze else out


def _prec_cols(dist, V):
    if isinstance(dist, PredictiveGaussian):
        u = dist.q.d_inv[:, None] * V
        t = dist.ups_bar.T @ (dist.Mc.T @ u)
        return u - dist.q.d_inv[:, None] * (dist.Mc @ (dist.ups_bar @ t))
    return _prec_cols(dist.pred, V) + dist.K @ (dist.K.T @ V)


def cov_mvm(dist, v):
    """Applies the covariance P to v using only structured multiplies.

    Accepts a vector (L,) or a panel (L, k). For a posterior,
    P v = Pbar v - pbar_K (ups ups^T) pbar_K^T v, recursing into the base.
    """
    V, squeeze = _cols(jnp.asarray(v))
    if V.shape[0] != dist.m.shape[0]:
        raise ShapeError(f"operand has {V.shape[0]} rows, state dim is {dist.m.shape[0]}")
    _check_finite("operand", V)
    out = _cov_cols(dist, V)
    return out[:, 0] if squeeze else out


def _cov_cols(dist, V):
    if isinstance(dist, PredictiveGaussian):
        return dist.Mc @ (dist.Mc.T @ V) + dist.q.d[:, None] * V
    base = _cov_cols(dist.pred, V)
    t = dist.ups.T @ (dist.pbar_K.T @ V)
    return base - dist.pbar_K @ (dist.ups @ t)


def posterior_update(base, upd: LowRankNatUpdate) -> PosteriorGaussian:
    """Conjugate update of a structured Gaussian by a low-rank natural update.

    Computes ups from (I_r + K^T Pbar K) by factoring the r x r matrix and
    inverting the triangular factor, then the mean

        m = mbar + Pbar k - (Pbar K) ups ups^T (K^T mbar + K^T Pbar k)

    which is P (h_bar + k) rearranged so an empty update (r = 0, or K = 0)
    returns m = mbar bit-exactly. Cost O(r^3 + L S r + S^2 r + L r^2).

    The base may be a PredictiveGaussian or another PosteriorGaussian.
    """
    k = jnp.asarray(upd.k, dtype=jnp.float64)
    K = jnp.asarray(upd.K, dtype=jnp.float64)
    L = base.m.shape[0]
    if k.shape != (L,):
        raise ShapeError(f"k has shape {k.shape}, expected ({L},)")
    if K.ndim != 2 or K.shape[0] != L:
        raise ShapeError(f"K has shape {K.shape}, expected ({L}, r)")
    _check_finite("k", k)
    _check_finite("K", K)
    r = K.shape[1]
    U = _cov_cols(base, K)
    G = jnp.eye(r, dtype=K.dtype) + K.T @ U
    ups = inv_tril_factor(G)
    pbar_k = _cov_cols(base, k[:, None])[:, 0]
    c = K.T @ (base.m + pbar_k)
    m = base.m + pbar_k - U @ (ups @ (ups.T @ c))
    return PosteriorGaussian(m=m, pred=base, K=K, ups=ups, pbar_K=U)


def noise_dim(dist) -> int:
    """Rows of standard-normal noise needed to draw one centered sample."""
    if isinstance(dist, PredictiveGaussian):
        return dist.Mc.shape[1] + dist.m.shape[0]
    return noise_dim(dist.pred) + dist.K.shape[1]


def sample_centered(dist, noise):
    """Centered draws: columns of the output are N(0, P) given standard noise.

    For a predictive the draw is [Mc Q^(1/2)] noise with the first S noise
    rows hitting Mc. For a posterior the base draw is corrected by
    -(pbar_K) ups ups^T (K^T zbar + w) with w the last r noise rows, which
    gives exactly covariance P.
    """
    noise = jnp.asarray(noise, dtype=jnp.float64)
    if noise.ndim != 2 or noise.shape[0] != noise_dim(dist):
        raise ShapeError(
            f"noise has shape {noise.shape}, expected ({noise_dim(dist)}, draws)"
        )
    return _centered(dist, noise)


def _centered(dist, noise):
    if isinstance(dist, PredictiveGaussian):
        S = dist.Mc.shape[1]
        return dist.Mc @ noise[:S] + dist.q.d_sqrt[:, None] * noise[S:]
    nb = noise_dim(dist.pred)
    zbar = _centered(dist.pred, noise[:nb])
    w = noise[nb:]
    corr = dist.pbar_K @ (dist.ups @ (dist.ups.T @ (dist.K.T @ zbar + w)))
    return zbar - corr


def sample_posterior(post: PosteriorGaussian, zbar_noise, w_noise):
    """Draws from the posterior using caller-supplied standard normal noise.

    Args:
        post: the posterior to sample.
        zbar_noise: noise for the base draw, shape (noise_dim(post.pred), S').
            For a predictive base that is (L + S, S').
        w_noise: (r, S') noise for the rank-r correction.

    Returns:
        (L, S') matrix whose columns are m + zbar - Pbar K ups ups^T
        (K^T zbar + w).
    """
    zbar_noise = jnp.asarray(zbar_noise, dtype=jnp.float64)
    w_noise = jnp.asarray(w_noise, dtype=jnp.float64)
    if w_noise.ndim != 2 or w_noise.shape[0] != post.K.shape[1]:
        raise ShapeError(
            f"w noise has shape {w_noise.shape}, expected ({post.K.shape[1]}, draws)"
        )
    noise = jnp.concatenate([zbar_noise, w_noise], axis=0)
    return post.m[:, None] + sample_centered(post, noise)


def logdet_ratio(post: PosteriorGaussian):
    """log |Pbar| / |P| = log |I_r + K^T Pbar K| = -2 sum_i log [ups]_ii."""
    return -2.0 * jnp.sum(jnp.log(jnp.diagonal(post.ups)))


def trace_term(post: PosteriorGaussian):
    """tr(Pbar^(-1) P) = L - tr(Mc^T K U U^T K^T Mc) - tr(U^T K^T Q K U).

    Requires the immediate base to be a PredictiveGaussian (its Mc and Q
    enter the identity).
    """
    pred = post.pred
    if not isinstance(pred, PredictiveGaussian):
        raise ShapeError("trace_term needs a posterior built on a predictive base")
    L = pred.m.shape[0]
    Y = (pred.Mc.T @ post.K) @ post.ups
    Z = (pred.q.d_sqrt[:, None] * post.K) @ post.ups
    return L - jnp.sum(Y * Y) - jnp.sum(Z * Z)


def kl_post_pred(post: PosteriorGaussian, pred: PredictiveGaussian = None):
    """KL(post || pred) in nats for a posterior and the predictive it updated.

    Closed form using only the stored small factors:
    (1/2) [ (mbar - m)^T Pbar^(-1) (mbar - m) + tr(Pbar^(-1) P)
            + log |Pbar| / |P| - L ].
    Exactly zero for an empty update. Raises ConsistencyError in eager mode
    if the result dips below -1e-9.
    """
    if pred is None:
        pred = post.pred
    if not isinstance(pred, PredictiveGaussian):
        raise ShapeError("kl_post_pred needs a predictive base; see kl_vs_predictive")
    L = pred.m.shape[0]
    delta = pred.m - post.m
    mean_term = delta @ prec_mvm(pred, delta)
    kl = 0.5 * (mean_term + trace_term(post) + logdet_ratio(post) - L)
    if _is_concrete(kl) and bool(kl < KL_NEGATIVITY_TOL):
        raise ConsistencyError(f"KL divergence {float(kl)} below {KL_NEGATIVITY_TOL}")
    return kl


def _logdet_cov(dist):
    if isinstance(dist, PredictiveGaussian):
        base = jnp.sum(jnp.log(dist.q.d))
        if dist.Mc.shape[1] == 0:
            return base
        return base - 2.0 * jnp.sum(jnp.log(jnp.diagonal(dist.ups_bar)))
    extra = dist.ups
    ld = _logdet_cov(dist.pred)
    if extra.shape[0] == 0:
        return ld
    return ld + 2.0 * jnp.sum(jnp.log(jnp.diagonal(extra)))


def kl_vs_predictive_terms(post, ref: PredictiveGaussian):
    """Pieces of KL(post || ref) for a posterior whose chain base is not ref.

    Returns (logdet_ratio, trace, mean_term) with
    KL = (1/2) (mean_term + trace + logdet_ratio - L). All three are computed
    structurally: the log-determinant ratio telescopes through the update
    chain (for a two-stage chain it expands into the two S x S and the
    r_alpha, r_beta determinant terms), and the trace is
    tr(Q_ref^(-1) P) minus the ups_bar-sandwich correction, each piece a
    Frobenius norm of a skinny panel.
    """
    ld = _logdet_cov(ref) - _logdet_cov(post)

    w = jnp.sqrt(ref.q.d_inv)
    dist = post
    links = 0.0
    while isinstance(dist, PosteriorGaussian):
        panel = w[:, None] * (dist.pbar_K @ dist.ups)
        links = links + jnp.sum(panel * panel)
        dist = dist.pred
    base = dist
    panel0 = w[:, None] * base.Mc
    t0 = jnp.sum(base.q.d * ref.q.d_inv) + jnp.sum(panel0 * panel0)
    Z = ref.q.d_inv[:, None] * (ref.Mc @ ref.ups_bar)
    t_sandwich = jnp.sum(cov_mvm(post, Z) * Z)
    trace = t0 - links - t_sandwich

    delta = ref.m - post.m
    mean_term = delta @ prec_mvm(ref, delta)
    return ld, trace, mean_term


def kl_vs_predictive(post, ref: PredictiveGaussian):
    """KL(post || ref) in nats for an arbitrary update chain and a reference
    predictive that need not be the chain's base."""
    L = ref.m.shape[0]
    ld, trace, mean_term = kl_vs_predictive_terms(post, ref)
    kl = 0.5 * (mean_term + trace + ld - L)
    if _is_concrete(kl) and bool(kl < KL_NEGATIVITY_TOL):
        raise ConsistencyError(f"KL divergence {float(kl)} below {KL_NEGATIVITY_TOL}")
    return kl
