"""Amortization networks producing pseudo-observation natural-parameter updates.

The local encoder maps each observation y_t to alpha_t = (a_t, A_t); the
backward encoder runs a GRU in reverse time over the flattened alphas and
emits beta_t = (b_t, B_t), so beta_t depends only on alpha_{t:T}. A step's
pseudo observation combines lambda_t = alpha_t + beta_{t+1} with the boundary
beta_{T+1} = 0:  k_t = a_t + b_{t+1}, K_t = [A_t B_{t+1}].

Masking contract: a locally-masked step has alpha_t = 0 exactly (applied
before the backward pass, so beta still flows through it); a pseudo-masked
step has k_t = 0 and K_t = 0 exactly (applied after combination). Zeroed
columns of K are equivalent to dropping them (K K^T unchanged), which keeps
every shape static.
"""

from __future__ import annotations

from dataclasses import dataclass

import jax
import jax.numpy as jnp

from varsmooth.errors import ShapeError
from varsmooth.lowrank import LowRankNatUpdate


@dataclass(frozen=True)
class EncoderConfig:
    obs_dim: int
    state_dim: int
    r_alpha: int
    r_beta: int
    local_hidden: tuple = (64,)
    gru_hidden: int = 128


def _dense_init(key, fan_in, fan_out):
    return jax.random.normal(key, (fan_in, fan_out)) / jnp.sqrt(fan_in)


def init_encoder_params(cfg: EncoderConfig, key) -> dict:
    L, N = cfg.state_dim, cfg.obs_dim
    k_local, k_gru = jax.random.split(key)

    widths = (N,) + tuple(cfg.local_hidden)
    keys = jax.random.split(k_local, len(widths))
    local = {}
    for i in range(len(widths) - 1):
        local[f"w{i}"] = _dense_init(keys[i], widths[i], widths[i + 1])
        local[f"b{i}"] = jnp.zeros(widths[i + 1])
    H = widths[-1]
    # zero heads: the encoder starts out silent and training starts from the
    # prior rollout
    local["head_a_w"] = jnp.zeros((H, L))
    local["head_a_b"] = jnp.zeros(L)
    local["head_A_w"] = jnp.zeros((H, L * cfg.r_alpha))
    local["head_A_b"] = jnp.zeros(L * cfg.r_alpha)

    D = L * (1 + cfg.r_alpha)
    G = cfg.gru_hidden
    keys = jax.random.split(k_gru, 6)
    backward = {
        "wr": _dense_init(keys[0], D, G), "ur": _dense_init(keys[1], G, G),
        "br": jnp.zeros(G),
        "wz": _dense_init(keys[2], D, G), "uz": _dense_init(keys[3], G, G),
        "bz": jnp.zeros(G),
        "wh": _dense_init(keys[4], D, G), "uh": _dense_init(keys[5], G, G),
        "bh": jnp.zeros(G),
        "head_b_w": jnp.zeros((G, L)), "head_b_b": jnp.zeros(L),
        "head_B_w": jnp.zeros((G, L * cfg.r_beta)),
        "head_B_b": jnp.zeros(L * cfg.r_beta),
    }
    return {"local": local, "backward": backward}


def _local_net(cfg: EncoderConfig, p: dict, y):
    h = y
    for i in range(len(cfg.local_hidden)):
        h = jnp.tanh(h @ p[f"w{i}"] + p[f"b{i}"])
    a = h @ p["head_a_w"] + p["head_a_b"]
    A = (h @ p["head_A_w"] + p["head_A_b"]).reshape(cfg.state_dim, cfg.r_alpha)
    return a, A


def encode_local(cfg: EncoderConfig, params: dict, y, missing: bool = False):
    """Local encoding alpha = (a, A) of one observation.

    A missing observation returns exact zeros with an empty precision block.
    """
    if missing:
        return jnp.zeros(cfg.state_dim), jnp.zeros((cfg.state_dim, 0))
    y = jnp.asarray(y)
    if y.shape != (cfg.obs_dim,):
        raise ShapeError(f"observation has shape {y.shape}, expected ({cfg.obs_dim},)")
    return _local_net(cfg, params["local"], y)


def encode_local_seq(cfg: EncoderConfig, params: dict, ys, mask_local):
    """Per-step local encodings over a sequence, zeroed exactly at masked steps.

    Args:
        ys: (T, N) observations; entries at masked steps are ignored.
        mask_local: (T,) boolean, True where the step is masked or missing.

    Returns:
        a: (T, L) and A: (T, L, r_alpha).
    """
    a, A = jax.vmap(lambda y: _local_net(cfg, params["local"], y))(jnp.asarray(ys))
    keep = 1.0 - jnp.asarray(mask_local, dtype=a.dtype)
    return a * keep[:, None], A * keep[:, None, None]


def _gru_cell(p: dict, x, h):
    r = jax.nn.sigmoid(x @ p["wr"] + h @ p["ur"] + p["br"])
    z = jax.nn.sigmoid(x @ p["wz"] + h @ p["uz"] + p["bz"])
    cand = jnp.tanh(x @ p["wh"] + (r * h) @ p["uh"] + p["bh"])
    return (1.0 - z) * h + z * cand


def encode_backward(cfg: EncoderConfig, params: dict, a_seq, A_seq):
    """Reverse-time recurrent encoding beta_t = (b_t, B_t) from alpha_{t:T}.

    The GRU consumes the flattened (a_t, A_t) pairs from t = T down to 1
    with hidden state u_{T+1} = 0; heads read each u_t.
    """
    p = params["backward"]
    T = a_seq.shape[0]
    x_seq = jnp.concatenate([a_seq, A_seq.reshape(T, -1)], axis=1)

    def step(h, x):
        h_new = _gru_cell(p, x, h)
        return h_new, h_new

    h0 = jnp.zeros(cfg.gru_hidden)
    _, us = jax.lax.scan(step, h0, x_seq, reverse=True)
    b = us @ p["head_b_w"] + p["head_b_b"]
    B = (us @ p["head_B_w"] + p["head_B_b"]).reshape(T, cfg.state_dim, cfg.r_beta)
    return b, B


def combine(a_t, A_t, b_next, B_next) -> LowRankNatUpdate:
    """Pseudo observation at step t: k = a_t + b_{t+1}, K = [A_t B_{t+1}]."""
    a_t = jnp.asarray(a_t)
    b_next = jnp.asarray(b_next)
    if a_t.shape != b_next.shape:
        raise ShapeError(f"incompatible shapes {a_t.shape} and {b_next.shape}")
    return LowRankNatUpdate(
        k=a_t + b_next, K=jnp.concatenate([jnp.asarray(A_t), jnp.asarray(B_next)], axis=1)
    )


def pseudo_obs_seq(cfg: EncoderConfig, params: dict, ys, mask_local=None,
                   mask_pseudo=None):
    """Full encoding pipeline for one sequence.

    Args:
        ys: (T, N) observations.
        mask_local: optional (T,) boolean; masked steps contribute alpha = 0
            before the backward pass.
        mask_pseudo: optional (T,) boolean; masked steps get k = 0, K = 0
            after combination.

    Returns:
        kk: (T, L) and KK: (T, L, r_alpha + r_beta) stacked update panels,
        with the boundary beta_{T+1} = 0 already folded in.
    """
    ys = jnp.asarray(ys)
    T = ys.shape[0]
    if mask_local is None:
        mask_local = jnp.zeros(T, dtype=bool)
    a, A = encode_local_seq(cfg, params, ys, mask_local)
    b, B = encode_backward(cfg, params, a, A)
    # shift: step t pairs with beta_{t+1}; beta_{T+1} = 0
    b_next = jnp.concatenate([b[1:], jnp.zeros((1,) + b.shape[1:])], axis=0)
    B_next = jnp.concatenate([B[1:], jnp.zeros((1,) + B.shape[1:])], axis=0)
    kk = a + b_next
    KK = jnp.concatenate([A, B_next], axis=2)
    if mask_pseudo is not None:
        keep = 1.0 - jnp.asarray(mask_pseudo, dtype=kk.dtype)
        kk = kk * keep[:, None]
        KK = KK * keep[:, None, None]
    return kk, KK


def apply_mask(kk, KK, strategy: str, pattern):
    """Masks an already-built pseudo-observation sequence.

    strategy "pseudo" zeroes (k, K) at the flagged steps. strategy "local"
    cannot be applied after combination (alpha must be zeroed before the
    backward pass); use the mask_local argument of pseudo_obs_seq for that.
    """
    if strategy != "pseudo":
        raise ValueError(
            "only strategy 'pseudo' applies post-combination; "
            "pass mask_local to pseudo_obs_seq for local masking"
        )
    keep = 1.0 - jnp.asarray(pattern, dtype=kk.dtype)
    return kk * keep[:, None], KK * keep[:, None, None]
