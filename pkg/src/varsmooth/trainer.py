"""End-to-end learning: reparameterized ELBO gradients and Adam updates.

The loss is the negative mean ELBO over a batch of sequences. All
stochasticity enters as exogenous standard-normal tensors drawn once per
(sequence, epoch), so every loss evaluation is a deterministic function of
(parameters, data, noise) and reverse-mode differentiation through the whole
pass — moment matching, triangular solves, sampler — is exact.

Two pass variants are trainable: "smooth" (combined pseudo observations)
and "realtime" (filtered recursion with the backward correction applied per
step). Masking regularization hides steps from the encoder or from the
pseudo observations; the reconstruction term at masked steps is still
evaluated, which turns masking into a denoising signal.
"""

from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np

from . import encoders, params as params_mod, smoother
from .errors import NumericInputError, VarsmoothError
from .params import AdamState, Model


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    num_samples: int = 8          # S, posterior draws per step
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 10.0       # global gradient norm; <= 0 disables
    mask_strategy: Optional[str] = None  # None | "local" | "pseudo"
    mask_rate: float = 0.0
    variant: str = "smooth"       # "smooth" | "realtime"
    heldout_dims: tuple = ()      # observation dims hidden from the encoder
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.num_samples < 1:
            raise ValueError("epochs, batch_size, num_samples must be positive")
        self.heldout_dims = tuple(int(i) for i in self.heldout_dims)
        if any(i < 0 for i in self.heldout_dims):
            raise ValueError("heldout_dims must be nonnegative indices")
        if len(set(self.heldout_dims)) != len(self.heldout_dims):
            raise ValueError("heldout_dims contains duplicates")
        if self.learning_rate < 0 or self.eps <= 0:
            raise ValueError("learning_rate must be >= 0 and eps > 0")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("moment decays must lie in [0, 1)")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must lie in [0, 1]")
        if self.mask_strategy not in (None, "local", "pseudo"):
            raise ValueError(f"unknown mask strategy {self.mask_strategy!r}")
        if self.variant not in ("smooth", "realtime"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.variant == "realtime" and self.mask_strategy == "pseudo":
            raise ValueError(
                "pseudo masking needs the combined update; use strategy 'local' "
                "with the realtime variant"
            )


class Batch(NamedTuple):
    """One training batch: observations, masks, and pre-drawn noise.

    missing marks genuinely absent observations (hidden from the encoder AND
    excluded from the loss); reg_local / reg_pseudo are the training-time
    regularization masks (hidden from the encoder, still scored by the loss).
    """

    ys: jnp.ndarray          # (B, T, N)
    missing: jnp.ndarray     # (B, T) bool
    reg_local: jnp.ndarray   # (B, T) bool
    reg_pseudo: jnp.ndarray  # (B, T) bool
    noise: NamedTuple        # FilterNoise or RealtimeNoise, leading B axis


def make_batch(ys, missing=None, reg_local=None, reg_pseudo=None, noise=None) -> Batch:
    ys = jnp.asarray(ys, dtype=jnp.float64)
    B, T, _ = ys.shape
    false = jnp.zeros((B, T), dtype=bool)
    return Batch(
        ys=ys,
        missing=false if missing is None else jnp.asarray(missing, dtype=bool),
        reg_local=false if reg_local is None else jnp.asarray(reg_local, dtype=bool),
        reg_pseudo=false if reg_pseudo is None else jnp.asarray(reg_pseudo, dtype=bool),
        noise=noise,
    )


def draw_noise(model: Model, T: int, S: int, key, variant: str = "smooth"):
    """Noise tensors for one sequence."""
    L = model.dyn_cfg.state_dim
    ra, rb = model.enc_cfg.r_alpha, model.enc_cfg.r_beta
    if variant == "smooth":
        return smoother.filter_noise(key, T, L, S, ra + rb)
    return smoother.realtime_noise(key, T, L, S, ra, rb)


def batch_noise(model: Model, T: int, S: int, keys, variant: str = "smooth"):
    """Stacks per-sequence noise for a whole batch; keys has shape (B, 2)."""
    return jax.vmap(lambda k: draw_noise(model, T, S, k, variant))(keys)


def sequence_elbo(model: Model, flat_params, unravel, y, missing, reg_local,
                  reg_pseudo, noise, variant: str = "smooth",
                  heldout_dims: tuple = ()):
    """ELBO of one sequence, differentiable in the flat parameter vector.

    heldout_dims names observation dims the encoder never sees (zeroed in its
    input); the likelihood still scores them, so the readout for those dims is
    trained purely through the latent state. That is the co-smoothing setup.
    """
    p = unravel(flat_params)
    y_enc = y
    if heldout_dims:
        y_enc = y.at[:, jnp.asarray(heldout_dims)].set(0.0)
    mask_local = jnp.logical_or(missing, reg_local)
    if variant == "smooth":
        kk, KK = encoders.pseudo_obs_seq(
            model.enc_cfg, p["encoder"], y_enc,
            mask_local=mask_local, mask_pseudo=reg_pseudo,
        )
        pass_ = smoother.variational_filter(
            model.dyn_cfg, p["dynamics"], kk, KK, noise
        )
    else:
        a, A = encoders.encode_local_seq(model.enc_cfg, p["encoder"], y_enc, mask_local)
        b, B = encoders.encode_backward(model.enc_cfg, p["encoder"], a, A)
        pass_ = smoother.realtime_filter(
            model.dyn_cfg, p["dynamics"], a, A, b, B, noise
        )
    ell, kls = smoother.elbo_terms(
        pass_, model.lik_cfg, p["likelihood"], y, obs_mask=missing
    )
    return jnp.sum(ell), jnp.sum(kls)


def make_loss(model: Model, variant: str = "smooth", heldout_dims: tuple = ()):
    """Builds (loss_fn, unravel). loss_fn(flat, batch) -> (loss, (ell, kl)).

    The loss is -mean ELBO over the batch; the aux pair carries the mean
    reconstruction and KL totals for curve decomposition.
    """
    _, unravel = params_mod.flatten_params(model.params)
    heldout_dims = tuple(heldout_dims)

    def loss_fn(flat, batch: Batch):
        ells, kls = jax.vmap(
            lambda y, mi, rl, rp, nz: sequence_elbo(
                model, flat, unravel, y, mi, rl, rp, nz, variant, heldout_dims
            )
        )(batch.ys, batch.missing, batch.reg_local, batch.reg_pseudo, batch.noise)
        ell = jnp.mean(ells)
        kl = jnp.mean(kls)
        return -(ell - kl), (ell, kl)

    return loss_fn, unravel


def loss_and_grad(model: Model, batch: Batch, noise=None, variant: str = "smooth",
                  heldout_dims: tuple = ()):
    """(-mean ELBO, flat gradient, (ell, kl)) for one batch, eagerly.

    noise overrides batch.noise when given; either way the call is a
    deterministic function of (model, data, noise).
    """
    if noise is not None:
        batch = batch._replace(noise=noise)
    loss_fn, _ = make_loss(model, variant, heldout_dims)
    flat, _ = params_mod.flatten_params(model.params)
    (val, aux), grad = jax.value_and_grad(loss_fn, has_aux=True)(flat, batch)
    return val, grad, aux


def masked_step(batch: Batch, strategy: Optional[str], rate: float, key) -> Batch:
    """Draws per-step Bernoulli(rate) regularization masks into the batch."""
    if strategy is None or rate == 0.0:
        return batch
    draw = jax.random.bernoulli(key, rate, batch.missing.shape)
    if strategy == "local":
        return batch._replace(reg_local=draw)
    if strategy == "pseudo":
        return batch._replace(reg_pseudo=draw)
    raise ValueError(f"unknown mask strategy {strategy!r}")


def init_adam(n: int) -> AdamState:
    return AdamState(step=jnp.asarray(0), m=jnp.zeros(n), v=jnp.zeros(n))


def adam_step(state: AdamState, grad, cfg: TrainConfig):
    """One Adam update; returns (new state, parameter delta)."""
    step = state.step + 1
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * grad
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * grad**2
    mhat = m / (1.0 - cfg.beta1**step)
    vhat = v / (1.0 - cfg.beta2**step)
    delta = -cfg.learning_rate * mhat / (jnp.sqrt(vhat) + cfg.eps)
    return AdamState(step=step, m=m, v=v), delta


def clip_global_norm(grad, max_norm: float):
    if max_norm <= 0:
        return grad
    norm = jnp.linalg.norm(grad)
    scale = jnp.minimum(1.0, max_norm / jnp.maximum(norm, 1e-16))
    return grad * scale


def _check_grad_finite(grad, paths, slices, epoch):
    bad = ~np.isfinite(np.asarray(grad))
    if not bad.any():
        return
    idx = int(np.argmax(bad))
    block = next((p for p in paths if slices[p].start <= idx < slices[p].stop), "?")
    raise NumericInputError(
        f"non-finite gradient at epoch {epoch} in parameter block '{block}' "
        f"(flat index {idx}); rerun the pass with checked=True to locate the step"
    )


def fit(model: Model, ys, cfg: TrainConfig, missing=None, out_dir=None,
        eval_fn=None):
    """Trains the model; returns (trained model, per-epoch trace).

    Args:
        ys: (n_sequences, T, N) observations.
        missing: optional (n_sequences, T) bool of genuinely absent steps.
        out_dir: when set, writes per-epoch checkpoints and a training-curve
            CSV (epoch, elbo, recon, kl, heldout, seconds) there.
        eval_fn: optional callable(model) -> float logged per epoch in the
            "heldout" column.

    The trace is a list of dicts, one per epoch. Numeric failures save an
    abort checkpoint (when out_dir is set) and re-raise.
    """
    ys = np.asarray(ys, dtype=np.float64)
    n, T, N = ys.shape
    if n == 0:
        raise ValueError("dataset is empty")
    if cfg.heldout_dims and max(cfg.heldout_dims) >= N:
        raise ValueError(
            f"heldout_dims {cfg.heldout_dims} out of range for {N} observation dims"
        )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    if missing is None:
        missing = np.zeros((n, T), dtype=bool)
    missing = np.asarray(missing, dtype=bool)

    loss_fn, unravel = make_loss(model, cfg.variant, cfg.heldout_dims)
    value_and_grad = jax.jit(jax.value_and_grad(loss_fn, has_aux=True))
    flat, _ = params_mod.flatten_params(model.params)
    opt = init_adam(flat.shape[0])
    paths = params_mod.leaf_paths(model.params)
    slices = params_mod.leaf_slices(model.params)

    base_key = jax.random.PRNGKey(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    trace = []

    def current_model():
        return model._replace(params=unravel(flat))

    def write_rows():
        if out_dir is None:
            return
        with open(f"{out_dir}/curve.csv", "w", newline="") as fh:
            w = csv.DictWriter(
                fh, fieldnames=["epoch", "elbo", "recon", "kl", "heldout", "seconds"]
            )
            w.writeheader()
            w.writerows(trace)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        epoch_key = jax.random.fold_in(base_key, epoch)
        perm = order_rng.permutation(n)
        ell_sum = kl_sum = 0.0
        seen = 0
        try:
            for bstart in range(0, n, cfg.batch_size):
                sel = perm[bstart:bstart + cfg.batch_size]
                seq_keys = jnp.stack(
                    [jax.random.fold_in(epoch_key, int(i)) for i in sel]
                )
                noise = batch_noise(model, T, cfg.num_samples, seq_keys, cfg.variant)
                batch = make_batch(ys[sel], missing=missing[sel], noise=noise)
                mask_key = jax.random.fold_in(
                    jax.random.fold_in(epoch_key, 7919), bstart
                )
                batch = masked_step(batch, cfg.mask_strategy, cfg.mask_rate, mask_key)
                (_, (ell, kl)), grad = value_and_grad(flat, batch)
                _check_grad_finite(grad, paths, slices, epoch)
                grad = clip_global_norm(grad, cfg.clip_norm)
                opt, delta = adam_step(opt, grad, cfg)
                flat = flat + delta
                ell_sum += float(ell) * len(sel)
                kl_sum += float(kl) * len(sel)
                seen += len(sel)
        except VarsmoothError:
            if out_dir is not None:
                params_mod.save_checkpoint(
                    f"{out_dir}/abort.ckpt", current_model(), opt_state=opt,
                    extra_meta={"epoch": epoch},
                )
                write_rows()
            raise
        row = {
            "epoch": epoch,
            "elbo": ell_sum / seen - kl_sum / seen,
            "recon": ell_sum / seen,
            "kl": kl_sum / seen,
            "heldout": float(eval_fn(current_model())) if eval_fn else "",
            "seconds": time.perf_counter() - t0,
        }
        trace.append(row)
        if out_dir is not None:
            params_mod.save_checkpoint(
                f"{out_dir}/latest.ckpt", current_model(), opt_state=opt,
                extra_meta={"epoch": epoch},
            )
            write_rows()
    return current_model(), trace


class BlockReport(NamedTuple):
    n_coords: int
    grad_norm: float
    fd_norm: float
    rel_err: float


class GradReport(NamedTuple):
    blocks: dict
    max_rel_err: float


_BLOCK_OF = (
    ("dynamics.init_mean", "initial_state"),
    ("dynamics.log_init_var", "initial_state"),
    ("dynamics", "dynamics"),
    ("encoder.local", "encoder_local"),
    ("encoder.backward", "encoder_backward"),
    ("likelihood", "likelihood"),
)


def _block_name(path: str) -> str:
    for prefix, name in _BLOCK_OF:
        if path == prefix or path.startswith(prefix + "."):
            return name
    return "other"


def gradcheck(model: Model, batch: Batch, variant: str = "smooth",
              eps: float = 1e-6, max_coords_per_block: int = 60,
              seed: int = 0, heldout_dims: tuple = ()) -> GradReport:
    """Central-difference verification of the full loss gradient.

    Every parameter block is probed (subsampled beyond max_coords_per_block
    coordinates, deterministically per seed). Relative error per block is
    ||g - fd|| / max(||g||, ||fd||) over the probed coordinates, with 0/0
    treated as exact.
    """
    loss_fn, _ = make_loss(model, variant, heldout_dims)
    flat, _ = params_mod.flatten_params(model.params)
    fast = jax.jit(lambda f: loss_fn(f, batch)[0])
    grad = jax.jit(jax.grad(lambda f: loss_fn(f, batch)[0]))(flat)
    slices = params_mod.leaf_slices(model.params)

    coords: dict = {}
    for path, sl in slices.items():
        coords.setdefault(_block_name(path), []).extend(range(sl.start, sl.stop))
    rng = np.random.default_rng(seed)

    blocks = {}
    worst = 0.0
    for name, idxs in sorted(coords.items()):
        if len(idxs) > max_coords_per_block:
            idxs = list(rng.choice(idxs, size=max_coords_per_block, replace=False))
        fd = np.zeros(len(idxs))
        for j, i in enumerate(idxs):
            up = fast(flat.at[i].add(eps))
            dn = fast(flat.at[i].add(-eps))
            fd[j] = (float(up) - float(dn)) / (2.0 * eps)
        g = np.asarray(grad)[np.asarray(idxs, dtype=int)]
        denom = max(np.linalg.norm(g), np.linalg.norm(fd))
        rel = float(np.linalg.norm(g - fd) / denom) if denom > 0 else 0.0
        blocks[name] = BlockReport(
            n_coords=len(idxs), grad_norm=float(np.linalg.norm(g)),
            fd_norm=float(np.linalg.norm(fd)), rel_err=rel,
        )
        worst = max(worst, rel)
    return GradReport(blocks=blocks, max_rel_err=worst)


def format_gradreport(report: GradReport) -> str:
    lines = [f"{'block':<18} {'coords':>6} {'|grad|':>12} {'|fd|':>12} {'rel err':>10}"]
    for name, b in sorted(report.blocks.items()):
        lines.append(
            f"{name:<18} {b.n_coords:>6d} {b.grad_norm:>12.4e} "
            f"{b.fd_norm:>12.4e} {b.rel_err:>10.2e}"
        )
    lines.append(f"max relative error: {report.max_rel_err:.2e}")
    return "\n".join(lines)
