"""Model bundling, flat parameter vectors, and checkpoint files.

A Model carries the three configs plus one nested dict of arrays under the
keys "dynamics", "encoder", "likelihood". The flat view (used by the
optimizer and the gradient checker) is produced by ravel_pytree, whose leaf
order is deterministic for dicts (sorted keys), so a checkpoint written on
one run reloads bit-identically on another.
"""

from __future__ import annotations

from dataclasses import asdict
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax.flatten_util import ravel_pytree

from . import container, dynamics, encoders, likelihoods
from .errors import ShapeError


class Model(NamedTuple):
    dyn_cfg: dynamics.DynamicsConfig
    enc_cfg: encoders.EncoderConfig
    lik_cfg: likelihoods.LikelihoodConfig
    params: dict


class AdamState(NamedTuple):
    step: jnp.ndarray  # scalar int
    m: jnp.ndarray     # first moment, flat
    v: jnp.ndarray     # second moment, flat


def init_model(dyn_cfg, enc_cfg, lik_cfg, key) -> Model:
    if dyn_cfg.state_dim != enc_cfg.state_dim:
        raise ShapeError(
            f"dynamics state_dim {dyn_cfg.state_dim} != encoder {enc_cfg.state_dim}"
        )
    if lik_cfg.read_dim > dyn_cfg.state_dim:
        raise ShapeError(
            f"likelihood read_dim {lik_cfg.read_dim} exceeds state_dim {dyn_cfg.state_dim}"
        )
    if lik_cfg.obs_dim != enc_cfg.obs_dim:
        raise ShapeError(
            f"likelihood obs_dim {lik_cfg.obs_dim} != encoder {enc_cfg.obs_dim}"
        )
    kd, ke, kl = jax.random.split(key, 3)
    return Model(
        dyn_cfg=dyn_cfg, enc_cfg=enc_cfg, lik_cfg=lik_cfg,
        params={
            "dynamics": dynamics.init_dynamics_params(dyn_cfg, kd),
            "encoder": encoders.init_encoder_params(enc_cfg, ke),
            "likelihood": likelihoods.init_likelihood_params(lik_cfg, kl),
        },
    )


def flatten_params(params: dict):
    """(flat float64 vector, unravel function). Order is canonical."""
    flat, unravel = ravel_pytree(params)
    return flat.astype(jnp.float64), unravel


def leaf_paths(params: dict):
    """Dotted path per leaf, in the same order ravel_pytree uses."""
    leaves = jax.tree_util.tree_flatten_with_path(params)[0]
    out = []
    for path, _ in leaves:
        out.append(".".join(p.key for p in path))
    return out


def leaf_slices(params: dict):
    """Maps each dotted leaf path to its slice of the flat vector."""
    leaves = jax.tree_util.tree_flatten_with_path(params)[0]
    slices = {}
    offset = 0
    for path, leaf in leaves:
        n = int(np.prod(leaf.shape)) if leaf.ndim else 1
        slices[".".join(p.key for p in path)] = slice(offset, offset + n)
        offset += n
    return slices


def _cfg_meta(model: Model) -> dict:
    return {
        "dynamics": asdict(model.dyn_cfg),
        "encoder": asdict(model.enc_cfg),
        "likelihood": asdict(model.lik_cfg),
    }


def _cfgs_from_meta(meta: dict):
    d = dict(meta["dynamics"])
    d["hidden"] = tuple(d["hidden"])
    e = dict(meta["encoder"])
    e["local_hidden"] = tuple(e["local_hidden"])
    return (
        dynamics.DynamicsConfig(**d),
        encoders.EncoderConfig(**e),
        likelihoods.LikelihoodConfig(**meta["likelihood"]),
    )


def save_checkpoint(path, model: Model, opt_state: Optional[AdamState] = None,
                    extra_meta: Optional[dict] = None) -> None:
    """Writes configs, every parameter leaf, and optimizer moments to one file."""
    leaves = jax.tree_util.tree_flatten_with_path(model.params)[0]
    arrays = {}
    for p, leaf in leaves:
        arrays["params." + ".".join(k.key for k in p)] = np.asarray(leaf)
    if opt_state is not None:
        arrays["opt.step"] = np.asarray([int(opt_state.step)], dtype=np.int64)
        arrays["opt.m"] = np.asarray(opt_state.m)
        arrays["opt.v"] = np.asarray(opt_state.v)
    meta = {"kind": "checkpoint", "configs": _cfg_meta(model)}
    if extra_meta:
        meta["extra"] = extra_meta
    container.write_container(path, meta, arrays)


def load_checkpoint(path):
    """Reads a checkpoint back: (Model, AdamState or None, extra meta dict)."""
    meta, arrays = container.read_container(path)
    if meta.get("kind") != "checkpoint":
        raise ValueError(f"{path} is not a checkpoint file")
    dyn_cfg, enc_cfg, lik_cfg = _cfgs_from_meta(meta["configs"])
    params: dict = {}
    for name, arr in arrays.items():
        if not name.startswith("params."):
            continue
        node = params
        keys = name[len("params."):].split(".")
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = jnp.asarray(arr)
    opt_state = None
    if "opt.m" in arrays:
        opt_state = AdamState(
            step=jnp.asarray(arrays["opt.step"][0]),
            m=jnp.asarray(arrays["opt.m"]),
            v=jnp.asarray(arrays["opt.v"]),
        )
    model = Model(dyn_cfg=dyn_cfg, enc_cfg=enc_cfg, lik_cfg=lik_cfg, params=params)
    return model, opt_state, meta.get("extra", {})
