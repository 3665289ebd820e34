"""Declarative experiment configuration.

One TOML file describes a whole run: the data generator, the model family,
the training schedule, and where artifacts go. Any key can be overridden from
the command line with dotted assignments ("train.epochs=200", "seed=3"), so a
config file plus a short override list fully determines an experiment.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # 3.10 ships without it
    import tomli as tomllib

from .datasets import GeneratorSpec
from .errors import ConfigError
from .trainer import TrainConfig


@dataclass
class ModelSpec:
    """Architecture knobs, independent of any particular dataset.

    obs_dim is deliberately absent: it is taken from the data at build time.
    read_dim 0 means the likelihood reads the full state.
    """

    state_dim: int = 2
    read_dim: int = 0
    dynamics: str = "mlp"  # linear | mlp | pendulum
    hidden: tuple = (64,)
    likelihood: str = "gaussian"  # gaussian | poisson
    num_samples: int = 8
    r_alpha: int = 2
    r_beta: int = 2
    local_hidden: tuple = (64,)
    gru_hidden: int = 64
    pendulum_dt: float = 0.05

    def __post_init__(self):
        self.hidden = tuple(self.hidden)
        self.local_hidden = tuple(self.local_hidden)
        if self.state_dim < 1:
            raise ValueError("state_dim must be positive")
        if self.read_dim < 0:
            raise ValueError("read_dim must be 0 (full state) or positive")
        if self.num_samples < 2:
            raise ValueError("num_samples must be at least 2")
        if self.r_alpha < 0 or self.r_beta < 0:
            raise ValueError("update ranks must be nonnegative")

    @property
    def effective_read_dim(self) -> int:
        return self.read_dim if self.read_dim > 0 else self.state_dim


@dataclass
class ExperimentConfig:
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    out_dir: str = "runs/exp"
    seed: int = 0


_SECTIONS = {"generator": GeneratorSpec, "model": ModelSpec, "train": TrainConfig}
_TOP_KEYS = set(_SECTIONS) | {"out_dir", "seed"}


def _build_section(cls, section: dict, name: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - valid
    if unknown:
        raise ConfigError(
            f"unknown key(s) in [{name}]: {sorted(unknown)}; valid keys: {sorted(valid)}"
        )
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in section.items()}
    if name == "train" and kwargs.get("mask_strategy") == "none":
        kwargs["mask_strategy"] = None  # TOML has no null
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"[{name}]: {err}") from err


def parse_override(text: str):
    """Splits "dotted.key=value" and parses the value as a TOML literal.

    Bare words that are not valid TOML (pendulum, local, ...) fall back to
    plain strings, so quoting is optional on the command line.
    """
    key, sep, raw = text.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key, value


def apply_overrides(data: dict, overrides) -> dict:
    for text in overrides:
        key, value = parse_override(text)
        parts = key.split(".")
        if len(parts) == 1:
            if parts[0] not in ("out_dir", "seed"):
                raise ConfigError(
                    f"unknown top-level key {parts[0]!r}; sections are "
                    f"{sorted(_SECTIONS)} plus out_dir, seed"
                )
            data[parts[0]] = value
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            data.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"override key {key!r} does not name a config entry")
    return data


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Reads a TOML file (optional) and applies dotted-key overrides."""
    if path is None:
        data = {}
    else:
        with open(path, "rb") as fh:
            try:
                data = tomllib.load(fh)
            except tomllib.TOMLDecodeError as err:
                raise ConfigError(f"{path}: {err}") from err
    unknown = set(data) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    apply_overrides(data, overrides)
    cfg = ExperimentConfig(
        generator=_build_section(GeneratorSpec, data.get("generator", {}), "generator"),
        model=_build_section(ModelSpec, data.get("model", {}), "model"),
        train=_build_section(TrainConfig, data.get("train", {}), "train"),
        out_dir=str(data.get("out_dir", "runs/exp")),
        seed=int(data.get("seed", 0)),
    )
    if "num_samples" not in data.get("train", {}):
        # one source of truth for S unless the trainer overrides it explicitly
        cfg.train.num_samples = cfg.model.num_samples
    return cfg


def config_dict(cfg: ExperimentConfig) -> dict:
    """JSON-ready dict of the resolved config (tuples become lists)."""
    out = dataclasses.asdict(cfg)

    def clean(obj):
        if isinstance(obj, tuple):
            return [clean(v) for v in obj]
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        return obj

    return clean(out)


def build_model(spec: ModelSpec, obs_dim: int, key):
    """Instantiates a fresh model for data with obs_dim channels."""
    from . import params
    from .dynamics import DynamicsConfig
    from .encoders import EncoderConfig
    from .likelihoods import LikelihoodConfig

    dyn_cfg = DynamicsConfig(
        state_dim=spec.state_dim, kind=spec.dynamics, hidden=spec.hidden,
        pendulum_dt=spec.pendulum_dt,
    )
    enc_cfg = EncoderConfig(
        obs_dim=obs_dim, state_dim=spec.state_dim, r_alpha=spec.r_alpha,
        r_beta=spec.r_beta, local_hidden=spec.local_hidden,
        gru_hidden=spec.gru_hidden,
    )
    lik_cfg = LikelihoodConfig(
        kind=spec.likelihood, obs_dim=obs_dim, read_dim=spec.effective_read_dim,
    )
    return params.init_model(dyn_cfg, enc_cfg, lik_cfg, key)
