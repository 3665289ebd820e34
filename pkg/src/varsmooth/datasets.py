"""Synthetic sequence datasets and their container I/O.

Three generators: a linear-Gaussian state-space model (conjugate ground
truth), a stochastic pendulum (nonlinear, near-Gaussian), and a Van der Pol
oscillator driving log-linear Poisson counts. All of them keep the true
latents and generator parameters alongside the observations so tests and
metrics can score recovery.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from . import container
from .errors import ShapeError

GENERATOR_KINDS = ("lgssm", "pendulum", "vanderpol-poisson")


@dataclass
class GeneratorSpec:
    kind: str = "lgssm"
    state_dim: int = 2
    obs_dim: int = 4
    T: int = 100
    n_sequences: int = 32
    # lgssm
    spectral_radius: float = 0.95
    process_std: float = 0.3
    obs_std: float = 0.1
    # pendulum / van der pol
    dt: float = 0.05
    gravity_over_length: float = 9.81
    mu: float = 2.0
    init_mean: tuple = (0.0, 0.0)
    init_std: tuple = (2.0, 1.5)
    # poisson readout
    base_log_rate: float = -0.3
    readout_scale: float = 0.35
    burn_in: int = 100

    def __post_init__(self):
        if self.kind not in GENERATOR_KINDS:
            raise ValueError(
                f"unknown generator {self.kind!r}, expected one of {GENERATOR_KINDS}"
            )
        if self.T < 1 or self.n_sequences < 1 or self.obs_dim < 1:
            raise ValueError("T, n_sequences, obs_dim must be positive")
        if self.kind != "lgssm" and self.state_dim != 2:
            raise ValueError(f"{self.kind} generator is a 2-state system")


@dataclass
class SequenceDataset:
    ys: np.ndarray                       # (n, T, N) float64
    missing: np.ndarray                  # (n, T) bool
    latents: Optional[np.ndarray] = None  # (n, T, L)
    gen_params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.ys.ndim != 3:
            raise ShapeError(f"observations must be (n, T, N), got {self.ys.shape}")
        if self.missing is None:
            self.missing = np.zeros(self.ys.shape[:2], dtype=bool)
        self.missing = np.asarray(self.missing, dtype=bool)
        if self.missing.shape != self.ys.shape[:2]:
            raise ShapeError(
                f"mask shape {self.missing.shape} does not match "
                f"observations {self.ys.shape[:2]}"
            )
        if self.latents is not None:
            self.latents = np.asarray(self.latents, dtype=np.float64)
        if self.meta.get("likelihood") == "poisson" and np.any(self.ys < 0):
            raise ValueError("negative counts in a Poisson dataset")

    @property
    def n_sequences(self):
        return self.ys.shape[0]

    @property
    def T(self):
        return self.ys.shape[1]

    @property
    def obs_dim(self):
        return self.ys.shape[2]


def stable_transition(L: int, radius: float, rng) -> np.ndarray:
    """Random matrix rescaled to the requested spectral radius."""
    A = rng.normal(size=(L, L)) / np.sqrt(L)
    rho = np.max(np.abs(np.linalg.eigvals(A)))
    return A * (radius / rho)


def _generate_lgssm(spec: GeneratorSpec, rng) -> SequenceDataset:
    L, N, T, n = spec.state_dim, spec.obs_dim, spec.T, spec.n_sequences
    A = stable_transition(L, spec.spectral_radius, rng)
    q = np.full(L, spec.process_std**2)
    C = rng.normal(size=(N, L)) / np.sqrt(L)
    r = np.full(N, spec.obs_std**2)
    # start each sequence at stationarity so y statistics are time-invariant
    P_inf = scipy.linalg.solve_discrete_lyapunov(A, np.diag(q))
    chol_inf = np.linalg.cholesky(P_inf)

    zs = np.empty((n, T, L))
    ys = np.empty((n, T, N))
    for i in range(n):
        z = chol_inf @ rng.normal(size=L)
        for t in range(T):
            zs[i, t] = z
            ys[i, t] = C @ z + spec.obs_std * rng.normal(size=N)
            z = A @ z + spec.process_std * rng.normal(size=L)
    return SequenceDataset(
        ys=ys, missing=None, latents=zs,
        gen_params={"A": A, "q": q, "C": C, "r": r,
                    "m1": np.zeros(L), "P1": P_inf},
        meta={"likelihood": "gaussian"},
    )


def pendulum_step(state: np.ndarray, dt: float, g_over_l: float) -> np.ndarray:
    """One explicit Euler step of theta'' = -(g/l) sin(theta)."""
    theta, omega = state[..., 0], state[..., 1]
    return np.stack(
        [theta + dt * omega, omega - dt * g_over_l * np.sin(theta)], axis=-1
    )


def _generate_pendulum(spec: GeneratorSpec, rng) -> SequenceDataset:
    N, T, n = spec.obs_dim, spec.T, spec.n_sequences
    C = spec.readout_scale * rng.normal(size=(N, 2))
    d = 0.1 * rng.normal(size=N)

    zs = np.empty((n, T, 2))
    ys = np.empty((n, T, N))
    for i in range(n):
        z = np.asarray(spec.init_mean) + np.asarray(spec.init_std) * rng.normal(size=2)
        for t in range(T):
            zs[i, t] = z
            ys[i, t] = C @ z + d + spec.obs_std * rng.normal(size=N)
            z = pendulum_step(z, spec.dt, spec.gravity_over_length)
            z = z + np.array([0.0, spec.process_std]) * rng.normal(size=2)
    return SequenceDataset(
        ys=ys, missing=None, latents=zs,
        gen_params={"C": C, "d": d, "r": np.full(N, spec.obs_std**2),
                    "dt": np.asarray(spec.dt),
                    "g_over_l": np.asarray(spec.gravity_over_length),
                    "process_std": np.asarray(spec.process_std)},
        meta={"likelihood": "gaussian"},
    )


def vanderpol_step(state: np.ndarray, dt: float, mu: float) -> np.ndarray:
    x, v = state[..., 0], state[..., 1]
    return np.stack(
        [x + dt * v, v + dt * (mu * (1.0 - x**2) * v - x)], axis=-1
    )


def _generate_vanderpol_poisson(spec: GeneratorSpec, rng) -> SequenceDataset:
    N, T, n = spec.obs_dim, spec.T, spec.n_sequences
    # fixed-gain random-direction rows keep the log rates inside a
    # physiological-looking range for every draw
    phi = rng.uniform(0.0, 2.0 * np.pi, size=N)
    C = spec.readout_scale * np.stack([np.cos(phi), np.sin(phi)], axis=1)
    b = spec.base_log_rate + 0.2 * rng.normal(size=N)

    zs = np.empty((n, T, 2))
    ys = np.empty((n, T, N))
    for i in range(n):
        z = np.asarray(spec.init_mean) + np.asarray(spec.init_std) * rng.normal(size=2)
        # explicit Euler diverges when started far outside the limit cycle;
        # keep initial draws inside its basin of attraction
        z = np.clip(z, -2.5, 2.5)
        if spec.burn_in > 0:
            # settle onto the limit cycle; the random extra steps spread the
            # sequences over its phase
            for _ in range(int(rng.integers(spec.burn_in, spec.burn_in + 300))):
                z = vanderpol_step(z, spec.dt, spec.mu)
                z = z + np.array([0.0, spec.process_std]) * rng.normal(size=2)
        for t in range(T):
            zs[i, t] = z
            rates = np.exp(np.clip(C @ z + b, -30.0, 30.0))
            ys[i, t] = rng.poisson(rates)
            z = vanderpol_step(z, spec.dt, spec.mu)
            z = z + np.array([0.0, spec.process_std]) * rng.normal(size=2)
    return SequenceDataset(
        ys=ys, missing=None, latents=zs,
        gen_params={"C": C, "b": b, "dt": np.asarray(spec.dt),
                    "mu": np.asarray(spec.mu),
                    "process_std": np.asarray(spec.process_std)},
        meta={"likelihood": "poisson"},
    )


def generate(spec: GeneratorSpec, seed: int) -> SequenceDataset:
    """Draws a dataset; same spec and seed always give the same bytes."""
    rng = np.random.default_rng(seed)
    ds = {
        "lgssm": _generate_lgssm,
        "pendulum": _generate_pendulum,
        "vanderpol-poisson": _generate_vanderpol_poisson,
    }[spec.kind](spec, rng)
    ds.meta.update({"generator": asdict(spec), "seed": seed})
    return ds


def save_dataset(path, ds: SequenceDataset) -> None:
    arrays = {"ys": ds.ys, "missing": ds.missing}
    if ds.latents is not None:
        arrays["latents"] = ds.latents
    for name, arr in ds.gen_params.items():
        arrays[f"gen.{name}"] = np.asarray(arr, dtype=np.float64)
    meta = dict(ds.meta)
    meta["kind"] = "dataset"
    container.write_container(path, meta, arrays)


def load_dataset(path) -> SequenceDataset:
    meta, arrays = container.read_container(path)
    if meta.get("kind") != "dataset":
        raise ValueError(f"{path} is not a dataset container")
    gen_params = {
        name[len("gen."):]: arr for name, arr in arrays.items()
        if name.startswith("gen.")
    }
    meta = {k: v for k, v in meta.items() if k != "kind"}
    return SequenceDataset(
        ys=arrays["ys"], missing=arrays["missing"],
        latents=arrays.get("latents"), gen_params=gen_params, meta=meta,
    )
