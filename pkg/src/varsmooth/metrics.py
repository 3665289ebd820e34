"""Evaluation metrics: latent recovery, forecasting, co-smoothing.

Latent recovery uses an affine least-squares alignment before scoring, since
a latent trajectory is identified only up to an invertible readout.
Co-smoothing bits per spike compares held-out-dimension Poisson likelihood
against a mean-rate null, normalized by the total spike count.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

import numpy as np
from scipy.special import gammaln

LOG2 = float(np.log(2.0))


def _flatten_time(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.ndim == 3:
        return x.reshape(-1, x.shape[-1])
    raise ValueError(f"expected (T, D) or (n, T, D), got shape {x.shape}")


def alignment_r2(inferred, truth) -> float:
    """R-squared of the truth after affine least-squares alignment.

    Fits truth ~ [inferred, 1] W and reports 1 - SS_res / SS_tot pooled over
    all dimensions. Equal trajectories (or any invertible affine transform of
    the truth) score 1; an uninformative constant scores 0.
    """
    Z = _flatten_time(inferred)
    X = _flatten_time(truth)
    if Z.shape[0] != X.shape[0]:
        raise ValueError(
            f"time axes disagree: inferred {Z.shape[0]}, truth {X.shape[0]}"
        )
    A = np.concatenate([Z, np.ones((Z.shape[0], 1))], axis=1)
    W, *_ = np.linalg.lstsq(A, X, rcond=None)
    resid = X - A @ W
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((X - X.mean(axis=0)) ** 2))
    if ss_tot == 0.0:
        return 1.0 if ss_res == 0.0 else -np.inf
    return 1.0 - ss_res / ss_tot


class HorizonMetrics(NamedTuple):
    horizon: int
    mse: float
    r2: float


def forecast_metrics(pred, actual) -> list:
    """Per-horizon forecast error.

    Args:
        pred: (H+1, D) or (n, H+1, D) forecast means, step 0 = origin.
        actual: matching ground truth.

    Returns:
        list of HorizonMetrics; r2 pools variance across sequences and dims
        at each horizon (against the cross-section mean of the truth).
    """
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {actual.shape}")
    if pred.ndim == 2:
        pred, actual = pred[None], actual[None]
    out = []
    for h in range(pred.shape[1]):
        err = pred[:, h] - actual[:, h]
        mse = float(np.mean(err**2))
        centered = actual[:, h] - actual[:, h].mean(axis=0)
        ss_tot = float(np.sum(centered**2))
        r2 = 1.0 - float(np.sum(err**2)) / ss_tot if ss_tot > 0 else np.nan
        out.append(HorizonMetrics(horizon=h, mse=mse, r2=r2))
    return out


def poisson_loglik(counts, rates) -> float:
    """Total Poisson log likelihood, rates clipped away from zero."""
    counts = np.asarray(counts, dtype=np.float64)
    rates = np.maximum(np.asarray(rates, dtype=np.float64), 1e-12)
    return float(np.sum(counts * np.log(rates) - rates - gammaln(counts + 1.0)))


class CoBps(NamedTuple):
    value: float          # nan when undefined
    defined: bool
    total_spikes: float
    loglik_model: float
    loglik_null: float


def co_bps(counts, rates, null_rates: Optional[np.ndarray] = None) -> CoBps:
    """Co-smoothing bits per spike on held-out count dimensions.

    Args:
        counts: (n, T, H) held-out counts.
        rates: (n, T, H) model rates for those dimensions.
        null_rates: (H,) per-dimension mean rates of the null model; when
            omitted, the per-dimension empirical mean of ``counts``.

    The score is (loglik_model - loglik_null) / (log 2 * total_spikes). A
    null with zero spikes makes the normalization meaningless, so the metric
    comes back marked undefined.
    """
    counts = np.asarray(counts, dtype=np.float64)
    rates = np.asarray(rates, dtype=np.float64)
    if counts.shape != rates.shape:
        raise ValueError(f"shape mismatch {counts.shape} vs {rates.shape}")
    if null_rates is None:
        null_rates = counts.reshape(-1, counts.shape[-1]).mean(axis=0)
    null = np.broadcast_to(null_rates, counts.shape)

    total = float(counts.sum())
    ll_model = poisson_loglik(counts, rates)
    ll_null = poisson_loglik(counts, null)
    if total == 0.0:
        return CoBps(value=float("nan"), defined=False, total_spikes=0.0,
                     loglik_model=ll_model, loglik_null=ll_null)
    return CoBps(
        value=(ll_model - ll_null) / (LOG2 * total), defined=True,
        total_spikes=total, loglik_model=ll_model, loglik_null=ll_null,
    )
