"""Soft confidence weighting and uncertainty-driven regularization.

Two mechanisms live here. Per-sample confidence: anomaly scores are turned
into weights w = min(1, tau/score) where tau is a robust outlier threshold,
Q3 + kappa * (Q3 - Q1), over the score distribution; high-scoring (suspect)
samples are down-weighted instead of discarded. Model-level uncertainty: the
2x2 covariance between recent train- and validation-loss sequences feeds an
adaptive L2 coefficient lambda = lambda0 * (1 + gamma * det), so divergent
train/val dynamics tighten regularization.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from .errors import ContractError
from .model_core import ModelParams, anomaly_score

TAU_FLOOR = 1e-8


@dataclass
class ConfidenceState:
    """Per-patch weights plus the threshold they were derived from."""

    weights: np.ndarray
    tau: float = 0.0
    kappa: float = 1.5
    last_refresh_epoch: int = -1


@dataclass
class RegConfig:
    lambda0: float = 1e-5
    gamma: float = 1.0

    def __post_init__(self):
        if self.lambda0 < 0 or self.gamma < 0:
            raise ContractError("lambda0 and gamma must be non-negative")


class LossHistory:
    """Paired ring buffers of recent (train, validation) loss values."""

    def __init__(self, window: int = 10):
        if window < 2:
            raise ContractError("window must be >= 2")
        self.window = window
        self.train_losses = deque(maxlen=window)
        self.val_losses = deque(maxlen=window)

    def push(self, train_loss: float, val_loss: float) -> None:
        self.train_losses.append(float(train_loss))
        self.val_losses.append(float(val_loss))

    def __len__(self) -> int:
        return len(self.train_losses)


def _interp_quantile(sorted_vals: np.ndarray, p: float) -> float:
    # Linear interpolation between order statistics at position (n-1)*p.
    n = len(sorted_vals)
    pos = p * (n - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, n - 1)
    frac = pos - lo
    return float(sorted_vals[lo] + frac * (sorted_vals[hi] - sorted_vals[lo]))


def iqr_threshold(scores, kappa: float) -> float:
    """Outlier threshold tau = Q3 + kappa * (Q3 - Q1).

    Quartiles use linear interpolation of order statistics. If the computed
    threshold is not positive (an all-negative score regime), fall back to
    max(|scores|) + 1e-8 so the confidence transform stays bounded.
    """
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        raise ContractError("scores must be non-empty")
    if not np.isfinite(s).all():
        raise ContractError("scores must be finite")
    if kappa < 0:
        raise ContractError("kappa must be >= 0")
    ordered = np.sort(s)
    q1 = _interp_quantile(ordered, 0.25)
    q3 = _interp_quantile(ordered, 0.75)
    tau = q3 + kappa * (q3 - q1)
    if tau <= 0:
        tau = float(np.max(np.abs(s))) + TAU_FLOOR
    return tau


def confidence_weights(scores, tau: float) -> np.ndarray:
    """Bounded inverse transform of scores into weights in [0, 1].

    w = min(1, tau/score) for positive scores; non-positive scores mean the
    model finds the sample at least as normal as the threshold allows, so
    they get full weight 1.
    """
    if not tau > 0:
        raise ContractError("tau must be > 0")
    s = np.asarray(scores, dtype=np.float64)
    w = np.ones_like(s)
    positive = s > 0
    w[positive] = np.minimum(1.0, tau / s[positive])
    return w


def loss_covariance(history: LossHistory) -> np.ndarray | None:
    """Sample covariance (divisor n-1) of the paired loss sequences.

    Returns None when fewer than two pairs are available ("insufficient
    history"); callers then fall back to the baseline regularization.
    """
    if len(history) < 2:
        return None
    t = np.asarray(history.train_losses, dtype=np.float64)
    v = np.asarray(history.val_losses, dtype=np.float64)
    return np.cov(np.vstack([t, v]), ddof=1)


def adaptive_lambda(cfg: RegConfig, sigma: np.ndarray) -> float:
    """lambda0 * (1 + gamma * det(Sigma)), with the determinant clamped at 0.

    True covariance determinants are non-negative; the clamp only guards
    against tiny negative values from floating-point round-off.
    """
    s = np.asarray(sigma, dtype=np.float64)
    if s.shape != (2, 2):
        raise ContractError(f"sigma must be 2x2, got {s.shape}")
    det = s[0, 0] * s[1, 1] - s[0, 1] * s[1, 0]
    return cfg.lambda0 * (1.0 + cfg.gamma * max(0.0, det))


def lambda_from_history(cfg: RegConfig, history: LossHistory) -> float:
    """Adaptive coefficient, or the baseline lambda0 when history is short."""
    sigma = loss_covariance(history)
    if sigma is None:
        return cfg.lambda0
    return adaptive_lambda(cfg, sigma)


def refresh_confidence(
    state: ConfidenceState, params: ModelParams, dataset, epoch: int | None = None
) -> ConfidenceState:
    """Re-score every training patch and recompute threshold and weights.

    Scoring runs the discriminator in eval mode, so this is pure in ``params``
    and deterministic in its inputs.
    """
    patches = dataset.patch_matrix()
    if patches.shape[0] == 0:
        raise ContractError("dataset is empty")
    scores = anomaly_score(params, patches)
    tau = iqr_threshold(scores, state.kappa)
    weights = confidence_weights(scores, tau)
    return replace(
        state,
        weights=weights,
        tau=tau,
        last_refresh_epoch=state.last_refresh_epoch if epoch is None else epoch,
    )


def write_confidence_csv(fh, scores, weights, tau: float, epoch: int) -> None:
    """Diagnostic dump: one row per patch with score, weight, tau, epoch."""
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["index", "score", "weight", "tau", "epoch"])
    for i, (s, w) in enumerate(zip(scores, weights)):
        writer.writerow([i, repr(float(s)), repr(float(w)), repr(float(tau)), epoch])
