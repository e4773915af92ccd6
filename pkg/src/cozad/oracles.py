"""Brute-force reference implementations, used only by the test suite.

Everything here is recomputed from first principles with explicit loops and
deliberately shares no code with the fast implementations it cross-checks.
Performance is a non-goal.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import UndefinedMetricError


def fd_gradient(loss_fn, point: np.ndarray, h: float) -> np.ndarray:
    """Central finite differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate."""
    assert h > 0
    x = np.asarray(point, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        plus = x.copy()
        plus[i] += h
        minus = x.copy()
        minus[i] -= h
        grad[i] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * h)
    return grad


def pairwise_auroc(scores, labels) -> float:
    """AUROC by direct enumeration of (positive, negative) pairs, ties 1/2."""
    pos = [float(s) for s, y in zip(scores, labels) if y == 1]
    neg = [float(s) for s, y in zip(scores, labels) if y == 0]
    if not pos or not neg:
        raise UndefinedMetricError("AUROC undefined: only one class present")
    wins = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                wins += 1.0
            elif p == q:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def interpolated_quantile(values, p: float) -> float:
    """Linear interpolation of the sorted values at position (n-1)*p."""
    ordered = sorted(float(v) for v in values)
    pos = p * (len(ordered) - 1)
    lo = math.floor(pos)
    hi = min(lo + 1, len(ordered) - 1)
    frac = pos - lo
    return ordered[lo] + frac * (ordered[hi] - ordered[lo])


def iqr_threshold_oracle(values, kappa: float) -> float:
    """Independent re-derivation of the outlier threshold, fallback included."""
    q1 = interpolated_quantile(values, 0.25)
    q3 = interpolated_quantile(values, 0.75)
    tau = q3 + kappa * (q3 - q1)
    if tau <= 0:
        tau = max(abs(float(v)) for v in values) + 1e-8
    return tau


def naive_covariance(xs, ys) -> list[list[float]]:
    """2x2 sample covariance (divisor n-1) by direct summation."""
    xs = [float(v) for v in xs]
    ys = [float(v) for v in ys]
    n = len(xs)
    assert n == len(ys) and n >= 2
    mx = sum(xs) / n
    my = sum(ys) / n
    cxx = sum((x - mx) ** 2 for x in xs) / (n - 1)
    cyy = sum((y - my) ** 2 for y in ys) / (n - 1)
    cxy = sum((x - mx) * (y - my) for x, y in zip(xs, ys)) / (n - 1)
    return [[cxx, cxy], [cxy, cyy]]


def naive_contrastive(embeddings, config, aug_noise) -> float:
    """Per-anchor contrastive loss by explicit loops over candidate sets.

    ``aug_noise`` is the pre-drawn augmentation perturbation, so caller and
    oracle evaluate the same realized objective. Positives are the anchor's
    augmented copy plus its k most cosine-similar other rows (ties broken by
    lower index); negatives are all remaining rows. Mean over anchors.
    """
    emb = [list(map(float, row)) for row in np.asarray(embeddings)]
    noise = [list(map(float, row)) for row in np.asarray(aug_noise)]
    b = len(emb)
    tau = config.temperature
    k = min(config.k_nn, b - 1)

    def cos(u, v):
        dot = sum(a * c for a, c in zip(u, v))
        nu = math.sqrt(sum(a * a for a in u))
        nv = math.sqrt(sum(c * c for c in v))
        return dot / (nu * nv)

    losses = []
    for i in range(b):
        anchor = emb[i]
        augmented = [a + d for a, d in zip(anchor, noise[i])]
        sims = {j: cos(anchor, emb[j]) for j in range(b) if j != i}
        ordered = sorted(sims, key=lambda j: (-sims[j], j))
        positives = set(ordered[:k])
        pos_terms = [math.exp(cos(anchor, augmented) / tau)]
        pos_terms += [math.exp(sims[j] / tau) for j in sorted(positives)]
        neg_terms = [math.exp(sims[j] / tau) for j in range(b) if j != i and j not in positives]
        pos_sum = sum(pos_terms)
        losses.append(-math.log(pos_sum / (pos_sum + sum(neg_terms))))
    return sum(losses) / b
