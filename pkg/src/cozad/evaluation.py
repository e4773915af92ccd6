"""Exact AUROC metrics, anomaly-map construction, and scoring reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, UndefinedMetricError
from .feature_io import FeatureDataset
from .model_core import ModelParams, anomaly_score


def auroc(scores, labels) -> float:
    """Exact area under the ROC curve via the rank statistic.

    Ties receive average ranks, which makes the result equal to
    P(score+ > score-) + 0.5 * P(score+ == score-).
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractError(f"scores {s.shape} and labels {y.shape} must be equal-length vectors")
    if not np.isin(y, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUROC undefined: only one class present")
    order = np.argsort(s, kind="mergesort")
    sorted_scores = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # Average 1-based rank for the tie group [i, j].
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = float(ranks[y == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def image_score(patch_grid) -> float:
    """Image-level anomaly score: the maximum patch score."""
    grid = np.asarray(patch_grid, dtype=np.float64)
    if grid.size == 0:
        raise ContractError("patch grid is empty")
    return float(grid.max())


def _gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(img: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    radius = len(kernel) // 2
    moved = np.moveaxis(img, axis, 0)
    padded = np.pad(moved, [(radius, radius)] + [(0, 0)] * (moved.ndim - 1), mode="symmetric")
    out = np.zeros_like(moved)
    for t, w in enumerate(kernel):
        out += w * padded[t : t + moved.shape[0]]
    return np.moveaxis(out, 0, axis)


def anomaly_map(patch_grid, out_h: int, out_w: int, smooth_sigma: float = 4.0) -> np.ndarray:
    """Bilinear upsample of a patch-score grid, then an optional Gaussian blur.

    Corners are anchored (output corner equals input corner when
    smooth_sigma=0) and every operation uses non-negative weights, so raising
    any patch score never lowers any output pixel.
    """
    grid = np.asarray(patch_grid, dtype=np.float64)
    gh, gw = grid.shape
    if out_h < gh or out_w < gw:
        raise ContractError("output dimensions must be >= grid dimensions")

    def coords(n_out, n_in):
        if n_out == 1 or n_in == 1:
            return np.zeros(n_out)
        return np.arange(n_out) * (n_in - 1) / (n_out - 1)

    ys = coords(out_h, gh)
    xs = coords(out_w, gw)
    y0 = np.minimum(np.floor(ys).astype(int), max(gh - 2, 0))
    x0 = np.minimum(np.floor(xs).astype(int), max(gw - 2, 0))
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    out = (
        (1 - fy) * (1 - fx) * grid[np.ix_(y0, x0)]
        + (1 - fy) * fx * grid[np.ix_(y0, x1)]
        + fy * (1 - fx) * grid[np.ix_(y1, x0)]
        + fy * fx * grid[np.ix_(y1, x1)]
    )
    if smooth_sigma > 0:
        kernel = _gaussian_kernel(smooth_sigma)
        out = _blur_axis(out, kernel, 0)
        out = _blur_axis(out, kernel, 1)
    return out


@dataclass
class MapConfig:
    smooth_sigma: float = 4.0


@dataclass
class ScoreReport:
    image_scores: np.ndarray
    image_labels: np.ndarray | None
    patch_scores: np.ndarray  # [n, gh, gw]
    maps: np.ndarray | None  # [n, H, W] when masks were available
    i_auroc: float | None
    p_auroc: float | None
    notes: list[str] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "n_images": int(len(self.image_scores)),
            "i_auroc": self.i_auroc,
            "p_auroc": self.p_auroc,
            "image_scores": [float(v) for v in self.image_scores],
            "image_labels": None
            if self.image_labels is None
            else [int(v) for v in self.image_labels],
            "notes": list(self.notes),
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":")).encode()


def evaluate(params: ModelParams, dataset: FeatureDataset, map_cfg: MapConfig | None = None) -> ScoreReport:
    """Score a labeled dataset and compute image- and pixel-level AUROC.

    Pixel-level AUROC pools every pixel of every image into a single curve;
    maps are built at the mask resolution. Metrics that are undefined for the
    given labels are reported as None with an explanatory note instead of
    raising.
    """
    if map_cfg is None:
        map_cfg = MapConfig()
    dataset.validate()
    n = dataset.n_images
    gh, gw = dataset.grid_h, dataset.grid_w
    scores = anomaly_score(params, dataset.patch_matrix()).reshape(n, gh, gw)
    image_scores = scores.reshape(n, -1).max(axis=1)

    notes: list[str] = []
    i_auroc = None
    if dataset.image_labels is None:
        notes.append("i_auroc undefined: dataset has no image labels")
    else:
        try:
            i_auroc = auroc(image_scores, dataset.image_labels)
        except UndefinedMetricError as exc:
            notes.append(f"i_auroc undefined: {exc}")

    p_auroc = None
    maps = None
    if dataset.pixel_masks is None:
        notes.append("p_auroc skipped: dataset has no pixel masks")
    else:
        mh, mw = dataset.pixel_masks.shape[1:]
        maps = np.stack(
            [anomaly_map(scores[i], mh, mw, map_cfg.smooth_sigma) for i in range(n)]
        )
        try:
            p_auroc = auroc(maps.reshape(-1), dataset.pixel_masks.reshape(-1))
        except UndefinedMetricError as exc:
            notes.append(f"p_auroc undefined: {exc}")

    return ScoreReport(image_scores, dataset.image_labels, scores, maps, i_auroc, p_auroc, notes)
