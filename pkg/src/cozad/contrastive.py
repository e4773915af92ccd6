"""Patch-level contrastive objective with mined positives and chunking.

For each anchor x_i the positive set is its Gaussian-augmented copy
x~_i = x_i + delta plus its k most cosine-similar other rows; every remaining
in-chunk row is a negative. The per-anchor loss is the multi-positive
softmax contrast

    -log( sum_pos exp(sim/t) / (sum_pos exp(sim/t) + sum_neg exp(sim/t)) )

evaluated stably via a row-max shift. Anchors are processed in chunks so the
similarity buffer never exceeds chunk_size^2 entries; the batch loss is the
mean of the chunk losses. Gradients are with respect to the embedding rows
and flow through both the anchor and the augmented copy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .model_core import ModelParams, ParamGrads, TRAINABLE_FIELDS, zero_grads


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07
    k_nn: int = 5
    sigma_aug: float = 0.01
    chunk_size: int = 256
    lambda_cont: float = 1.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")
        if self.k_nn < 0:
            raise ConfigError("k_nn must be >= 0")
        if not self.sigma_aug > 0:
            raise ConfigError("sigma_aug must be > 0")
        if self.chunk_size < 2:
            raise ConfigError("chunk_size must be >= 2")
        if self.lambda_cont < 0:
            raise ConfigError("lambda_cont must be >= 0")


def cosine_sim(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ContractError("cosine similarity undefined for zero vectors")
    return float(u @ v / (nu * nv))


def augment(embeddings: np.ndarray, sigma_aug: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma_aug^2) noise; deterministic per generator stream."""
    if not sigma_aug > 0:
        raise ContractError("sigma_aug must be > 0")
    emb = np.asarray(embeddings, dtype=np.float64)
    return emb + rng.standard_normal(emb.shape) * sigma_aug


def _unit_rows(x: np.ndarray):
    norms = np.linalg.norm(x, axis=1)
    if (norms == 0).any():
        raise ContractError("zero-norm embedding row")
    return x / norms[:, None], norms


def _pairwise_cosine(units: np.ndarray) -> np.ndarray:
    # Kept as a standalone hook so tests can observe peak buffer sizes.
    return units @ units.T


def _knn_from_sims(sims: np.ndarray, k: int) -> np.ndarray:
    """Per row, indices of the k most similar other rows, ties to lower index."""
    b = sims.shape[0]
    masked = sims.copy()
    np.fill_diagonal(masked, -np.inf)
    # Stable sort on the negated similarities keeps lower indices first on ties.
    order = np.argsort(-masked, axis=1, kind="stable")
    return order[:, :k]


def knn_positives(embeddings: np.ndarray, k: int) -> list[list[int]]:
    """Indices of each row's k nearest neighbors by cosine similarity."""
    emb = np.asarray(embeddings, dtype=np.float64)
    b = emb.shape[0]
    if k >= b:
        raise ConfigError(f"k={k} must be smaller than the batch size {b}")
    if k == 0:
        return [[] for _ in range(b)]
    units, _ = _unit_rows(emb)
    sims = _pairwise_cosine(units)
    return [list(map(int, row)) for row in _knn_from_sims(sims, k)]


def _chunk_loss_grad(emb: np.ndarray, aug: np.ndarray, cfg: ContrastiveConfig):
    """Loss and embedding gradient for one anchor chunk (positives/negatives
    drawn within the chunk). Returns (chunk_loss, grad[chunk_size, d])."""
    c = emb.shape[0]
    tau = cfg.temperature
    units, norms = _unit_rows(emb)
    aug_units, aug_norms = _unit_rows(aug)
    sims = _pairwise_cosine(units)
    sim_aug = np.einsum("ij,ij->i", units, aug_units)

    k_eff = min(cfg.k_nn, c - 1)
    pos_mask = np.zeros((c, c), dtype=bool)
    if k_eff > 0:
        nbrs = _knn_from_sims(sims, k_eff)
        pos_mask[np.arange(c)[:, None], nbrs] = True

    logits = sims / tau
    np.fill_diagonal(logits, -np.inf)
    aug_logits = sim_aug / tau
    row_max = np.maximum(logits.max(axis=1), aug_logits)
    exp_rows = np.exp(logits - row_max[:, None])  # exp(-inf) -> 0 on the diagonal
    exp_aug = np.exp(aug_logits - row_max)
    total_pos = exp_aug + (exp_rows * pos_mask).sum(axis=1)
    total_all = exp_aug + exp_rows.sum(axis=1)
    per_anchor = np.log(total_all) - np.log(total_pos)
    loss = float(per_anchor.mean())

    # d(loss_i)/d(logit of candidate): softmax over all minus softmax over
    # positives (zero for negatives in the second term).
    coeff = exp_rows / total_all[:, None]
    coeff -= np.where(pos_mask, exp_rows / total_pos[:, None], 0.0)
    coeff /= tau
    coeff_aug = (exp_aug / total_all - exp_aug / total_pos) / tau

    # Row-pair similarities: d sim(x_i, x_j)/d x_i = (u_j - sim*u_i)/|x_i|.
    anchor_dot = (coeff * sims).sum(axis=1)
    other_dot = (coeff * sims).sum(axis=0)
    grad = (coeff @ units - anchor_dot[:, None] * units) / norms[:, None]
    grad += (coeff.T @ units - other_dot[:, None] * units) / norms[:, None]
    # Augmented pair: the copy is x_i + delta, so the gradient reaches x_i
    # through both arguments of the similarity.
    grad += coeff_aug[:, None] * (
        (aug_units - sim_aug[:, None] * units) / norms[:, None]
        + (units - sim_aug[:, None] * aug_units) / aug_norms[:, None]
    )
    grad /= c
    return loss, grad


def _chunked(emb: np.ndarray, aug: np.ndarray, cfg: ContrastiveConfig, chunk_size: int):
    b = emb.shape[0]
    bounds = list(range(0, b, chunk_size))
    spans = [(lo, min(lo + chunk_size, b)) for lo in bounds]
    if len(spans) > 1 and spans[-1][1] - spans[-1][0] < 2:
        # A singleton tail has no in-chunk negatives; fold it into the
        # previous chunk.
        last = spans.pop()
        prev = spans.pop()
        spans.append((prev[0], last[1]))
    losses = []
    grads = np.zeros_like(emb)
    for lo, hi in spans:
        chunk_loss, chunk_grad = _chunk_loss_grad(emb[lo:hi], aug[lo:hi], cfg)
        losses.append(chunk_loss)
        grads[lo:hi] = chunk_grad
    n_chunks = len(spans)
    return float(np.mean(losses)), grads / n_chunks


def contrastive_loss(embeddings: np.ndarray, config: ContrastiveConfig, rng: np.random.Generator):
    """Full-batch objective: every other row is a candidate. Returns
    (loss, gradient w.r.t. embeddings)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ContractError("need at least 2 embedding rows")
    aug = augment(emb, config.sigma_aug, rng)
    return _chunked(emb, aug, config, emb.shape[0])


def batch_contrastive(embeddings: np.ndarray, config: ContrastiveConfig, rng: np.random.Generator):
    """Chunked objective: mean of per-chunk losses, candidates drawn within
    each chunk. Augmentation noise is drawn for the whole batch up front, so
    with chunk_size >= B this is bit-identical to ``contrastive_loss``."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] < 2:
        raise ContractError("need at least 2 embedding rows")
    aug = augment(emb, config.sigma_aug, rng)
    return _chunked(emb, aug, config, config.chunk_size)


def embedding_grads_to_params(
    params: ModelParams, features: np.ndarray, emb_grads: np.ndarray
) -> ParamGrads:
    """Chain embedding-space gradients back to the adaptor weight.

    The contrastive embeddings are the adaptor outputs, so only the adaptor
    receives gradient; discriminator tensors get zeros.
    """
    grads = zero_grads(params)
    x = np.asarray(features, dtype=np.float64)
    grads.adaptor_weight = x.T @ np.asarray(emb_grads, dtype=np.float64)
    return grads


def total_loss(
    scl_loss: float,
    scl_grads: ParamGrads,
    cont_loss: float,
    cont_grads: ParamGrads,
    lambda_cont: float,
):
    """Combined objective: scl + lambda_cont * contrastive, gradients linear."""
    combined = ParamGrads(
        *(
            getattr(scl_grads, n) + lambda_cont * getattr(cont_grads, n)
            for n in TRAINABLE_FIELDS
        )
    )
    return float(scl_loss + lambda_cont * cont_loss), combined
