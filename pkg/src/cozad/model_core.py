"""The trainable scoring network and its exact backward pass.

Architecture: a bias-free linear feature adaptor followed by a small
discriminator (linear -> batchnorm -> LeakyReLU(0.2) -> linear -> scalar).
Synthetic negatives are normal adapted features plus i.i.d. Gaussian noise.
The margin objective pushes normal scores above ``th_pos`` and synthetic
scores below ``-th_neg``; the anomaly score of a patch is the negated
discriminator output.

All forward/backward math runs in float64. Gradients are derived by hand,
including the path through the batch statistics of the normalization layer,
and are validated against central finite differences in the test suite.
Checkpoints ("COZM") store tensors as little-endian float32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, CorruptionError, FormatError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
TH_POS_DEFAULT = 0.5
TH_NEG_DEFAULT = 0.5

# Trainable tensors, in checkpoint declaration order. Running statistics are
# buffers, not parameters: they receive no gradients and no optimizer updates.
TRAINABLE_FIELDS = (
    "adaptor_weight",
    "disc_w1",
    "disc_b1",
    "bn_gamma",
    "bn_beta",
    "disc_w2",
    "disc_b2",
)


@dataclass
class ModelParams:
    adaptor_weight: np.ndarray  # [feat_dim, adapted_dim], no bias
    disc_w1: np.ndarray  # [adapted_dim, hidden_dim]
    disc_b1: np.ndarray  # [hidden_dim]
    bn_gamma: np.ndarray  # [hidden_dim]
    bn_beta: np.ndarray  # [hidden_dim]
    bn_running_mean: np.ndarray  # [hidden_dim]
    bn_running_var: np.ndarray  # [hidden_dim]
    disc_w2: np.ndarray  # [hidden_dim, 1]
    disc_b2: np.ndarray  # scalar, shape ()
    leaky_slope: float = 0.2

    @property
    def feat_dim(self) -> int:
        return self.adaptor_weight.shape[0]

    @property
    def adapted_dim(self) -> int:
        return self.adaptor_weight.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.disc_w1.shape[1]

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.adaptor_weight.copy(),
            self.disc_w1.copy(),
            self.disc_b1.copy(),
            self.bn_gamma.copy(),
            self.bn_beta.copy(),
            self.bn_running_mean.copy(),
            self.bn_running_var.copy(),
            self.disc_w2.copy(),
            self.disc_b2.copy(),
            self.leaky_slope,
        )

    def tobytes(self) -> bytes:
        """Concatenated raw bytes of every tensor; used for purity checks."""
        parts = [getattr(self, name).tobytes() for name in TRAINABLE_FIELDS]
        parts.append(self.bn_running_mean.tobytes())
        parts.append(self.bn_running_var.tobytes())
        return b"".join(parts)


@dataclass
class ParamGrads:
    adaptor_weight: np.ndarray
    disc_w1: np.ndarray
    disc_b1: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    disc_w2: np.ndarray
    disc_b2: np.ndarray

    def scaled(self, factor: float) -> "ParamGrads":
        return ParamGrads(*(getattr(self, n) * factor for n in TRAINABLE_FIELDS))

    def added(self, other: "ParamGrads") -> "ParamGrads":
        return ParamGrads(
            *(getattr(self, n) + getattr(other, n) for n in TRAINABLE_FIELDS)
        )


def zero_grads(params: ModelParams) -> ParamGrads:
    return ParamGrads(*(np.zeros_like(getattr(params, n)) for n in TRAINABLE_FIELDS))


def average_grads(grads: list[ParamGrads]) -> ParamGrads:
    """Mean of gradients in list order (callers fix the order for determinism)."""
    if not grads:
        raise ContractError("need at least one gradient to average")
    total = grads[0]
    for g in grads[1:]:
        total = total.added(g)
    return total.scaled(1.0 / len(grads))


@dataclass
class NoiseConfig:
    """Gaussian perturbation used to fabricate synthetic anomalies."""

    sigma: float = 0.015
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractError("noise sigma must be > 0")

    @classmethod
    def from_seed(cls, sigma: float, seed) -> "NoiseConfig":
        return cls(sigma, np.random.default_rng(seed))


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_adam(params: ModelParams, beta1=0.9, beta2=0.999, eps=1e-8) -> AdamState:
    zeros = {n: np.zeros_like(getattr(params, n)) for n in TRAINABLE_FIELDS}
    return AdamState(
        {n: z.copy() for n, z in zeros.items()}, zeros, 0, beta1, beta2, eps
    )


def init_params(feat_dim: int, adapted_dim: int, hidden_dim: int, seed: int) -> ModelParams:
    """Deterministic initialization.

    The adaptor starts identity-like so the pre-training feature geometry is
    preserved: an exact identity when square, otherwise a truncated identity
    plus uniform noise of amplitude 1/sqrt(feat_dim). Discriminator weights
    and biases are uniform in +-1/sqrt(fan_in); batchnorm starts at scale 1,
    shift 0, running statistics (0, 1).
    """
    if min(feat_dim, adapted_dim, hidden_dim) < 1:
        raise ContractError("all dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    if feat_dim == adapted_dim:
        adaptor = np.eye(feat_dim)
    else:
        adaptor = np.zeros((feat_dim, adapted_dim))
        k = min(feat_dim, adapted_dim)
        adaptor[:k, :k] = np.eye(k)
        adaptor += rng.uniform(-1.0, 1.0, size=adaptor.shape) / np.sqrt(feat_dim)
    bound1 = 1.0 / np.sqrt(adapted_dim)
    bound2 = 1.0 / np.sqrt(hidden_dim)
    return ModelParams(
        adaptor_weight=adaptor,
        disc_w1=rng.uniform(-bound1, bound1, size=(adapted_dim, hidden_dim)),
        disc_b1=rng.uniform(-bound1, bound1, size=hidden_dim),
        bn_gamma=np.ones(hidden_dim),
        bn_beta=np.zeros(hidden_dim),
        bn_running_mean=np.zeros(hidden_dim),
        bn_running_var=np.ones(hidden_dim),
        disc_w2=rng.uniform(-bound2, bound2, size=(hidden_dim, 1)),
        disc_b2=np.asarray(0.0),
    )


def adaptor_forward(params: ModelParams, features: np.ndarray) -> np.ndarray:
    """Bias-free linear map from backbone features to the adapted space."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.feat_dim:
        raise ContractError(
            f"features shape {features.shape} incompatible with feat_dim {params.feat_dim}"
        )
    return features @ params.adaptor_weight


def synth_anomaly(adapted: np.ndarray, noise: NoiseConfig) -> np.ndarray:
    """Fabricate negatives by adding i.i.d. N(0, sigma^2) to adapted features."""
    return adapted + noise.rng.standard_normal(adapted.shape) * noise.sigma


def discriminator_forward(params: ModelParams, adapted: np.ndarray, mode: str = "eval"):
    """Score adapted features; returns (scores[B], cache-or-None).

    Train mode normalizes with batch statistics and updates the running
    statistics in place (momentum 0.1, unbiased variance); it requires B >= 2.
    Eval mode uses the stored running statistics and never mutates ``params``.
    """
    adapted = np.asarray(adapted, dtype=np.float64)
    if adapted.ndim != 2 or adapted.shape[1] != params.adapted_dim:
        raise ContractError(
            f"adapted shape {adapted.shape} incompatible with adapted_dim {params.adapted_dim}"
        )
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    z = adapted @ params.disc_w1 + params.disc_b1
    n = z.shape[0]
    if mode == "train":
        if n < 2:
            raise ContractError("train mode needs a batch of at least 2 rows")
        mu = z.mean(axis=0)
        var = z.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + BN_EPS)
        z_hat = (z - mu) * inv_std
        params.bn_running_mean *= 1.0 - BN_MOMENTUM
        params.bn_running_mean += BN_MOMENTUM * mu
        params.bn_running_var *= 1.0 - BN_MOMENTUM
        params.bn_running_var += BN_MOMENTUM * var * n / (n - 1)
    else:
        inv_std = 1.0 / np.sqrt(params.bn_running_var + BN_EPS)
        z_hat = (z - params.bn_running_mean) * inv_std
    y = params.bn_gamma * z_hat + params.bn_beta
    act_mask = np.where(y > 0, 1.0, params.leaky_slope)
    h = y * act_mask
    scores = (h @ params.disc_w2)[:, 0] + float(params.disc_b2)
    cache = None
    if mode == "train":
        cache = {"input": adapted, "z_hat": z_hat, "inv_std": inv_std,
                 "act_mask": act_mask, "h": h}
    return scores, cache


def margin_loss(pos_scores, neg_scores, th_pos=TH_POS_DEFAULT, th_neg=TH_NEG_DEFAULT) -> float:
    """Hinge objective: mean(max(0, th_pos - s+)) + mean(max(0, s- + th_neg))."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ContractError("score vectors must be non-empty")
    return float(
        np.maximum(0.0, th_pos - pos).mean() + np.maximum(0.0, neg + th_neg).mean()
    )


def anomaly_score(params: ModelParams, features: np.ndarray, chunk: int = 65536) -> np.ndarray:
    """Negated eval-mode discriminator output per patch; higher = more anomalous.

    Pure: never mutates ``params``.
    """
    features = np.asarray(features, dtype=np.float64)
    out = np.empty(features.shape[0], dtype=np.float64)
    for lo in range(0, features.shape[0], chunk):
        part = features[lo : lo + chunk]
        scores, _ = discriminator_forward(params, adaptor_forward(params, part), "eval")
        out[lo : lo + chunk] = -scores
    return out


def l2_norm_sq(params: ModelParams) -> float:
    """Squared L2 norm over all trainable tensors."""
    return float(sum(np.sum(getattr(params, n) ** 2) for n in TRAINABLE_FIELDS))


@dataclass
class LossResult:
    loss: float        # weighted margin mean + reg_lambda * ||theta||^2
    grads: ParamGrads
    data_loss: float   # weighted margin mean alone


def loss_backward(
    params: ModelParams,
    batch: np.ndarray,
    noise: NoiseConfig,
    sample_weights: np.ndarray,
    reg_lambda: float,
    th_pos: float = TH_POS_DEFAULT,
    th_neg: float = TH_NEG_DEFAULT,
    update_stats: bool = True,
) -> LossResult:
    """Confidence-weighted margin loss and its exact parameter gradients.

    Each batch row is paired with one synthetic negative (row + noise); the
    discriminator scores positives and negatives in a single train-mode pass,
    so batch statistics cover both halves. The per-sample hinge losses are
    combined as sum(w_i * L_i) / sum(w_i) — normalizing by the confidence
    mass keeps the effective step size independent of how much of the batch
    is down-weighted — plus reg_lambda * ||theta||^2. Gradients flow through
    the batch statistics of the normalization layer.

    Running statistics are updated in place unless ``update_stats=False``.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ContractError(f"batch must be 2-d, got shape {x.shape}")
    b = x.shape[0]
    w = np.asarray(sample_weights, dtype=np.float64)
    if w.shape != (b,):
        raise ContractError(f"sample_weights shape {w.shape} != ({b},)")
    if (w < 0).any() or (w > 1).any():
        raise ContractError("sample_weights must lie in [0, 1]")
    w_sum = w.sum()
    if w_sum <= 0:
        raise ContractError("sample_weights sum to zero")
    if reg_lambda < 0:
        raise ContractError("reg_lambda must be >= 0")

    adapted = adaptor_forward(params, x)
    negatives = synth_anomaly(adapted, noise)
    combined = np.vstack([adapted, negatives])

    saved_mean = params.bn_running_mean.copy()
    saved_var = params.bn_running_var.copy()
    scores, cache = discriminator_forward(params, combined, "train")
    if not update_stats:
        params.bn_running_mean = saved_mean
        params.bn_running_var = saved_var

    pos, neg = scores[:b], scores[b:]
    hinge_pos = np.maximum(0.0, th_pos - pos)
    hinge_neg = np.maximum(0.0, neg + th_neg)
    per_sample = hinge_pos + hinge_neg
    data_loss = float((w * per_sample).sum() / w_sum)
    loss = data_loss + reg_lambda * l2_norm_sq(params)

    # d(data_loss)/d(score): active hinges only.
    coeff = w / w_sum
    d_scores = np.concatenate(
        [-coeff * (hinge_pos > 0), coeff * (hinge_neg > 0)]
    )

    h = cache["h"]
    d_w2 = h.T @ d_scores[:, None]
    d_b2 = np.asarray(d_scores.sum())
    d_h = np.outer(d_scores, params.disc_w2[:, 0])
    d_y = d_h * cache["act_mask"]
    z_hat = cache["z_hat"]
    d_gamma = (d_y * z_hat).sum(axis=0)
    d_beta = d_y.sum(axis=0)
    d_zhat = d_y * params.bn_gamma
    n = combined.shape[0]
    d_z = (cache["inv_std"] / n) * (
        n * d_zhat - d_zhat.sum(axis=0) - z_hat * (d_zhat * z_hat).sum(axis=0)
    )
    d_w1 = combined.T @ d_z
    d_b1 = d_z.sum(axis=0)
    d_combined = d_z @ params.disc_w1.T
    d_adapted = d_combined[:b] + d_combined[b:]
    d_adaptor = x.T @ d_adapted

    grads = ParamGrads(d_adaptor, d_w1, d_b1, d_gamma, d_beta, d_w2, d_b2)
    if reg_lambda > 0:
        for name in TRAINABLE_FIELDS:
            g = getattr(grads, name)
            g += 2.0 * reg_lambda * getattr(params, name)
    return LossResult(loss, grads, data_loss)


def adam_step(
    state: AdamState,
    params: ModelParams,
    grads: ParamGrads,
    lr_adaptor: float,
    lr_disc: float,
    weight_decay: float = 0.0,
) -> ModelParams:
    """One Adam update in place, with per-group learning rates.

    The adaptor weight uses ``lr_adaptor``; every discriminator tensor uses
    ``lr_disc``. Weight decay is added to the gradient as an L2 term
    (decay * theta) before the moment updates.
    """
    state.step += 1
    t = state.step
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for name in TRAINABLE_FIELDS:
        g = getattr(grads, name) + weight_decay * getattr(params, name)
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        lr = lr_adaptor if name == "adaptor_weight" else lr_disc
        update = lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
        setattr(params, name, getattr(params, name) - update)
    return params


# ---------------------------------------------------------------------------
# Flat-vector views, used by gradient checks and tests.

def params_to_vector(params: ModelParams) -> np.ndarray:
    return np.concatenate([np.ravel(getattr(params, n)) for n in TRAINABLE_FIELDS])


def vector_to_params(vec: np.ndarray, template: ModelParams) -> ModelParams:
    out = template.copy()
    pos = 0
    for name in TRAINABLE_FIELDS:
        ref = getattr(template, name)
        size = ref.size
        setattr(out, name, vec[pos : pos + size].reshape(ref.shape).copy())
        pos += size
    if pos != vec.size:
        raise ContractError(f"vector length {vec.size} != parameter count {pos}")
    return out


def grads_to_vector(grads: ParamGrads) -> np.ndarray:
    return np.concatenate([np.ravel(getattr(grads, n)) for n in TRAINABLE_FIELDS])


# ---------------------------------------------------------------------------
# COZM checkpoint format (little-endian; tensors as float32).

MAGIC_MODEL = b"COZM"
MODEL_VERSION = 1


def _param_tensors(params: ModelParams):
    # Declaration order, including buffers and the activation slope.
    return [
        params.adaptor_weight,
        params.disc_w1,
        params.disc_b1,
        params.bn_gamma,
        params.bn_beta,
        params.bn_running_mean,
        params.bn_running_var,
        params.disc_w2,
        np.atleast_1d(params.disc_b2),
        np.atleast_1d(np.float64(params.leaky_slope)),
    ]


def save_checkpoint(params: ModelParams, path, adam: AdamState | None = None) -> None:
    buf = bytearray()
    buf += MAGIC_MODEL
    buf.append(MODEL_VERSION)
    buf += struct.pack("<3I", params.feat_dim, params.adapted_dim, params.hidden_dim)
    for tensor in _param_tensors(params):
        buf += np.ascontiguousarray(tensor, dtype="<f4").tobytes()
    buf.append(1 if adam is not None else 0)
    if adam is not None:
        buf += struct.pack("<I", adam.step)
        buf += struct.pack("<3f", adam.beta1, adam.beta2, adam.eps)
        for name in TRAINABLE_FIELDS:
            buf += np.ascontiguousarray(adam.m[name], dtype="<f4").tobytes()
            buf += np.ascontiguousarray(adam.v[name], dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(buf))


def load_checkpoint(path):
    """Read a COZM checkpoint; returns (params, adam-state-or-None)."""
    with open(path, "rb") as fh:
        data = fh.read()
    from .feature_io import _Cursor  # same cursor/corruption semantics

    cur = _Cursor(data)
    magic = cur.take(4)
    if magic != MAGIC_MODEL:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC_MODEL!r}")
    version = cur.take(1)[0]
    if version != MODEL_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    feat_dim, adapted_dim, hidden_dim = struct.unpack("<3I", cur.take(12))
    if min(feat_dim, adapted_dim, hidden_dim) < 1:
        raise CorruptionError("invalid dimensions in checkpoint header")

    def tensor(shape):
        count = int(np.prod(shape))
        raw = np.frombuffer(cur.take(count * 4), dtype="<f4")
        return raw.astype(np.float64).reshape(shape)

    params = ModelParams(
        adaptor_weight=tensor((feat_dim, adapted_dim)),
        disc_w1=tensor((adapted_dim, hidden_dim)),
        disc_b1=tensor((hidden_dim,)),
        bn_gamma=tensor((hidden_dim,)),
        bn_beta=tensor((hidden_dim,)),
        bn_running_mean=tensor((hidden_dim,)),
        bn_running_var=tensor((hidden_dim,)),
        disc_w2=tensor((hidden_dim, 1)),
        disc_b2=np.asarray(tensor((1,))[0]),
        leaky_slope=float(tensor((1,))[0]),
    )
    flag = cur.take(1)[0]
    adam = None
    if flag == 1:
        (step,) = struct.unpack("<I", cur.take(4))
        beta1, beta2, eps = struct.unpack("<3f", cur.take(12))
        m, v = {}, {}
        for name in TRAINABLE_FIELDS:
            shape = getattr(params, name).shape
            m[name] = tensor(shape)
            v[name] = tensor(shape)
        adam = AdamState(m, v, step, float(beta1), float(beta2), float(eps))
    elif flag != 0:
        raise CorruptionError(f"invalid optimizer flag byte {flag}")
    if cur.pos != len(data):
        raise CorruptionError(f"{len(data) - cur.pos} trailing bytes after payload")
    try:
        if not np.isfinite(params_to_vector(params)).all():
            raise CorruptionError("checkpoint contains non-finite parameters")
        if (params.bn_running_var <= 0).any():
            raise CorruptionError("checkpoint running variance not positive")
    except CorruptionError:
        raise
    return params, adam
