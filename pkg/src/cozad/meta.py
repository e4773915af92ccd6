"""First-order meta-training loop with confidence weighting and contrastive
feature shaping.

Each epoch the confidence weights are refreshed from current anomaly scores,
the training patches are re-partitioned into disjoint support/query tasks,
and the task set is walked in mini-batch slices. Per meta-iteration, every
task adapts a clone of the base parameters on its support slice with plain
gradient descent, the confidence-weighted objective (plus the contrastive
term) is evaluated on its query slice at the adapted parameters, and the
query gradients — taken at the adapted parameters and applied directly to
the base, i.e. the first-order treatment — are averaged across tasks into
one Adam update. One (support, query) loss pair per meta-iteration feeds the
loss-covariance regularizer, which therefore only ever sees pairs from
earlier iterations.

With meta-learning disabled the loop degenerates to plain epoch-wise Adam
over shuffled image batches; disabling confidence weighting fixes all
weights at 1 and the regularizer at its baseline; disabling the contrastive
term sets its coefficient to zero. All randomness derives from the single
config seed, so identical configs produce bit-identical trajectories.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .confident import (
    ConfidenceState,
    LossHistory,
    RegConfig,
    confidence_weights,
    iqr_threshold,
    lambda_from_history,
    loss_covariance,
    refresh_confidence,
)
from .contrastive import (
    ContrastiveConfig,
    batch_contrastive,
    embedding_grads_to_params,
    total_loss,
)
from .errors import ConfigError, ContractError
from .feature_io import FeatureDataset, split_tasks
from .model_core import (
    AdamState,
    ModelParams,
    NoiseConfig,
    ParamGrads,
    TRAINABLE_FIELDS,
    adam_step,
    adaptor_forward,
    anomaly_score,
    average_grads,
    init_adam,
    init_params,
    loss_backward,
)

# rng stream tags; every generator used in training is seeded as
# (seed, tag[, epoch]) so streams are independent of each other.
_STREAM_NOISE = 1
_STREAM_AUG = 2
_STREAM_TASKS = 3
_STREAM_SHUFFLE = 4


@dataclass
class MetaConfig:
    alpha: float = 1e-4  # inner-loop rate (plain gradient descent)
    beta_adaptor: float = 1e-4  # outer Adam rate, adaptor group
    beta_disc: float = 2e-4  # outer Adam rate, discriminator group
    inner_steps: int = 1
    n_tasks: int = 4
    epochs: int = 40
    batch_size: int = 16  # images per optimizer step
    support_fraction: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if not (self.alpha > 0 and self.beta_adaptor > 0 and self.beta_disc > 0):
            raise ConfigError("learning rates must be > 0")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if self.n_tasks < 1:
            raise ConfigError("n_tasks must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.support_fraction < 1.0:
            raise ConfigError("support_fraction must be in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")


@dataclass
class TrainReport:
    epochs: int
    train_loss: list
    val_loss: list  # None entries when no query split exists (plain loop)
    det_sigma: list  # None until two history pairs exist
    lambda_reg: list
    weight_stats: list
    config: dict = field(default_factory=dict)
    checkpoint_path: str | None = None

    def validate(self) -> None:
        for name in ("train_loss", "val_loss", "det_sigma", "lambda_reg", "weight_stats"):
            if len(getattr(self, name)) != self.epochs:
                raise ContractError(f"{name} length != epochs")

    def to_json_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "det_sigma": self.det_sigma,
            "lambda_reg": self.lambda_reg,
            "weight_stats": self.weight_stats,
            "config": self.config,
            "checkpoint_path": self.checkpoint_path,
        }

    def to_json_bytes(self) -> bytes:
        return json.dumps(self.to_json_dict(), sort_keys=True, separators=(",", ":")).encode()


@dataclass
class InnerAdaptResult:
    params: ModelParams
    initial_loss: float  # weighted data loss at the unadapted parameters


def inner_adapt(
    params: ModelParams,
    support_feats: np.ndarray,
    weights: np.ndarray,
    reg_lambda: float,
    alpha: float,
    steps: int,
    noise: NoiseConfig,
    th_pos: float = 0.5,
    th_neg: float = 0.5,
) -> InnerAdaptResult:
    """Task adaptation: ``steps`` plain gradient-descent updates on the
    weighted margin objective over the support set.

    Works on a clone; the base parameters (including running statistics) are
    never touched. With alpha=0 the returned parameters equal the base
    exactly.
    """
    if support_feats.shape[0] == 0:
        raise ContractError("support set is empty")
    adapted = params.copy()
    initial_loss = None
    for _ in range(steps):
        result = loss_backward(
            adapted, support_feats, noise, weights, reg_lambda, th_pos, th_neg,
            update_stats=False,
        )
        if initial_loss is None:
            initial_loss = result.data_loss
        for name in TRAINABLE_FIELDS:
            setattr(adapted, name, getattr(adapted, name) - alpha * getattr(result.grads, name))
    return InnerAdaptResult(adapted, initial_loss)


@dataclass
class MetaObjectiveResult:
    loss: float
    grads: ParamGrads
    data_loss: float
    cont_loss: float
    reg_lambda: float
    weights: np.ndarray


def meta_objective(
    adapted: ModelParams,
    query_feats: np.ndarray,
    reg_cfg: RegConfig,
    history: LossHistory,
    cont_cfg: ContrastiveConfig,
    noise: NoiseConfig,
    aug_rng: np.random.Generator,
    kappa: float = 1.5,
    weights: np.ndarray | None = None,
    use_confident: bool = True,
    use_contrastive: bool = True,
    th_pos: float = 0.5,
    th_neg: float = 0.5,
) -> MetaObjectiveResult:
    """Query-set objective at the adapted parameters, with exact gradients.

    Confidence weights are recomputed from the adapted model's own query
    scores (eval mode) and then held fixed inside the differentiable
    objective; pass ``weights`` explicitly to pin them (gradient checks do).
    The regularization coefficient comes from the loss history, falling back
    to the baseline when fewer than two pairs exist. The returned gradients
    are the exact derivatives of

        sum_i w_i L_margin(x_i) / sum_i w_i + lambda ||theta||^2
        + lambda_cont * L_contrastive(adaptor outputs)

    with respect to the adapted parameters. Query scoring in train mode
    updates the adapted model's running statistics in place.
    """
    if query_feats.shape[0] == 0:
        raise ContractError("query set is empty")
    if weights is None:
        if use_confident:
            scores = anomaly_score(adapted, query_feats)
            tau = iqr_threshold(scores, kappa)
            weights = confidence_weights(scores, tau)
        else:
            weights = np.ones(query_feats.shape[0])
    reg_lambda = lambda_from_history(reg_cfg, history) if use_confident else reg_cfg.lambda0

    scl = loss_backward(
        adapted, query_feats, noise, weights, reg_lambda, th_pos, th_neg,
        update_stats=True,
    )
    loss, grads = scl.loss, scl.grads
    cont_value = 0.0
    if use_contrastive and cont_cfg.lambda_cont > 0:
        embeddings = adaptor_forward(adapted, query_feats)
        cont_value, emb_grads = batch_contrastive(embeddings, cont_cfg, aug_rng)
        cont_grads = embedding_grads_to_params(adapted, query_feats, emb_grads)
        loss, grads = total_loss(scl.loss, scl.grads, cont_value, cont_grads, cont_cfg.lambda_cont)
    return MetaObjectiveResult(loss, grads, scl.data_loss, cont_value, reg_lambda, weights)


def outer_update(
    params: ModelParams,
    adam: AdamState,
    task_grads: list[ParamGrads],
    cfg: MetaConfig,
    weight_decay: float = 0.0,
    task_ids: list[int] | None = None,
) -> ModelParams:
    """Meta update: average the per-task query gradients and apply one Adam
    step to the base parameters with the per-group rates.

    When ``task_ids`` is given the summation order is fixed by sorting on
    them, making the average invariant to the caller's task ordering.
    """
    if not task_grads:
        raise ContractError("need at least one task gradient")
    if task_ids is not None:
        order = np.argsort(np.asarray(task_ids, dtype=np.int64), kind="stable")
        task_grads = [task_grads[i] for i in order]
    avg = average_grads(task_grads)
    return adam_step(adam, params, avg, cfg.beta_adaptor, cfg.beta_disc, weight_decay)


def _batch_slices(indices: np.ndarray, size: int) -> list[np.ndarray]:
    """Consecutive slices of at most ``size``; a singleton tail is folded into
    the previous slice so every batch supports batch statistics."""
    size = max(2, size)
    out = [indices[lo : lo + size] for lo in range(0, len(indices), size)]
    if len(out) > 1 and len(out[-1]) < 2:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def _weight_summary(weights: np.ndarray) -> dict:
    qs = np.quantile(weights, [0.0, 0.25, 0.5, 0.75, 1.0])
    return {
        "min": float(qs[0]),
        "q25": float(qs[1]),
        "median": float(qs[2]),
        "q75": float(qs[3]),
        "max": float(qs[4]),
        "mean": float(weights.mean()),
        "frac_below_one": float((weights < 1.0).mean()),
    }


def train(
    dataset: FeatureDataset,
    meta_cfg: MetaConfig,
    cont_cfg: ContrastiveConfig | None = None,
    reg_cfg: RegConfig | None = None,
    noise_cfg: NoiseConfig | None = None,
    *,
    kappa: float = 1.5,
    window: int = 10,
    th_pos: float = 0.5,
    th_neg: float = 0.5,
    weight_decay: float = 1e-5,
    adapted_dim: int | None = None,
    hidden_dim: int | None = None,
    use_confident: bool = True,
    use_meta: bool = True,
    use_contrastive: bool = True,
):
    """Run the full training pipeline; returns (params, TrainReport).

    The dataset must be all-normal. Only ``noise_cfg.sigma`` is consumed from
    the noise config: every random stream (noise, augmentation, task splits,
    batch shuffling) is derived from ``meta_cfg.seed`` so that identical
    configurations yield bit-identical parameter trajectories.
    """
    meta_cfg.validate()
    if cont_cfg is None:
        cont_cfg = ContrastiveConfig()
    if reg_cfg is None:
        reg_cfg = RegConfig()
    sigma = noise_cfg.sigma if noise_cfg is not None else 0.015
    dataset.validate()
    if dataset.image_labels is not None and (dataset.image_labels == 1).any():
        raise ContractError("training dataset contains labeled anomalies")

    n_images = dataset.n_images
    ppi = dataset.patches_per_image
    n_patches = n_images * ppi
    feats = dataset.patch_matrix()
    feat_dim = dataset.feat_dim
    a_dim = adapted_dim or feat_dim
    h_dim = hidden_dim or a_dim

    seed = meta_cfg.seed
    params = init_params(feat_dim, a_dim, h_dim, seed)
    adam = init_adam(params)
    noise = NoiseConfig.from_seed(sigma, (seed, _STREAM_NOISE))
    aug_rng = np.random.default_rng((seed, _STREAM_AUG))

    state = ConfidenceState(np.ones(n_patches), tau=0.0, kappa=kappa)
    history = LossHistory(window)

    rep_train, rep_val, rep_det, rep_lambda, rep_weights = [], [], [], [], []

    for epoch in range(meta_cfg.epochs):
        if use_confident:
            state = refresh_confidence(state, params, dataset, epoch=epoch)
            weights_all = state.weights
        else:
            weights_all = np.ones(n_patches)

        sigma_mat = loss_covariance(history)
        rep_det.append(None if sigma_mat is None else float(np.linalg.det(sigma_mat)))
        lam_epoch = lambda_from_history(reg_cfg, history) if use_confident else reg_cfg.lambda0
        rep_lambda.append(lam_epoch)
        rep_weights.append(_weight_summary(weights_all))

        epoch_train, epoch_val = [], []
        if use_meta:
            tasks = split_tasks(
                dataset, meta_cfg.n_tasks, meta_cfg.support_fraction,
                seed=(seed, _STREAM_TASKS, epoch),
            )
            # One meta-iteration per image batch, matching the plain loop's
            # optimizer-step pacing; each task's support and query sets are
            # walked once per epoch across those iterations.
            iterations = -(-n_images // meta_cfg.batch_size)
            sup_slices = [
                _batch_slices(t.support_flat(ppi), -(-len(t.support_indices) // iterations))
                for t in tasks
            ]
            qry_slices = [
                _batch_slices(t.query_flat(ppi), -(-len(t.query_indices) // iterations))
                for t in tasks
            ]
            for it in range(iterations):
                lam = lambda_from_history(reg_cfg, history) if use_confident else reg_cfg.lambda0
                task_grads, task_ids = [], []
                sup_losses, qry_losses = [], []
                adapted_means, adapted_vars = [], []
                for t, task in enumerate(tasks):
                    sup_idx = sup_slices[t][it % len(sup_slices[t])]
                    qry_idx = qry_slices[t][it % len(qry_slices[t])]
                    inner = inner_adapt(
                        params, feats[sup_idx], weights_all[sup_idx], lam,
                        meta_cfg.alpha, meta_cfg.inner_steps, noise, th_pos, th_neg,
                    )
                    mo = meta_objective(
                        inner.params, feats[qry_idx], reg_cfg, history, cont_cfg,
                        noise, aug_rng, kappa=kappa,
                        use_confident=use_confident, use_contrastive=use_contrastive,
                        th_pos=th_pos, th_neg=th_neg,
                    )
                    task_grads.append(mo.grads)
                    task_ids.append(task.task_id)
                    sup_losses.append(inner.initial_loss)
                    qry_losses.append(mo.data_loss)
                    adapted_means.append(inner.params.bn_running_mean)
                    adapted_vars.append(inner.params.bn_running_var)
                outer_update(params, adam, task_grads, meta_cfg, weight_decay, task_ids)
                # Carry normalization statistics through the meta update: the
                # base model keeps the task-average of the adapted buffers so
                # eval-mode scoring tracks the training distribution.
                params.bn_running_mean = np.mean(adapted_means, axis=0)
                params.bn_running_var = np.mean(adapted_vars, axis=0)
                sup_mean = float(np.mean(sup_losses))
                qry_mean = float(np.mean(qry_losses))
                history.push(sup_mean, qry_mean)
                epoch_train.append(sup_mean)
                epoch_val.append(qry_mean)
            rep_train.append(float(np.mean(epoch_train)))
            rep_val.append(float(np.mean(epoch_val)))
        else:
            shuffle_rng = np.random.default_rng((seed, _STREAM_SHUFFLE, epoch))
            order = shuffle_rng.permutation(n_images)
            for lo in range(0, n_images, meta_cfg.batch_size):
                imgs = order[lo : lo + meta_cfg.batch_size]
                flat = (imgs[:, None] * ppi + np.arange(ppi)[None, :]).reshape(-1)
                batch = feats[flat]
                res = loss_backward(
                    params, batch, noise, weights_all[flat], lam_epoch, th_pos, th_neg,
                )
                loss_val, grads = res.loss, res.grads
                if use_contrastive and cont_cfg.lambda_cont > 0:
                    embeddings = adaptor_forward(params, batch)
                    cval, emb_grads = batch_contrastive(embeddings, cont_cfg, aug_rng)
                    cgrads = embedding_grads_to_params(params, batch, emb_grads)
                    loss_val, grads = total_loss(res.loss, grads, cval, cgrads, cont_cfg.lambda_cont)
                adam_step(adam, params, grads, meta_cfg.beta_adaptor, meta_cfg.beta_disc, weight_decay)
                epoch_train.append(res.data_loss)
            rep_train.append(float(np.mean(epoch_train)))
            rep_val.append(None)

    report = TrainReport(
        epochs=meta_cfg.epochs,
        train_loss=rep_train,
        val_loss=rep_val,
        det_sigma=rep_det,
        lambda_reg=rep_lambda,
        weight_stats=rep_weights,
    )
    report.validate()
    return params, report
