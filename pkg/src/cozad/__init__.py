"""Zero-shot anomaly-detection engine over precomputed patch features.

Trains a small discriminator on all-normal data with confidence-weighted
sample losses, covariance-driven adaptive regularization, first-order
meta-updates, and a contrastive shaping term, then scores patches by the
negated discriminator output.
"""

from .config import RunConfig, load_config
from .confident import (
    ConfidenceState,
    LossHistory,
    RegConfig,
    adaptive_lambda,
    confidence_weights,
    iqr_threshold,
    lambda_from_history,
    loss_covariance,
    refresh_confidence,
)
from .contrastive import (
    ContrastiveConfig,
    augment,
    batch_contrastive,
    contrastive_loss,
    cosine_sim,
    knn_positives,
    total_loss,
)
from .errors import (
    ConfigError,
    ContractError,
    CorruptionError,
    CozadError,
    FormatError,
    UndefinedMetricError,
)
from .evaluation import MapConfig, ScoreReport, anomaly_map, auroc, evaluate, image_score
from .feature_io import (
    FeatureDataset,
    SynthConfig,
    TaskBatch,
    read_feature_file,
    split_tasks,
    subset,
    synth_generate,
    write_feature_file,
)
from .meta import MetaConfig, TrainReport, inner_adapt, meta_objective, outer_update, train
from .model_core import (
    AdamState,
    ModelParams,
    NoiseConfig,
    ParamGrads,
    adam_step,
    adaptor_forward,
    anomaly_score,
    discriminator_forward,
    init_adam,
    init_params,
    load_checkpoint,
    loss_backward,
    margin_loss,
    save_checkpoint,
    synth_anomaly,
)

__version__ = "0.1.0"
