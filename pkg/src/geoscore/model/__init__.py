"""Fusion model: per-modality ViT encoders, alternating cross-attention, fitting head."""

from geoscore.model.config import DESK_CONFIG, ModelConfig
from geoscore.model.network import (
    AttentionParams,
    BranchParams,
    ForwardContext,
    FusionModel,
    cross_attention,
    encoder_layer,
    fitting_head,
    forward_scores,
    fuse,
    init_model,
    multi_head_attention,
    patch_embed,
    patchify,
    predict,
    vit_encode,
)
from geoscore.model.training import (
    ConstantLabelsError,
    LabelScaler,
    PairExample,
    TrainConfig,
    TrainResult,
    load_model,
    r_squared,
    save_model,
    train,
)

__all__ = [
    "AttentionParams",
    "BranchParams",
    "ConstantLabelsError",
    "DESK_CONFIG",
    "ForwardContext",
    "FusionModel",
    "LabelScaler",
    "ModelConfig",
    "PairExample",
    "TrainConfig",
    "TrainResult",
    "cross_attention",
    "encoder_layer",
    "fitting_head",
    "forward_scores",
    "fuse",
    "init_model",
    "load_model",
    "multi_head_attention",
    "patch_embed",
    "patchify",
    "predict",
    "r_squared",
    "save_model",
    "train",
    "vit_encode",
]
