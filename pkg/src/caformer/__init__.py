"""Desk-scale cross-modulated attention tracker with collaborative token
elimination and an analytic MAC profiler."""

from .attention import (
    BlockParams,
    CmeParams,
    CorrelationMap,
    caformer_block,
    cme,
    correlation,
    modulated_attention,
    standard_block,
)
from .elimination import KeepSet, apply_keep, cte_scores, restore, select_topk
from .embedding import ImageTensor, PositionalEncoding, concat_tokens, embed, patchify
from .errors import CaformerError, ConfigError, ContractError, DimensionError, UsageError
from .head import BBox, HeadParams, ScoreMaps, decode, fuse_and_fold, iou, predict
from .numerics import TokenMatrix, Tape, count_macs, trace
from .pipeline import (
    ModalityPair,
    TrackerConfig,
    TrackerParams,
    forward,
    forward_features,
    init_params,
    precision_success,
)
from .profiler import CostReport, estimate, measure

__all__ = [
    "BBox", "BlockParams", "CaformerError", "CmeParams", "ConfigError",
    "ContractError", "CorrelationMap", "CostReport", "DimensionError",
    "HeadParams", "ImageTensor", "KeepSet", "ModalityPair",
    "PositionalEncoding", "ScoreMaps", "Tape", "TokenMatrix",
    "TrackerConfig", "TrackerParams", "UsageError", "apply_keep",
    "caformer_block", "cme", "concat_tokens", "correlation", "count_macs",
    "cte_scores", "decode", "embed", "estimate", "forward",
    "forward_features", "fuse_and_fold", "init_params", "iou", "measure",
    "modulated_attention", "patchify", "precision_success", "predict",
    "restore", "select_topk", "standard_block", "trace",
]
