"""Saliency-driven foreground/background disentangled segmentation on pluggable embeddings."""

from .aggregate import aggregate, attn_aggregate, decode, hard_aggregate
from .core import (
    AttentionMap,
    Branch,
    CorrelationVolume,
    EmbeddingPair,
    PipelineConfig,
    PrototypeSet,
    SaliencyStack,
    SalsegError,
    SegmentationOutput,
    Stage,
    TokenPartition,
    load_config,
    save_config,
    validate_config,
)
from .encoders import DatasetSpec, SceneDataset, embed_external, generate_scene
from .hrm import category_prototype, fuse, pixel_refine, semantic_prototype
from .model import Aggregation, Disentangle, ModelVariant, SegModel
from .sdm import correlation, cross_attend, itm_loss, saliency, select_tokens, split_volume
from .training import (
    Checkpoint,
    TrainConfig,
    build_model,
    efficiency_report,
    evaluate,
    run_ablation,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "Aggregation", "AttentionMap", "Branch", "Checkpoint", "CorrelationVolume", "DatasetSpec",
    "Disentangle", "EmbeddingPair", "ModelVariant", "PipelineConfig", "PrototypeSet", "SaliencyStack",
    "SalsegError", "SceneDataset", "SegModel", "SegmentationOutput", "Stage", "TokenPartition",
    "TrainConfig", "aggregate", "attn_aggregate", "build_model", "category_prototype", "correlation",
    "cross_attend", "decode", "efficiency_report", "embed_external", "evaluate", "fuse",
    "generate_scene", "hard_aggregate", "itm_loss", "load_config", "pixel_refine", "run_ablation",
    "saliency", "save_config", "select_tokens", "semantic_prototype", "split_volume", "train",
    "validate_config",
]
