"""Segment the object a short sentence refers to in a video clip.

A sentence is encoded into dynamic convolution filters that are matched
against a spatiotemporal feature pyramid of the clip; thresholding the
response maps at the finest resolution yields the mask.
"""

__version__ = "0.1.0"

from .embeddings import EmbeddingConfig, EmbeddingTable, build_table, load_embeddings, tokenize
from .errors import (
    ConfigError,
    FormatError,
    InputError,
    NumericError,
    ParseError,
    PipelineError,
)
from .loss import downsample_mask, grad_check, mask_pyramid, pixel_loss, total_loss
from .metrics import EvalReport, PairEvalReport, aggregate, iou, pair_eval
from .model import ModelConfig, SegmentationModel, build_model
from .textenc import ConvTextEncoder, SentenceMatrix, embed_sentence, encode_text
from .trainer import (
    Checkpoint,
    FusionConfig,
    Predictor,
    TrainConfig,
    argmax_labels,
    fuse,
    infer,
    load_checkpoint,
    pair_inference,
    save_checkpoint,
    select_pairs,
    train,
)
from .videoenc import VideoClip, VideoEncoder, coordinate_channels, encode_video

__all__ = [
    "Checkpoint", "ConfigError", "ConvTextEncoder", "EmbeddingConfig",
    "EmbeddingTable", "EvalReport", "FormatError", "FusionConfig", "InputError",
    "ModelConfig", "NumericError", "PairEvalReport", "ParseError",
    "PipelineError", "Predictor", "SegmentationModel", "SentenceMatrix",
    "TrainConfig", "VideoClip", "VideoEncoder", "aggregate", "argmax_labels",
    "build_model", "build_table", "coordinate_channels", "downsample_mask",
    "embed_sentence", "encode_text", "encode_video", "fuse", "grad_check",
    "infer", "iou", "load_checkpoint", "load_embeddings", "mask_pyramid",
    "pair_eval", "pair_inference", "pixel_loss", "save_checkpoint",
    "select_pairs", "tokenize", "total_loss", "train",
]
