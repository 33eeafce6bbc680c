"""Pixel-level face image quality maps from stochastic-dropout embedding robustness."""
from .errors import FormatError, InputError, NumericError, PlqError, ShapeError
from .facemodel import EmbeddingModel, embed, load, save, stochastic_embed, toy16, train_toy
from .fiq import FiqConfig, QualityResult, calibrate_scaling, quality, quality_raw, quality_stats, scale_quality
from .plq import PlqMap, SaliencyMap, build_head, calibrate_gamma, merge_channels, plq_map, saliency, visualize

__version__ = "0.1.0"
