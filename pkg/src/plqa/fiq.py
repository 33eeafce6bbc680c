"""Model-specific face image quality from dropout-embedding robustness."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Sequence, Tuple

import numpy as np

from .errors import NumericError
from .facemodel import EmbeddingModel, stochastic_embed
from .seeding import derive_seed

# Scaling constants reported for the two ResNet-100 models.
ARCFACE_SCALING = (130.0, 0.88)
FACENET_SCALING = (450.0, 0.93)


@dataclass(frozen=True)
class FiqConfig:
    m: int = 100
    p_d: float = 0.5
    alpha: float = ARCFACE_SCALING[0]
    r: float = ARCFACE_SCALING[1]
    normalize_embeddings: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError(f"m must be at least 2, got {self.m}")
        # p_d = 0 is the degenerate all-ones-mask case
        if not 0.0 <= self.p_d < 1.0:
            raise ValueError(f"p_d must lie in [0, 1), got {self.p_d}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class QualityResult:
    q_raw: float
    q_scaled: float
    config_used: FiqConfig


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def pairwise_distance_sum(x) -> float:
    """Sum of Euclidean distances over all unordered row pairs."""
    x = np.asarray(x, dtype=np.float64)
    diff = x[:, None, :] - x[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    return float(d[np.triu_indices(len(x), k=1)].sum())


def quality_raw(x, normalize: bool = False) -> float:
    """``2 * sigmoid(-(2 / m^2) * sum_{i<j} ||x_i - x_j||)`` for the ``m`` rows of ``x``.

    With ``normalize`` every non-zero row is first scaled to unit L2 norm.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError(f"need an m x D matrix with m >= 2, got shape {x.shape}")
    if normalize:
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        x = np.where(norms > 0, x / np.where(norms > 0, norms, 1.0), x)
    m = len(x)
    return 2.0 * _sigmoid(-2.0 / m**2 * pairwise_distance_sum(x))


def scale_quality(q_raw, alpha: float, r: float):
    """``sigmoid(alpha * (q_raw - r))``; accepts scalars or arrays."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if np.ndim(q_raw) == 0:
        return _sigmoid(alpha * (float(q_raw) - r))
    z = alpha * (np.asarray(q_raw, dtype=np.float64) - r)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def quality(model: EmbeddingModel, image, config: FiqConfig = FiqConfig()) -> QualityResult:
    x = stochastic_embed(model, image, config.m, config.seed, p=config.p_d)
    q = quality_raw(x, config.normalize_embeddings)
    return QualityResult(q, scale_quality(q, config.alpha, config.r), config)


def repeat_seeds(config: FiqConfig, repeats: int) -> List[int]:
    return [derive_seed(config.seed, k) for k in range(repeats)]


def quality_repeats(model: EmbeddingModel, image, config: FiqConfig, repeats: int) -> List[QualityResult]:
    """``repeats`` quality evaluations; repetition ``k`` uses seed hash(config.seed, k)."""
    if repeats < 2:
        raise ValueError(f"repeats must be at least 2, got {repeats}")
    return [quality(model, image, replace(config, seed=s)) for s in repeat_seeds(config, repeats)]


def quality_stats(model: EmbeddingModel, image, config: FiqConfig, repeats: int = 10) -> Tuple[float, float]:
    """Sample mean and standard deviation (n - 1) of the scaled quality."""
    vals = np.array([res.q_scaled for res in quality_repeats(model, image, config, repeats)])
    return float(vals.mean()), float(vals.std(ddof=1))


def calibrate_scaling(dev_qualities: Sequence[float]) -> Tuple[float, float]:
    """Pick ``(alpha, r)`` so the dev mean maps to 0.5 and mean -/+ 2 std to 0.05/0.95."""
    q = np.asarray(dev_qualities, dtype=np.float64)
    if q.size < 2:
        raise ValueError("calibration needs at least 2 development qualities")
    std = float(q.std(ddof=1))
    if np.all(q == q[0]) or std == 0.0:
        raise NumericError("development qualities have zero variance; set alpha manually")
    return math.log(19.0) / (2.0 * std), float(q.mean())
