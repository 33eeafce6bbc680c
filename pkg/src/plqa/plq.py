"""Pixel-level quality maps.

Pipeline for one image:

1. scaled quality of the image (:mod:`plqa.fiq`);
2. a zero-bias linear quality node on the embedding whose weights are the
   scaled quality divided by the embedding's L1 norm, so on this image it
   outputs the scaled quality;
3. gradient of that node with respect to the input pixels;
4. per-pixel mean of absolute channel gradients;
5. the fixed squashing ``v(s) = 1 - 1 / (1 + 10**gamma * s**2)``.

Gradients are never normalised per image; two maps computed with the same
gamma are directly comparable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from . import numgrad as ng
from .errors import InputError, NumericError
from .facemodel import EmbeddingModel
from .fiq import FiqConfig, QualityResult, quality

PAPER_LITERAL = "paper_literal"
SIGN_CORRECTED = "sign_corrected"
WEIGHT_MODES = (PAPER_LITERAL, SIGN_CORRECTED)

# gamma values used for the two ResNet-100 models
GAMMA_ARCFACE = 7.5
GAMMA_FACENET = 5.5

_BELOW_ONE = float(np.nextafter(1.0, 0.0))


@dataclass(frozen=True)
class QualityHead:
    weights: np.ndarray
    source_quality: float
    weight_mode: str = PAPER_LITERAL
    bias: float = 0.0

    def __call__(self, embedding) -> float:
        return float(np.dot(self.weights, np.asarray(embedding, dtype=np.float64)) + self.bias)


def build_head(embedding, q_scaled: float, mode: str = PAPER_LITERAL) -> QualityHead:
    """Quality node weights from the image's embedding and scaled quality.

    ``paper_literal`` gives every feature the same weight, which reproduces
    ``q_scaled`` only when the embedding is nonnegative. ``sign_corrected``
    flips the weight of negative features so the output matches for any
    embedding.
    """
    if mode not in WEIGHT_MODES:
        raise ValueError(f"unknown weight mode {mode!r}, expected one of {WEIGHT_MODES}")
    e = np.asarray(embedding, dtype=np.float64)
    l1 = float(np.abs(e).sum())
    if l1 == 0.0:
        raise NumericError("the image produced an all-zero embedding; the quality head is undefined")
    w = np.full(e.shape, q_scaled / l1)
    if mode == SIGN_CORRECTED:
        w = w * np.sign(e)
    return QualityHead(w, float(q_scaled), mode)


@dataclass(frozen=True)
class SaliencyMap:
    grads: np.ndarray  # H x W x C, signed
    clip_norm_applied: Optional[float] = None
    step_norms: Tuple[float, ...] = ()  # norm of the gradient entering each layer, last layer first

    @property
    def clipped(self) -> bool:
        return self.clip_norm_applied is not None and any(n > self.clip_norm_applied for n in self.step_norms)


def _backprop(model: EmbeddingModel, acts, seed_grad, clip_norm: Optional[float]) -> SaliencyMap:
    g = np.asarray(seed_grad, dtype=np.float64)
    norms = []
    for i in range(len(model.layers) - 1, -1, -1):
        norm = float(np.sqrt(np.sum(g * g)))
        norms.append(norm)
        if clip_norm is not None and norm > clip_norm:
            g = g * (clip_norm / norm)
        g = ng.backward_input(model.layers[i], acts[i], g, index=i)
    return SaliencyMap(g, clip_norm, tuple(norms))


def saliency(model: EmbeddingModel, image, head: QualityHead, clip_norm: Optional[float] = None) -> SaliencyMap:
    """Input gradient of ``head(embed(image))`` with the head weights held fixed.

    The dropout site is a pass-through. With ``clip_norm`` set, the gradient
    entering each layer's backward step is rescaled to that global L2 norm
    whenever it exceeds it.
    """
    acts = model.trace(model.check_image(image))
    return _backprop(model, acts, head.weights, clip_norm)


def merge_channels(s) -> np.ndarray:
    """Per-pixel mean of absolute gradients over channels."""
    grads = s.grads if isinstance(s, SaliencyMap) else np.asarray(s, dtype=np.float64)
    return np.abs(grads).mean(axis=-1)


@dataclass(frozen=True)
class PlqMap:
    values: np.ndarray  # H x W in [0, 1)
    gamma: float
    merged_saliency: np.ndarray  # H x W, >= 0


def pixel_quality(s_hat, gamma: float):
    """``1 - 1 / (1 + 10**gamma * s**2)``, evaluated as ``t / (1 + t)``."""
    with np.errstate(over="ignore"):
        t = 10.0**gamma * np.square(np.asarray(s_hat, dtype=np.float64))
    t = np.minimum(t, 1e300)  # overflow saturates instead of producing inf / inf
    return np.minimum(t / (1.0 + t), _BELOW_ONE)


def visualize(s_hat, gamma: float) -> PlqMap:
    s_hat = np.asarray(s_hat, dtype=np.float64)
    if np.any(s_hat < 0) or not np.all(np.isfinite(s_hat)):
        raise InputError("merged saliency must be finite and nonnegative")
    return PlqMap(pixel_quality(s_hat, gamma), float(gamma), s_hat.copy())


def plq_map(
    model: EmbeddingModel,
    image,
    fiq_config: FiqConfig = FiqConfig(),
    gamma: float = GAMMA_ARCFACE,
    mode: str = PAPER_LITERAL,
    clip_norm: Optional[float] = None,
) -> Tuple[QualityResult, PlqMap]:
    image = model.check_image(image)
    q = quality(model, image, fiq_config)
    acts = model.trace(image)
    head = build_head(acts[-1], q.q_scaled, mode)
    s = _backprop(model, acts, head.weights, clip_norm)
    return q, visualize(merge_channels(s), gamma)


def calibrate_gamma(reference_s_hats: Sequence[np.ndarray], face_box: Tuple[int, int, int, int]) -> float:
    """Gamma that maps the 95th percentile of in-face merged saliency to 0.9.

    ``face_box`` is ``(top, left, height, width)``.
    """
    if not len(reference_s_hats):
        raise ValueError("need at least one reference map")
    top, left, height, width = face_box
    pooled = []
    for s in reference_s_hats:
        s = np.asarray(s, dtype=np.float64)
        if top < 0 or left < 0 or height <= 0 or width <= 0 or top + height > s.shape[0] or left + width > s.shape[1]:
            raise ValueError(f"face box {face_box} does not fit inside a {s.shape[0]}x{s.shape[1]} map")
        pooled.append(s[top:top + height, left:left + width].ravel())
    q95 = float(np.percentile(np.concatenate(pooled), 95))
    if q95 <= 0.0:
        raise NumericError("reference saliency is zero inside the face box; gamma is undefined")
    return math.log10(9.0) - 2.0 * math.log10(q95)
