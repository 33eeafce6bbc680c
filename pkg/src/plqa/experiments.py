"""Degradation and restoration experiments measuring image- and pixel-level quality change.

Masking protocol: one black square per (image, size), placed uniformly at
random inside the image minus a 5% margin on every side. For each masked
image we record the drop in scaled quality and the mean drop in pixel
quality over the masked square. Restoration runs the same measurement on
(degraded, restored) pairs, where restoration is a deterministic fill that
stands in for learned inpainting.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InputError
from .facemodel import EmbeddingModel
from .fiq import FiqConfig, quality_stats
from .plq import PAPER_LITERAL, GAMMA_ARCFACE, PlqMap, plq_map
from .seeding import stream

log = logging.getLogger(__name__)

ABSOLUTE_SIZES = (10, 20, 30, 40, 50)
FRACTION_SIZES = (0.1, 0.2, 0.3, 0.4, 0.5)
ABSOLUTE_MIN_SIDE = 112
BLUR_PASSES = 25

RECORD_FIELDS = ("image_id", "size", "top", "left", "q_org", "q_mod", "delta_q", "delta_p")
SUMMARY_FIELDS = (
    "size", "n", "frac_positive_dq", "median_dq", "q1_dq", "q3_dq", "frac_positive_dp", "median_dp",
)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def inner_margins(height: int, width: int) -> Tuple[int, int]:
    """Rows and columns trimmed from each side to keep the inner 90% of an image."""
    return _round_half_up(0.05 * height), _round_half_up(0.05 * width)


@dataclass(frozen=True)
class MaskSpec:
    top: int
    left: int
    size: int
    fill_value: float = 0.0

    @property
    def box(self) -> Tuple[int, int, int, int]:
        return (self.top, self.left, self.size, self.size)


def apply_mask(image, mask: MaskSpec) -> np.ndarray:
    out = np.array(image, dtype=np.float64, copy=True)
    out[mask.top:mask.top + mask.size, mask.left:mask.left + mask.size, ...] = mask.fill_value
    return out


def place_random_mask(image, s: int, rng_seed: int, fill_value: float = 0.0) -> Tuple[np.ndarray, MaskSpec]:
    """Mask an ``s x s`` square placed uniformly inside the inner 90% of ``image``."""
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    mh, mw = inner_margins(h, w)
    max_s = min(h - 2 * mh, w - 2 * mw)
    if s < 1 or s > max_s:
        raise InputError(f"mask size {s} does not fit the inner region of a {h}x{w} image; max feasible size is {max_s}")
    rng = stream(rng_seed, "mask")
    top = int(rng.integers(mh, h - mh - s + 1))
    left = int(rng.integers(mw, w - mw - s + 1))
    spec = MaskSpec(top, left, int(s), float(fill_value))
    return apply_mask(image, spec), spec


def delta_q(q_org: float, q_mod: float) -> float:
    """Image quality change; positive when the modification lowered quality."""
    return q_org - q_mod


def region_mask(shape, region) -> np.ndarray:
    """Boolean H x W mask from a box ``(top, left, h, w)``, a boolean array or a list of ``(i, j)`` pixels."""
    h, w = shape
    if isinstance(region, np.ndarray) and region.dtype == bool:
        if region.shape != (h, w):
            raise InputError(f"region mask has shape {region.shape}, maps are {h}x{w}")
        return region
    out = np.zeros((h, w), dtype=bool)
    if isinstance(region, tuple) and len(region) == 4 and all(np.ndim(v) == 0 for v in region):
        top, left, rh, rw = (int(v) for v in region)
        if top < 0 or left < 0 or top + rh > h or left + rw > w:
            raise InputError(f"region {region} lies outside a {h}x{w} map")
        out[top:top + rh, left:left + rw] = True
        return out
    for i, j in region:
        if not (0 <= i < h and 0 <= j < w):
            raise InputError(f"pixel ({i}, {j}) lies outside a {h}x{w} map")
        out[i, j] = True
    return out


def delta_p(p_org, p_mod, region) -> float:
    """Mean of ``p_org - p_mod`` over the pixels in ``region``."""
    a = p_org.values if isinstance(p_org, PlqMap) else np.asarray(p_org, dtype=np.float64)
    b = p_mod.values if isinstance(p_mod, PlqMap) else np.asarray(p_mod, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError(f"pixel-quality maps differ in shape: {a.shape} vs {b.shape}")
    sel = region_mask(a.shape, region)
    if not sel.any():
        raise InputError("pixel region is empty")
    return float((a[sel] - b[sel]).mean())


@dataclass(frozen=True)
class DeltaRecord:
    image_id: str
    size: int
    top: int
    left: int
    q_org: float
    q_mod: float
    delta_q: float
    delta_p: float
    region: Tuple[int, int, int, int] = field(default=(0, 0, 0, 0), compare=False)

    def row(self) -> List[str]:
        return [self.image_id] + [str(v) for v in (self.size, self.top, self.left)] + [
            format(v, ".9g") for v in (self.q_org, self.q_mod, self.delta_q, self.delta_p)
        ]


def mask_sizes(height: int, width: int, sizes: Optional[Sequence] = None) -> List[int]:
    """Pixel sizes for an image. Floats in (0, 1) are fractions of the shorter side.

    By default absolute sizes are used for images whose shorter side is at
    least 112 pixels and fractional sizes otherwise.
    """
    side = min(height, width)
    if sizes is None:
        sizes = ABSOLUTE_SIZES if side >= ABSOLUTE_MIN_SIDE else FRACTION_SIZES
    out = []
    for s in sizes:
        if isinstance(s, float) and 0 < s < 1:
            s = _round_half_up(s * side)
        out.append(int(s))
    return out


def _measure(model, org_image, mod_image, region, config, gamma, mode, clip_norm, base=None):
    q_o, p_o = base if base is not None else plq_map(model, org_image, config, gamma, mode, clip_norm)
    q_m, p_m = plq_map(model, mod_image, config, gamma, mode, clip_norm)
    return q_o, p_o, q_m, p_m, delta_q(q_o.q_scaled, q_m.q_scaled), delta_p(p_o, p_m, region)


def _ordered_map(fn, items, jobs):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def run_mask_experiment(
    model: EmbeddingModel,
    images: Iterable[Tuple[str, np.ndarray]],
    sizes: Optional[Sequence] = None,
    per_size_count: int = 1,
    fiq_config: FiqConfig = FiqConfig(),
    gamma: float = GAMMA_ARCFACE,
    seed: int = 0,
    mode: str = PAPER_LITERAL,
    clip_norm: Optional[float] = None,
    fill_value: float = 0.0,
    jobs: int = 1,
) -> List[DeltaRecord]:
    """Random-mask degradation over ``(image_id, image)`` pairs.

    Mask ``k`` of a given size on an image uses seed hash(seed, image_id,
    size, k). Records come back ordered by image, then size, then ``k``,
    whatever ``jobs`` is. Sizes that do not fit an image are skipped with a
    logged warning.
    """
    items = list(images)

    def one(item):
        image_id, image = item
        image = np.asarray(image, dtype=np.float64)
        h, w = image.shape[:2]
        base = plq_map(model, image, fiq_config, gamma, mode, clip_norm)
        out = []
        for s in mask_sizes(h, w, sizes):
            for k in range(per_size_count):
                try:
                    masked, spec = place_random_mask(image, s, _mask_seed(seed, image_id, s, k), fill_value)
                except InputError as err:
                    log.warning("skipping %s size %d: %s", image_id, s, err)
                    break
                q_o, _, q_m, _, dq, dp = _measure(model, image, masked, spec.box, fiq_config, gamma, mode, clip_norm, base)
                out.append(DeltaRecord(image_id, s, spec.top, spec.left, q_o.q_scaled, q_m.q_scaled, dq, dp, spec.box))
        return out

    return [rec for chunk in _ordered_map(one, items, jobs) for rec in chunk]


def _mask_seed(seed, image_id, size, k):
    return int(stream(seed, str(image_id), int(size), int(k)).integers(2**63))


@dataclass(frozen=True)
class SizeSummary:
    size: int
    n: int
    frac_positive_dq: float
    median_dq: float
    q1_dq: float
    q3_dq: float
    frac_positive_dp: float
    median_dp: float

    def row(self) -> List[str]:
        return [str(self.size), str(self.n)] + [
            format(getattr(self, f), ".9g") for f in SUMMARY_FIELDS[2:]
        ]


def summarize(records: Sequence[DeltaRecord]) -> List[SizeSummary]:
    """Per-size distribution summary; quartiles use linear interpolation."""
    out = []
    for s in sorted({r.size for r in records}):
        dq = np.array([r.delta_q for r in records if r.size == s])
        dp = np.array([r.delta_p for r in records if r.size == s])
        q1, med, q3 = np.percentile(dq, [25, 50, 75])
        out.append(SizeSummary(
            s, len(dq), float(np.mean(dq > 0)), float(med), float(q1), float(q3),
            float(np.mean(dp > 0)), float(np.median(dp)),
        ))
    return out


def write_records_csv(records: Sequence[DeltaRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for rec in sorted(records, key=lambda r: (r.image_id, r.size)):
            writer.writerow(rec.row())


def write_summary_csv(summary: Sequence[SizeSummary], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_FIELDS)
        for row in summary:
            writer.writerow(row.row())


def read_records_csv(path) -> List[DeltaRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        DeltaRecord(
            r["image_id"], int(r["size"]), int(r["top"]), int(r["left"]),
            float(r["q_org"]), float(r["q_mod"]), float(r["delta_q"]), float(r["delta_p"]),
        )
        for r in rows
    ]


# ---------------------------------------------------------------- restoration


def _ring(shape, region, width=2):
    h, w = shape
    top, left, rh, rw = region
    if top < 0 or left < 0 or rh <= 0 or rw <= 0 or top + rh > h or left + rw > w:
        raise InputError(f"region {region} lies outside a {h}x{w} image")
    outer = np.zeros((h, w), dtype=bool)
    outer[max(top - width, 0):min(top + rh + width, h), max(left - width, 0):min(left + rw + width, w)] = True
    inner = region_mask((h, w), region)
    ring = outer & ~inner
    if not ring.any():
        raise InputError(f"region {region} leaves no border pixels to fill from")
    return inner, ring


def fill_region(image, region: Tuple[int, int, int, int], mode: str = "mean_fill") -> np.ndarray:
    """Deterministic stand-in for inpainting ``region = (top, left, h, w)``.

    ``mean_fill`` paints the per-channel mean of the 2-pixel border ring.
    ``blur_fill`` starts from that and runs 25 Jacobi passes of a 3x3 box
    blur over the region, holding every pixel outside it fixed.
    """
    image = np.asarray(image, dtype=np.float64)
    inner, ring = _ring(image.shape[:2], region)
    out = image.copy()
    border = image[ring]
    base = border.min(axis=0)
    out[inner] = base + (border - base).mean(axis=0)  # shifted mean: exact for a constant border
    if mode == "mean_fill":
        return out
    if mode != "blur_fill":
        raise ValueError(f"unknown fill mode {mode!r}")
    h, w = image.shape[:2]
    lead = [(1, 1), (1, 1)] + [(0, 0)] * (image.ndim - 2)
    ones = np.pad(np.ones((h, w)), 1)
    count = sum(ones[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3))
    if image.ndim == 3:
        count = count[..., None]
    for _ in range(BLUR_PASSES):
        p = np.pad(out, lead)
        blurred = sum(p[dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)) / count
        out[inner] = blurred[inner]
    return out


@dataclass(frozen=True)
class RestorationPair:
    image_id: str
    degraded: np.ndarray
    restored: np.ndarray
    region: Tuple[int, int, int, int]


def mask_and_fill(image_id: str, image, region, mode: str = "mean_fill", fill_value: float = 0.0) -> RestorationPair:
    """Black out ``region`` and restore it with :func:`fill_region`."""
    top, left, h, w = region
    degraded = np.array(image, dtype=np.float64, copy=True)
    degraded[top:top + h, left:left + w, ...] = fill_value
    return RestorationPair(image_id, degraded, fill_region(degraded, region, mode), tuple(region))


@dataclass
class RestorationReport:
    """``records`` compare restored (org) against degraded (mod): positive delta_q = restoration helped."""

    records: List[DeltaRecord]
    degraded_stats: List[Tuple[float, float]]
    restored_stats: List[Tuple[float, float]]

    @property
    def frac_increased(self) -> float:
        return float(np.mean([r.delta_q > 0 for r in self.records])) if self.records else 0.0

    @property
    def frac_decreased(self) -> float:
        return float(np.mean([r.delta_q < 0 for r in self.records])) if self.records else 0.0

    def outcome_fractions(self) -> Tuple[float, float, float]:
        """Fractions (increased, decreased, within std): changes within the degraded image's std count as neither."""
        inc = dec = 0
        for rec, (_, std) in zip(self.records, self.degraded_stats):
            if rec.delta_q > std:
                inc += 1
            elif rec.delta_q < -std:
                dec += 1
        n = max(len(self.records), 1)
        return inc / n, dec / n, (len(self.records) - inc - dec) / n

    @property
    def median_delta_q(self) -> float:
        return float(np.median([r.delta_q for r in self.records]))

    @property
    def median_degraded_std(self) -> float:
        return float(np.median([s for _, s in self.degraded_stats]))


def run_restoration_experiment(
    model: EmbeddingModel,
    pairs: Sequence[RestorationPair],
    fiq_config: FiqConfig = FiqConfig(),
    gamma: float = GAMMA_ARCFACE,
    mode: str = PAPER_LITERAL,
    clip_norm: Optional[float] = None,
    repeats: int = 10,
    jobs: int = 1,
) -> RestorationReport:
    """Quality before and after restoration for each pair, plus repeat statistics."""

    def one(pair):
        q_o, _, q_m, _, dq, dp = _measure(
            model, pair.restored, pair.degraded, pair.region, fiq_config, gamma, mode, clip_norm
        )
        top, left, h, _ = pair.region
        rec = DeltaRecord(pair.image_id, h, top, left, q_o.q_scaled, q_m.q_scaled, dq, dp, tuple(pair.region))
        return (
            rec,
            quality_stats(model, pair.degraded, fiq_config, repeats),
            quality_stats(model, pair.restored, fiq_config, repeats),
        )

    rows = _ordered_map(one, list(pairs), jobs)
    return RestorationReport([r[0] for r in rows], [r[1] for r in rows], [r[2] for r in rows])
