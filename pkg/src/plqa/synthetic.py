"""Procedural cartoon faces used as a stand-in identity corpus.

An identity is a seed that fixes head shape, skin/hair/eye colours and the
positions of eyes, brows, nose and mouth. A sample of an identity re-renders
the same layout with small per-sample jitter: sub-pixel shift, brightness,
background colour and pixel noise.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Tuple

import numpy as np

from .seeding import derive_seed, stream

Box = Tuple[int, int, int, int]  # top, left, height, width


@dataclass(frozen=True)
class SyntheticFaceSpec:
    identity_seed: int
    canvas: Tuple[int, int, int] = (32, 32, 3)
    jitter: float = 1.0

    def _identity(self) -> dict:
        rng = stream(self.identity_seed, "identity")
        u = rng.uniform
        return {
            "head": (0.53 + u(-0.03, 0.03), 0.5 + u(-0.03, 0.03), u(0.36, 0.44), u(0.27, 0.35)),
            "skin": np.array([u(0.55, 0.95), u(0.38, 0.75), u(0.28, 0.62)]),
            "hair": np.array([u(0.25, 0.7), u(0.2, 0.55), u(0.15, 0.4)]),
            "hairline": u(0.2, 0.33),
            "eye_y": u(0.4, 0.48),
            "eye_dx": u(0.12, 0.19),
            "eye_r": (u(0.035, 0.055), u(0.055, 0.085)),
            "iris": np.array([u(0.2, 0.55), u(0.2, 0.55), u(0.2, 0.65)]),
            "brow_gap": u(0.05, 0.09),
            "brow_h": u(0.02, 0.045),
            "nose": (u(0.55, 0.62), u(0.03, 0.06), u(0.07, 0.12)),
            "mouth": (u(0.68, 0.77), u(0.1, 0.22), u(0.025, 0.06)),
            "lips": np.array([u(0.55, 0.9), u(0.2, 0.4), u(0.2, 0.4)]),
        }

    def _geometry(self, sample_seed: int) -> Tuple[dict, dict]:
        ident = self._identity()
        rng = stream(self.identity_seed, "sample", sample_seed)
        h, w, _ = self.canvas
        j = self.jitter
        jit = {
            "shift": rng.uniform(-1.5, 1.5, size=2) * j / np.array([h, w]),
            "gain": 1.0 + rng.uniform(-0.1, 0.1) * j,
            "bg": 0.5 + rng.uniform(-0.25, 0.25, size=3) * j,
            "noise_seed": int(rng.integers(2**63)),
        }
        return ident, jit

    def render(self, sample_seed: int = 0) -> np.ndarray:
        ident, jit = self._geometry(sample_seed)
        h, w, c = self.canvas
        ys = (np.arange(h) + 0.5)[:, None] / h - jit["shift"][0]
        xs = (np.arange(w) + 0.5)[None, :] / w - jit["shift"][1]
        px = min(h, w)
        img = np.broadcast_to(jit["bg"][:c], (h, w, c)).copy()

        def paint(alpha, color):
            a = alpha[..., None]
            img[:] = img * (1 - a) + a * color[:c]

        def ellipse(cy, cx, ry, rx):
            r = np.sqrt(((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2)
            return np.clip(0.5 + (1.0 - r) * min(ry, rx) * px, 0.0, 1.0)

        def rect(top, left, height, width):
            a_y = np.clip(np.minimum(ys - top, top + height - ys) * px + 0.5, 0.0, 1.0)
            a_x = np.clip(np.minimum(xs - left, left + width - xs) * px + 0.5, 0.0, 1.0)
            return a_y * a_x

        hy, hx, hry, hrx = ident["head"]
        head = ellipse(hy, hx, hry, hrx)
        paint(head, ident["skin"])
        paint(head * np.clip((ident["hairline"] - ys) * px + 0.5, 0.0, 1.0), ident["hair"])
        ery, erx = ident["eye_r"]
        for side in (-1, 1):
            ex = hx + side * ident["eye_dx"]
            paint(ellipse(ident["eye_y"], ex, ery, erx), np.array([0.95, 0.95, 0.92]))
            paint(ellipse(ident["eye_y"], ex, ery * 0.8, ery * 0.8), ident["iris"])
            by = ident["eye_y"] - ery - ident["brow_gap"]
            paint(rect(by, ex - erx, ident["brow_h"], 2 * erx), ident["hair"])
        ny, nw, nh = ident["nose"]
        paint(rect(ny - nh / 2, hx - nw / 2, nh, nw), ident["skin"] * 0.75)
        my, mw, mh = ident["mouth"]
        paint(rect(my - mh / 2, hx - mw / 2, mh, mw), ident["lips"])

        img *= jit["gain"]
        noise = np.random.default_rng(jit["noise_seed"]).normal(0.0, 0.02 * self.jitter, size=img.shape)
        return np.clip(img + noise, 0.0, 1.0)

    def regions(self, sample_seed: int = 0) -> Dict[str, Box]:
        """Pixel boxes (top, left, height, width) of the facial primitives in one sample."""
        ident, jit = self._geometry(sample_seed)
        h, w, _ = self.canvas
        sy, sx = jit["shift"]

        def box(cy, cx, half_h, half_w):
            top = int(np.floor((cy + sy - half_h) * h))
            left = int(np.floor((cx + sx - half_w) * w))
            bottom = int(np.ceil((cy + sy + half_h) * h))
            right = int(np.ceil((cx + sx + half_w) * w))
            top, left = max(top, 0), max(left, 0)
            return top, left, min(bottom, h) - top, min(right, w) - left

        hy, hx, hry, hrx = ident["head"]
        ery, erx = ident["eye_r"]
        my, mw, mh = ident["mouth"]
        return {
            "left_eye": box(ident["eye_y"], hx - ident["eye_dx"], ery, erx),
            "right_eye": box(ident["eye_y"], hx + ident["eye_dx"], ery, erx),
            "mouth": box(my, hx, mh / 2, mw / 2),
            "face": box(hy + 0.05, hx, hry * 0.6, hrx * 0.7),
        }


def face_box(canvas=(32, 32, 3)) -> Box:
    """Central face region shared by every synthetic identity on ``canvas``."""
    h, w = canvas[0], canvas[1]
    return int(round(0.3 * h)), int(round(0.3 * w)), int(round(0.5 * h)), int(round(0.4 * w))


def make_dataset(
    n_identities: int, samples_per_identity: int, seed: int = 0, canvas=(32, 32, 3), jitter: float = 1.0
) -> List[Tuple[np.ndarray, int, str]]:
    """Render ``n_identities * samples_per_identity`` images as ``(image, label, image_id)``."""
    out = []
    for i in range(n_identities):
        spec = identity_spec(seed, i, canvas, jitter)
        for j in range(samples_per_identity):
            out.append((spec.render(j), i, f"id{i:03d}_s{j:02d}"))
    return out


def identity_spec(seed: int, index: int, canvas=(32, 32, 3), jitter: float = 1.0) -> SyntheticFaceSpec:
    return SyntheticFaceSpec(derive_seed(seed, "identity", index), tuple(canvas), jitter)
