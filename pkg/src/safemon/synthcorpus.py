"""Deterministic synthetic speed-sign corpus: seven classes of disc glyphs.

Each 32x32 RGB image is a red-ringed white disc carrying a seven-segment
rendering of the class's speed value, over a noisy background, with seeded
jitter in position, rotation, and brightness. Procedural rasterization keeps
the corpus reproducible from a single seed with no bundled binary assets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imageio import LabeledDataset
from .rng import Xoshiro256, derive_index_seed

CLASS_NAMES = ("30", "50", "60", "70", "80", "100", "120")
DEFAULT_COUNTS = (72, 75, 45, 66, 63, 45, 45)

# seven-segment membership: A top, B top-right, C bottom-right, D bottom,
# E bottom-left, F top-left, G middle
_SEGMENTS = {
    "A": (0.08, 0.92, 0.00, 0.22),  # x0, x1, y0, y1 in cell coords
    "B": (0.72, 1.00, 0.05, 0.50),
    "C": (0.72, 1.00, 0.50, 0.95),
    "D": (0.08, 0.92, 0.78, 1.00),
    "E": (0.00, 0.28, 0.50, 0.95),
    "F": (0.00, 0.28, 0.05, 0.50),
    "G": (0.08, 0.92, 0.39, 0.61),
}
_DIGIT_SEGMENTS = {
    "0": "ABCDEF", "1": "BC", "2": "ABGED", "3": "ABGCD", "4": "FGBC",
    "5": "AFGCD", "6": "AFGEDC", "7": "ABC", "8": "ABCDEFG", "9": "ABCDFG",
}


@dataclass(frozen=True)
class SynthSpec:
    counts: tuple[int, ...] = DEFAULT_COUNTS
    seed: int = 0
    size: int = 32
    pos_jitter: float = 2.0
    rot_jitter_deg: float = 10.0
    bg_brightness: tuple[float, float] = (0.12, 0.68)

    def __post_init__(self):
        if len(self.counts) != len(CLASS_NAMES):
            raise ValueError(f"need {len(CLASS_NAMES)} class counts")
        if any(c < 1 for c in self.counts):
            raise ValueError("every class must have at least one sample")
        if self.size < 16:
            raise ValueError("size must be at least 16")
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    @property
    def k(self) -> int:
        return len(self.counts)


def _glyph_mask(xt: np.ndarray, yt: np.ndarray, text: str,
                cell_w: float, cell_h: float, gap: float) -> np.ndarray:
    """Membership of text-box coordinates in any lit segment of `text`."""
    mask = np.zeros(xt.shape, dtype=bool)
    for d, ch in enumerate(text):
        x0 = d * (cell_w + gap)
        u = (xt - x0) / cell_w
        v = yt / cell_h
        in_cell = (u >= 0.0) & (u <= 1.0) & (v >= 0.0) & (v <= 1.0)
        if not in_cell.any():
            continue
        for seg in _DIGIT_SEGMENTS[ch]:
            sx0, sx1, sy0, sy1 = _SEGMENTS[seg]
            mask |= in_cell & (u >= sx0) & (u <= sx1) & (v >= sy0) & (v <= sy1)
    return mask


def _render(spec: SynthSpec, class_index: int, rng: Xoshiro256) -> np.ndarray:
    size = spec.size
    half = (size - 1) / 2.0
    cx = half + rng.uniform(-spec.pos_jitter, spec.pos_jitter)
    cy = half + rng.uniform(-spec.pos_jitter, spec.pos_jitter)
    theta = math.radians(rng.uniform(-spec.rot_jitter_deg, spec.rot_jitter_deg))
    bg_t = rng.random()
    face = rng.uniform(0.70, 0.98)
    ring_gain = rng.uniform(0.65, 1.2)
    ink = rng.uniform(0.02, 0.30)
    noise = (rng.uniforms(size * size) - 0.5).reshape(size, size) * 0.06

    cols, rows = np.meshgrid(np.arange(size, dtype=np.float64),
                             np.arange(size, dtype=np.float64))
    dx, dy = cols - cx, rows - cy
    ur = math.cos(theta) * dx + math.sin(theta) * dy
    vr = -math.sin(theta) * dx + math.cos(theta) * dy
    r = np.hypot(ur, vr)

    r_outer = size * 0.45
    r_inner = r_outer - size * 0.07
    text = CLASS_NAMES[class_index]
    if len(text) == 2:
        cell_w, cell_h, gap = size * 0.24, size * 0.46, size * 0.06
    else:
        cell_w, cell_h, gap = size * 0.17, size * 0.44, size * 0.04
    box_w = len(text) * cell_w + (len(text) - 1) * gap
    glyph = _glyph_mask(ur + box_w / 2.0, vr + cell_h / 2.0, text, cell_w, cell_h, gap)

    lo, hi = spec.bg_brightness
    bg_base = lo + (hi - lo) * bg_t
    img = np.empty((size, size, 3), dtype=np.float64)
    img[..., 0] = bg_base * 0.95 + noise
    img[..., 1] = bg_base * 1.05 + noise
    img[..., 2] = bg_base * 0.85 + noise

    face_mask = r <= r_inner
    ring_mask = (r > r_inner) & (r <= r_outer)
    img[ring_mask] = np.array([0.72, 0.10, 0.12]) * ring_gain
    img[face_mask] = np.array([face, face, face * 0.97])
    img[glyph & face_mask] = np.array([ink, ink, ink * 1.2])
    return np.clip(img, 0.0, 1.0)


def generate_corpus(spec: SynthSpec) -> LabeledDataset:
    """Render the full corpus; class-major order, one derived seed per image
    so generation could be parallelized without changing the output."""
    total = sum(spec.counts)
    pixels = np.empty((total, spec.size, spec.size, 3), dtype=np.float64)
    labels = np.empty(total, dtype=np.int64)
    pos = 0
    for cls, count in enumerate(spec.counts):
        for _ in range(count):
            rng = Xoshiro256(derive_index_seed(spec.seed, pos))
            pixels[pos] = _render(spec, cls, rng)
            labels[pos] = cls
            pos += 1
    return LabeledDataset(pixels, labels, k=spec.k, class_names=list(CLASS_NAMES))
