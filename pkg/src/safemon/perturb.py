"""Intensity-parameterized image degradations: haze overlay and Gaussian blur.

Each transform takes an intensity epsilon in [0, 1]; epsilon = 0 is the
identity and epsilon = 1 the strongest configured effect. Haze blends every
pixel toward a fill color: out = (1 - eps) * x + eps * color. Blur convolves
with a discretized Gaussian whose standard deviation scales linearly with
epsilon (sigma = sigma_max * eps), clamp-to-edge at the borders.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imageio import Image

DEFAULT_HAZE_COLOR = (0.8, 0.8, 0.8)
DEFAULT_SIGMA_MAX = 3.0


def _check_eps(eps: float) -> float:
    if not 0.0 <= eps <= 1.0:
        raise ValueError(f"intensity must lie in [0, 1], got {eps}")
    return float(eps)


def haze_array(arr: np.ndarray, eps: float, color=DEFAULT_HAZE_COLOR) -> np.ndarray:
    """Blend toward `color`; works on any (..., channels) float array."""
    eps = _check_eps(eps)
    if eps == 0.0:
        return arr.copy()
    c = np.asarray(color, dtype=np.float64)
    out = (1.0 - eps) * arr + eps * c
    np.clip(out, 0.0, 1.0, out=out)  # shed float dust only
    return out


def apply_haze(image: Image, eps: float, haze_color=DEFAULT_HAZE_COLOR) -> Image:
    return Image.from_array(haze_array(image.as_array(), eps, haze_color))


def gaussian_taps(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian weights with radius ceil(3*sigma)."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return np.array([1.0])
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(xs * xs) / (2.0 * sigma * sigma))
    return w / w.sum()


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Square 2-D Gaussian kernel, weights summing to 1. sigma=0 gives [[1]]."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0.0:
        return np.array([[1.0]])
    radius = math.ceil(3.0 * sigma)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    w = np.exp(-(xs[:, None] ** 2 + xs[None, :] ** 2) / (2.0 * sigma * sigma))
    return w / w.sum()


def blur_array(arr: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur of (..., h, w, c) with clamp-to-edge borders.

    Separable passes (rows then columns); with edge replication this equals
    the full 2-D product-kernel convolution exactly.
    """
    if sigma == 0.0:
        return arr.copy()
    taps = gaussian_taps(sigma)
    r = (len(taps) - 1) // 2
    h_axis = arr.ndim - 3
    w_axis = arr.ndim - 2

    def pass_along(x: np.ndarray, axis: int) -> np.ndarray:
        pad = [(0, 0)] * x.ndim
        pad[axis] = (r, r)
        xp = np.pad(x, pad, mode="edge")
        out = np.zeros_like(x)
        n = x.shape[axis]
        sl = [slice(None)] * x.ndim
        for t, wt in enumerate(taps):
            sl[axis] = slice(t, t + n)
            out += wt * xp[tuple(sl)]
        return out

    out = pass_along(pass_along(arr, h_axis), w_axis)
    np.clip(out, 0.0, 1.0, out=out)
    return out


def apply_blur(image: Image, eps: float, sigma_max: float = DEFAULT_SIGMA_MAX) -> Image:
    eps = _check_eps(eps)
    if sigma_max <= 0:
        raise ValueError("sigma_max must be positive")
    return Image.from_array(blur_array(image.as_array(), sigma_max * eps))


@dataclass(frozen=True)
class PerturbationKind:
    """A named transform plus its fixed parameters (epsilon stays free)."""

    name: str
    haze_color: tuple[float, float, float] = DEFAULT_HAZE_COLOR
    sigma_max: float = DEFAULT_SIGMA_MAX

    def __post_init__(self):
        if self.name not in ("haze", "blur"):
            raise ValueError(f"unknown perturbation kind {self.name!r}")
        if self.name == "haze":
            if len(self.haze_color) != 3 or not all(0.0 <= c <= 1.0 for c in self.haze_color):
                raise ValueError("haze_color components must lie in [0, 1]")
        if self.name == "blur" and self.sigma_max <= 0:
            raise ValueError("sigma_max must be positive")

    def apply_batch(self, arr: np.ndarray, eps: float) -> np.ndarray:
        if self.name == "haze":
            return haze_array(arr, eps, self.haze_color)
        return blur_array(arr, self.sigma_max * _check_eps(eps))

    def params(self) -> dict:
        if self.name == "haze":
            return {"haze_color": list(self.haze_color)}
        return {"sigma_max": self.sigma_max}


def kind_from_config(cfg: dict) -> PerturbationKind:
    name = cfg["name"]
    if name == "haze":
        return PerturbationKind(name, haze_color=tuple(cfg.get("haze_color", DEFAULT_HAZE_COLOR)))
    return PerturbationKind(name, sigma_max=float(cfg.get("sigma_max", DEFAULT_SIGMA_MAX)))


@dataclass(frozen=True)
class EpsilonGrid:
    """Strictly increasing intensity levels in [0, 1] for one factor."""

    factor_name: str
    levels: tuple[float, ...]

    def __post_init__(self):
        if not self.levels:
            raise ValueError("epsilon grid must be non-empty")
        if any(not 0.0 <= e <= 1.0 for e in self.levels):
            raise ValueError("epsilon levels must lie in [0, 1]")
        if any(b <= a for a, b in zip(self.levels, self.levels[1:])):
            raise ValueError("epsilon levels must be strictly increasing")
        object.__setattr__(self, "levels", tuple(float(e) for e in self.levels))


def scaled_levels(scale: float, base=(0.0, 0.2, 0.5, 0.8, 1.0)) -> tuple[float, ...]:
    return tuple(scale * b for b in base)


def stack_array(arr: np.ndarray, assignment) -> np.ndarray:
    """Apply (kind, eps) pairs left to right to a batch array."""
    out = arr
    for kind, eps in assignment:
        out = kind.apply_batch(out, eps)
    return out if assignment else arr.copy()


def apply_stack(image: Image, assignment) -> Image:
    """Apply an ordered list of (PerturbationKind, eps) to one image."""
    return Image.from_array(stack_array(image.as_array(), list(assignment)))
