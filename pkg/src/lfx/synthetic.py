"""Procedural light fields for the toy view-disparity task and refocus checks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LfxError
from .lightfield import LightField
from .rng import generator

# class id = 1 + index into DISPARITIES; class 0 is the background at disparity 0
DISPARITIES = (-2, -1, 1, 2)
NUM_CLASSES = len(DISPARITIES) + 1


@dataclass(frozen=True)
class Rect:
    y0: int
    x0: int
    h: int
    w: int
    disparity: int
    label: int
    texture: np.ndarray  # (h, w, C)

    def contains(self, y: int, x: int, dy: int = 0, dx: int = 0) -> bool:
        return self.y0 + dy <= y < self.y0 + dy + self.h and self.x0 + dx <= x < self.x0 + dx + self.w


@dataclass(frozen=True)
class SyntheticScene:
    lightfield: LightField
    rects: tuple[Rect, ...]  # in drawing order, back to front
    center_labels: np.ndarray  # (H, W) class ids at the center view
    labels: np.ndarray  # (H/ps, W/ps) class ids sampled at patch centres
    patch_size: int

    @property
    def saliency(self) -> np.ndarray:
        return (self.labels > 0).astype(np.float64)


def noise_texture(rng: np.random.Generator, shape, low: float = 0.1, high: float = 0.9) -> np.ndarray:
    return rng.uniform(low, high, size=shape)


def _paste(canvas: np.ndarray, texture: np.ndarray, y0: int, x0: int) -> None:
    h, w = canvas.shape[:2]
    th, tw = texture.shape[:2]
    ys, ye = max(y0, 0), min(y0 + th, h)
    xs, xe = max(x0, 0), min(x0 + tw, w)
    if ys < ye and xs < xe:
        canvas[ys:ye, xs:xe] = texture[ys - y0:ye - y0, xs - x0:xe - x0]


def make_synthetic_task(seed: int, angular: int = 5, size: int = 32, channels: int = 1,
                        patch_size: int = 4) -> SyntheticScene:
    """2 to 4 noise-textured rectangles, each at its own disparity, over a static background.

    All textures share one distribution, so a rectangle's class is only
    recoverable from how far it moves between views. Rectangles with larger
    disparity are drawn later and occlude the others.
    """
    rng = generator(seed, "synthetic", "scene")
    count = int(rng.integers(2, 5))
    levels = sorted(rng.choice(len(DISPARITIES), size=count, replace=False).tolist(),
                    key=lambda i: DISPARITIES[i])
    rects = []
    for i in levels:
        h, w = (int(v) for v in rng.integers(size // 4, size // 2 + 1, size=2))
        y0 = int(rng.integers(0, size - h + 1))
        x0 = int(rng.integers(0, size - w + 1))
        rects.append(Rect(y0, x0, h, w, DISPARITIES[i], i + 1, noise_texture(rng, (h, w, channels))))
    background = noise_texture(rng, (size, size, channels))

    c = (angular - 1) // 2
    data = np.empty((angular, angular, size, size, channels), dtype=np.float64)
    for v in range(angular):
        for u in range(angular):
            canvas = background.copy()
            for r in rects:
                _paste(canvas, r.texture, r.y0 + r.disparity * (v - c), r.x0 + r.disparity * (u - c))
            data[v, u] = canvas

    center_labels = np.zeros((size, size), dtype=np.int64)
    for r in rects:
        center_labels[r.y0:r.y0 + r.h, r.x0:r.x0 + r.w] = r.label
    half = patch_size // 2
    labels = center_labels[half::patch_size, half::patch_size].copy()
    return SyntheticScene(LightField(data), tuple(rects), center_labels, labels, patch_size)


def textured_plane(disparity: float, seed: int = 0, angular: int = 5, size: int = 32, channels: int = 1,
                   margin: int = 16) -> LightField:
    """A single fronto-parallel noise plane; view (u, v) is the centre view moved by disparity * offset.

    The texture is larger than the frame, so every view is fully covered. The
    disparity must be an integer so views are exact crops.
    """
    d = int(disparity)
    if d != disparity:
        raise LfxError("textured_plane needs an integer disparity")
    rng = generator(seed, "synthetic", "plane")
    big = noise_texture(rng, (size + 2 * margin, size + 2 * margin, channels), 0.0, 1.0)
    c = (angular - 1) // 2
    data = np.empty((angular, angular, size, size, channels))
    for v in range(angular):
        for u in range(angular):
            # view(y, x) = centre(y - d*dv, x - d*du)
            ys = margin - d * (v - c)
            xs = margin - d * (u - c)
            data[v, u] = big[ys:ys + size, xs:xs + size]
    return LightField(data)
