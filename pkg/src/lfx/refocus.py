"""Shift-and-sum refocusing: focal slices and focal stacks from a light field.

Every view ``(u, v)`` is translated by ``slope * (u - u_c, v - v_c)`` pixels
(along x and y respectively) and the translated views are averaged. A
translation by ``t`` means ``out(x) = img(x - t)``; samples that fall outside
the frame contribute nothing, and each output pixel is divided by the total
interpolation weight it received rather than by the view count, so borders
are not darkened.

With that convention, a scene point whose image moves by ``delta`` pixels per
unit of angular offset comes into focus at ``slope = -delta``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptySlopes, ImageTooSmall, LfxError, NonPositiveInput, SlopeTooLarge, UnsortedSlopes
from .lightfield import LightField, load_lfr, save_lfr

MAX_SLICES = 12


@dataclass(frozen=True)
class FocalSlice:
    slope: float
    image: np.ndarray  # (H, W, C) float32


@dataclass(frozen=True)
class FocalStack:
    slices: tuple[FocalSlice, ...]
    source_dims: tuple[int, int, int]

    @property
    def slopes(self) -> list[float]:
        return [s.slope for s in self.slices]

    def images(self) -> np.ndarray:
        """Slices stacked as (S, H, W, C)."""
        return np.stack([s.image for s in self.slices])

    def __len__(self) -> int:
        return len(self.slices)


def _translate_int(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Integer translation with zero fill: out[y, x] = img[y - dy, x - dx]."""
    h, w = img.shape[:2]
    out = np.zeros_like(img)
    if abs(dy) >= h or abs(dx) >= w:
        return out
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = img[ys, xs]
    return out


def translate(img: np.ndarray, ty: float, tx: float) -> np.ndarray:
    """Bilinear translation with zero padding outside the frame."""
    fy, fx = math.floor(ty), math.floor(tx)
    ay, ax = ty - fy, tx - fx
    out = np.zeros_like(img)
    for oy, wy in ((fy, 1.0 - ay), (fy + 1, ay)):
        if wy == 0.0:
            continue
        for ox, wx in ((fx, 1.0 - ax), (fx + 1, ax)):
            if wx == 0.0:
                continue
            out += (wy * wx) * _translate_int(img, oy, ox)
    return out


def max_angular_offset(lf: LightField) -> float:
    c = lf.center
    return max(math.hypot(u - c.u, v - c.v) for v in (0, lf.angular_rows - 1)
               for u in (0, lf.angular_cols - 1))


def synthesize_slice(lf: LightField, slope: float) -> FocalSlice:
    slope = float(slope)
    if not math.isfinite(slope):
        raise LfxError("slope must be finite")
    if abs(slope) * max_angular_offset(lf) >= min(lf.height, lf.width):
        raise SlopeTooLarge(f"slope {slope} shifts views past the {lf.height}x{lf.width} frame")
    c = lf.center
    views = lf.data.astype(np.float64)
    acc = np.zeros(views.shape[2:], dtype=np.float64)
    weight = np.zeros(views.shape[2:4] + (1,), dtype=np.float64)
    ones = np.ones_like(weight)
    for v in range(lf.angular_rows):
        for u in range(lf.angular_cols):
            ty, tx = slope * (v - c.v), slope * (u - c.u)
            acc += translate(views[v, u], ty, tx)
            weight += translate(ones, ty, tx)
    # a pixel can only get zero weight when every view is shifted off it
    image = np.divide(acc, weight, out=np.zeros_like(acc), where=weight > 0)
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return FocalSlice(slope, image)


def build_stack(lf: LightField, slopes: Sequence[float]) -> FocalStack:
    slopes = [float(s) for s in slopes]
    if not slopes:
        raise EmptySlopes("focal stack needs at least one slope")
    if len(slopes) > MAX_SLICES:
        raise LfxError(f"at most {MAX_SLICES} focal slices, got {len(slopes)}")
    if any(b <= a for a, b in zip(slopes, slopes[1:])):
        raise UnsortedSlopes(f"slopes must be strictly increasing: {slopes}")
    slices = tuple(synthesize_slice(lf, s) for s in slopes)
    return FocalStack(slices, (lf.height, lf.width, lf.channels))


def slope_from_depth(d: float, z: float) -> float:
    """Angular-offset magnitude ``z / d`` at which depth ``d`` is in focus."""
    if not (d > 0 and z > 0):
        raise NonPositiveInput(f"depth and calibration distance must be positive, got d={d}, z={z}")
    return z / d


def laplacian(image: np.ndarray) -> np.ndarray:
    """5-point Laplacian over interior pixels, shape (H-2, W-2, C)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[0] < 3 or img.shape[1] < 3:
        raise ImageTooSmall(f"need at least 3x3 pixels, got {img.shape[:2]}")
    return (img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:]
            - 4.0 * img[1:-1, 1:-1])


def sharpness(image: np.ndarray) -> float:
    """Variance of the Laplacian, averaged over channels."""
    lap = laplacian(image)
    return float(lap.reshape(-1, lap.shape[-1]).var(axis=0).mean())


def sharpest_slope(lf: LightField, slopes: Sequence[float]) -> float:
    """Scan ``slopes`` and return the one whose slice has maximal sharpness (first on ties)."""
    scores = [sharpness(synthesize_slice(lf, s).image) for s in slopes]
    return float(slopes[int(np.argmax(scores))])


def save_stack(stack: FocalStack, directory) -> list[Path]:
    """Write one single-view LFR per slice plus a ``slopes.txt`` manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(stack.slices):
        path = directory / f"slice_{i:03d}.lfr"
        save_lfr(LightField(s.image[None, None]), path)
        paths.append(path)
    (directory / "slopes.txt").write_text("".join(f"{s.slope!r}\n" for s in stack.slices))
    return paths


def load_stack(directory) -> FocalStack:
    directory = Path(directory)
    slopes = [float(line) for line in (directory / "slopes.txt").read_text().split()]
    slices = []
    for i, slope in enumerate(slopes):
        lf = load_lfr(directory / f"slice_{i:03d}.lfr")
        slices.append(FocalSlice(slope, lf.data[0, 0].copy()))
    return FocalStack(tuple(slices), slices[0].image.shape if slices else (0, 0, 0))
