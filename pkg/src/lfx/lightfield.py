"""4D light-field container, the LFR binary format and sub-aperture view selection.

Samples are stored as float32 in ``(v, u, y, x, c)`` order, where ``v`` indexes
angular rows and ``u`` angular columns. A light field is immutable once built.

LFR layout (little-endian)::

    bytes 0..3    b"LFR1"
    bytes 4..23   five u32: A_v, A_u, H, W, C
    bytes 24..    A_v*A_u*H*W*C float32 samples, (v, u, y, x, c) row-major
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BadMagic, DimensionOverflow, IoFailure, KTooLarge, LfxError, OutOfRange, TruncatedFile

MAGIC = b"LFR1"
HEADER = struct.Struct("<4s5I")
HEADER_SIZE = HEADER.size  # 24


class LightField:
    """Views ``L(u, v, x, y)`` of a scene sampled on a regular angular grid."""

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float32, copy=True)
        if arr.ndim == 4:
            arr = arr[..., None]
        if arr.ndim != 5:
            raise LfxError(f"light field needs 5 axes (v, u, y, x, c), got shape {arr.shape}")
        if 0 in arr.shape:
            raise DimensionOverflow(f"zero-sized dimension in {arr.shape}")
        if not np.isfinite(arr).all():
            raise LfxError("light field samples must be finite")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise LfxError("light field samples must lie in [0, 1]")
        arr.flags.writeable = False
        self._data = arr

    @classmethod
    def from_uint8(cls, data) -> "LightField":
        arr = np.asarray(data)
        if arr.dtype != np.uint8:
            raise LfxError(f"expected uint8 samples, got {arr.dtype}")
        return cls(arr.astype(np.float32) / np.float32(255.0))

    @classmethod
    def constant(cls, value: float, angular_rows: int, angular_cols: int, height: int, width: int,
                 channels: int = 1) -> "LightField":
        return cls(np.full((angular_rows, angular_cols, height, width, channels), value, dtype=np.float32))

    @property
    def data(self) -> np.ndarray:
        """Read-only float32 array of shape (A_v, A_u, H, W, C)."""
        return self._data

    @property
    def angular_rows(self) -> int:
        return self._data.shape[0]

    @property
    def angular_cols(self) -> int:
        return self._data.shape[1]

    @property
    def height(self) -> int:
        return self._data.shape[2]

    @property
    def width(self) -> int:
        return self._data.shape[3]

    @property
    def channels(self) -> int:
        return self._data.shape[4]

    @property
    def shape(self) -> tuple[int, int, int, int, int]:
        return self._data.shape  # type: ignore[return-value]

    @property
    def center(self) -> "ViewCoord":
        return ViewCoord((self.angular_cols - 1) // 2, (self.angular_rows - 1) // 2)

    def coords(self) -> list["ViewCoord"]:
        """All view coordinates in row-major (v, then u) order."""
        return [ViewCoord(u, v) for v in range(self.angular_rows) for u in range(self.angular_cols)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, LightField):
            return NotImplemented
        return self.shape == other.shape and self._data.tobytes() == other._data.tobytes()

    def __repr__(self) -> str:
        return "LightField(A_v={}, A_u={}, H={}, W={}, C={})".format(*self.shape)


@dataclass(frozen=True, order=True)
class ViewCoord:
    u: int
    v: int

    def __str__(self) -> str:
        return f"{self.u},{self.v}"


class Strategy(enum.Enum):
    CORNERS_PLUS_CENTER = "corners"
    SPARSE_MAX_DIVERGENCE = "sparse"
    MIN_ANGULAR_DIFFERENCE = "nearest"
    FIXED_FIVE = "fixed5"
    EXPLICIT = "explicit"

    @classmethod
    def parse(cls, name: "str | Strategy") -> "Strategy":
        if isinstance(name, Strategy):
            return name
        key = name.strip().lower()
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        aliases = {"one": cls.CORNERS_PLUS_CENTER, "two": cls.SPARSE_MAX_DIVERGENCE,
                   "three": cls.MIN_ANGULAR_DIFFERENCE, "four": cls.FIXED_FIVE}
        if key in aliases:
            return aliases[key]
        raise LfxError(f"unknown view-selection strategy {name!r}")


@dataclass(frozen=True)
class ViewSelection:
    strategy: Strategy
    coords: tuple[ViewCoord, ...]

    def __post_init__(self):
        if len(self.coords) < 1:
            raise LfxError("a view selection needs at least one view")
        if len(set(self.coords)) != len(self.coords):
            raise LfxError(f"duplicate views in selection {self.coords}")

    @property
    def K(self) -> int:
        return len(self.coords)

    def __str__(self) -> str:
        return " ".join(str(c) for c in self.coords)


# ---------------------------------------------------------------------------
# file format

def save_lfr(lf: LightField, path) -> None:
    header = HEADER.pack(MAGIC, *lf.shape)
    payload = np.ascontiguousarray(lf.data, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_lfr(path) -> LightField:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_lfr(raw)


def decode_lfr(raw: bytes) -> LightField:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {bytes(raw[:4])!r}")
    if len(raw) < HEADER_SIZE:
        raise TruncatedFile(f"header needs {HEADER_SIZE} bytes, file has {len(raw)}")
    _, *dims = HEADER.unpack_from(raw)
    if 0 in dims:
        raise DimensionOverflow(f"zero dimension in header {dims}")
    count = math.prod(dims)
    if count * 4 >= 2**63:
        raise DimensionOverflow(f"payload of {count} samples overflows")
    expected = HEADER_SIZE + 4 * count
    if len(raw) < expected:
        raise TruncatedFile(f"expected {expected} bytes, file has {len(raw)}")
    if len(raw) > expected:
        raise LfxError(f"{len(raw) - expected} trailing bytes after payload")
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=HEADER_SIZE).reshape(dims)
    return LightField(data.astype(np.float32))


# ---------------------------------------------------------------------------
# views

def _check_coord(lf: LightField, c: ViewCoord) -> None:
    if not (0 <= c.u < lf.angular_cols and 0 <= c.v < lf.angular_rows):
        raise OutOfRange(f"view {c} outside angular grid {lf.angular_cols}x{lf.angular_rows} (u x v)")


def extract_view(lf: LightField, c: ViewCoord) -> np.ndarray:
    """Copy of the sub-aperture image at ``c`` as an (H, W, C) float32 array."""
    _check_coord(lf, c)
    return lf.data[c.v, c.u].copy()


def extract_views(lf: LightField, coords: Iterable[ViewCoord]) -> np.ndarray:
    return np.stack([extract_view(lf, c) for c in coords])


def _dedupe(coords: Iterable[ViewCoord]) -> tuple[ViewCoord, ...]:
    seen: dict[ViewCoord, None] = {}
    for c in coords:
        seen.setdefault(c, None)
    return tuple(seen)


def _distance2(a: ViewCoord, b: ViewCoord) -> int:
    return (a.u - b.u) ** 2 + (a.v - b.v) ** 2


def select_views(lf: LightField, strategy, K: int = 5,
                 coords: Sequence[ViewCoord] | None = None) -> ViewSelection:
    """Pick K sub-aperture views by one of the selection strategies.

    ``corners`` and ``fixed5`` ignore ``K`` (3 and 5 views, fewer on tiny
    grids where the positions coincide). Ties are broken in row-major order.
    """
    strategy = Strategy.parse(strategy)
    total = lf.angular_rows * lf.angular_cols
    if K < 1:
        raise LfxError("K must be at least 1")
    if K > total:
        raise KTooLarge(f"K={K} exceeds the {total} available views")
    center = lf.center
    last_u, last_v = lf.angular_cols - 1, lf.angular_rows - 1

    if strategy is Strategy.CORNERS_PLUS_CENTER:
        chosen = _dedupe([ViewCoord(0, 0), ViewCoord(last_u, last_v), center])
    elif strategy is Strategy.FIXED_FIVE:
        chosen = _dedupe([center, ViewCoord(center.u, 0), ViewCoord(0, center.v),
                          ViewCoord(last_u, center.v), ViewCoord(center.u, last_v)])
    elif strategy is Strategy.MIN_ANGULAR_DIFFERENCE:
        # coords() is row-major and sorted() is stable, so ties keep that order
        chosen = tuple(sorted(lf.coords(), key=lambda c: _distance2(c, center))[:K])
    elif strategy is Strategy.SPARSE_MAX_DIVERGENCE:
        chosen = _farthest_point(lf.coords(), center, K)
    else:
        if coords is None:
            raise LfxError("explicit selection needs a coordinate list")
        for c in coords:
            _check_coord(lf, c)
        chosen = tuple(coords)
        if len(chosen) > total:
            raise KTooLarge(f"{len(chosen)} views requested, {total} available")
    return ViewSelection(strategy, chosen)


def _farthest_point(candidates: list[ViewCoord], start: ViewCoord, K: int) -> tuple[ViewCoord, ...]:
    chosen = [start]
    nearest = {c: _distance2(c, start) for c in candidates if c != start}
    while len(chosen) < K:
        # max() returns the first maximal item; candidates are in row-major order
        best = max(nearest, key=nearest.__getitem__)
        chosen.append(best)
        del nearest[best]
        for c in nearest:
            nearest[c] = min(nearest[c], _distance2(c, best))
    return tuple(chosen)


def parse_coords(text: str) -> list[ViewCoord]:
    """Parse ``"u,v u,v ..."`` into view coordinates."""
    out = []
    for token in text.replace(";", " ").split():
        u, v = token.split(",")
        out.append(ViewCoord(int(u), int(v)))
    return out
