"""Two-step angular adapter and its ablation variants.

Per view ``x`` of shape (B, N, C):

1. per-channel statistics over the N tokens: the maximum (projection
   difference) and the mean (adjacency divergence);
2. an angular query ``q = W_q [mean, max] + b_q`` of width 16, broadcast to
   every token position as the angular marker;
3. ``out = x + gamma * (W_u GELU(W_d [x, marker] + b_d) + b_u)``.

``Shared`` mode uses one parameter set for all K views. ``HardPerView`` gives
each view its own set. ``ConsistencyOnly`` and ``DifferenceOnly`` feed the
query with ``[mean, mean]`` or ``[max, max]`` so the parameter shapes match
``Shared`` exactly.

Weights are stored (out, in), so ``W @ v`` for a column vector ``v`` is
``linear(x, W)`` on row-major tokens.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import BadMagic, EmptyTokens, IoFailure, LfxError, ModeParamMismatch, ShapeMismatch, TruncatedFile
from .tensor import Tensor

HIDDEN = 16
CHECKPOINT_MAGIC = b"FOPA"


class AdapterMode(enum.Enum):
    SHARED = 0
    HARD_PER_VIEW = 1
    CONSISTENCY_ONLY = 2
    DIFFERENCE_ONLY = 3

    @classmethod
    def parse(cls, name: "str | AdapterMode") -> "AdapterMode":
        if isinstance(name, AdapterMode):
            return name
        key = name.strip().lower().replace("-", "_")
        aliases = {"shared": cls.SHARED, "aater": cls.SHARED, "hard": cls.HARD_PER_VIEW,
                   "hardperview": cls.HARD_PER_VIEW, "hard_per_view": cls.HARD_PER_VIEW,
                   "consistency": cls.CONSISTENCY_ONLY, "consistencyonly": cls.CONSISTENCY_ONLY,
                   "consistency_only": cls.CONSISTENCY_ONLY, "difference": cls.DIFFERENCE_ONLY,
                   "differenceonly": cls.DIFFERENCE_ONLY, "difference_only": cls.DIFFERENCE_ONLY}
        if key not in aliases:
            raise LfxError(f"unknown adapter mode {name!r}")
        return aliases[key]


class Representation(enum.Enum):
    SAI = "sai"
    FOCAL_STACK = "focal"

    @classmethod
    def parse(cls, name: "str | Representation") -> "Representation":
        if isinstance(name, Representation):
            return name
        key = name.strip().lower()
        for member in cls:
            if key in (member.value, member.name.lower()):
                return member
        if key in ("fs", "focalstack"):
            return cls.FOCAL_STACK
        raise LfxError(f"unknown representation {name!r}")


BLOCKS = ("w_q", "b_q", "w_d", "b_d", "w_u", "b_u")


@dataclass
class AdapterParams:
    w_q: Tensor  # (hidden, 2C)
    b_q: Tensor  # (hidden,)
    w_d: Tensor  # (hidden, C + hidden)
    b_d: Tensor  # (hidden,)
    w_u: Tensor  # (C, hidden)
    b_u: Tensor  # (C,)
    gamma: float = 1.0

    def __post_init__(self):
        c, hidden = self.channels, self.hidden
        expected = {"w_q": (hidden, 2 * c), "b_q": (hidden,), "w_d": (hidden, c + hidden),
                    "b_d": (hidden,), "w_u": (c, hidden), "b_u": (c,)}
        for name, shape in expected.items():
            got = getattr(self, name).shape
            if got != shape:
                raise ShapeMismatch(f"{name} has shape {got}, expected {shape} for C={c}")
        if not math.isfinite(self.gamma):
            raise LfxError("gamma must be finite")

    @property
    def channels(self) -> int:
        return self.b_u.shape[0]

    @property
    def hidden(self) -> int:
        return self.b_q.shape[0]

    def tensors(self) -> list[Tensor]:
        return [getattr(self, name) for name in BLOCKS]

    def num_scalars(self) -> int:
        return sum(t.size for t in self.tensors())

    def set_trainable(self, flag: bool) -> None:
        for t in self.tensors():
            t.requires_grad = flag


def init_params(channels: int, rng: np.random.Generator, hidden: int = HIDDEN, gamma: float = 1.0,
                prefix: str = "adapter") -> AdapterParams:
    """Uniform(+-1/sqrt(fan_in)) for the query and down projections; zero up-projection.

    With ``w_u`` and ``b_u`` at zero the adapter starts as the identity map.
    """
    if channels < 1:
        raise LfxError("channels must be >= 1")

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    arrays = {
        "w_q": uniform((hidden, 2 * channels), 2 * channels),
        "b_q": np.zeros(hidden),
        "w_d": uniform((hidden, channels + hidden), channels + hidden),
        "b_d": np.zeros(hidden),
        "w_u": np.zeros((channels, hidden)),
        "b_u": np.zeros(channels),
    }
    return AdapterParams(**{k: Tensor(v, requires_grad=True, name=f"{prefix}.{k}") for k, v in arrays.items()},
                         gamma=gamma)


def random_params(channels: int, rng: np.random.Generator, hidden: int = HIDDEN, gamma: float = 1.0,
                  prefix: str = "adapter") -> AdapterParams:
    """Every block, biases included, drawn from N(0, 1/fan_in) of its layer; a generic point for checks."""
    shapes = {"w_q": ((hidden, 2 * channels), 2 * channels), "b_q": ((hidden,), 2 * channels),
              "w_d": ((hidden, channels + hidden), channels + hidden), "b_d": ((hidden,), channels + hidden),
              "w_u": ((channels, hidden), hidden), "b_u": ((channels,), hidden)}
    return AdapterParams(**{k: Tensor(rng.normal(0.0, 1.0 / math.sqrt(fan), size=shape),
                                      requires_grad=True, name=f"{prefix}.{k}")
                            for k, (shape, fan) in shapes.items()}, gamma=gamma)


@dataclass(frozen=True)
class TokenSet:
    views: tuple[Tensor, ...]
    representation: Representation = Representation.SAI

    def __post_init__(self):
        if len(self.views) < 1:
            raise LfxError("a token set needs at least one view")
        shape = self.views[0].shape
        if len(shape) != 3:
            raise ShapeMismatch(f"view tokens must be (B, N, C), got {shape}")
        for v in self.views[1:]:
            if v.shape != shape:
                raise ShapeMismatch(f"views disagree on shape: {shape} vs {v.shape}")

    @property
    def K(self) -> int:
        return len(self.views)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.views[0].shape  # type: ignore[return-value]


def _check_tokens(x: Tensor) -> None:
    if x.ndim != 3:
        raise ShapeMismatch(f"tokens must be (B, N, C), got {x.shape}")
    if x.shape[1] == 0:
        raise EmptyTokens("no tokens to reduce over")


def projection_difference(x: Tensor) -> Tensor:
    """Per-channel maximum over token positions, (B, N, C) -> (B, C)."""
    _check_tokens(x)
    return T.reduce_max(x, axis=1)


def adjacency_divergence(x: Tensor) -> Tensor:
    """Per-channel mean over token positions, (B, N, C) -> (B, C)."""
    _check_tokens(x)
    return T.reduce_mean(x, axis=1)


def angular_query(x_mean: Tensor, x_max: Tensor, p: AdapterParams) -> Tensor:
    if x_mean.shape != x_max.shape or x_mean.ndim != 2 or x_mean.shape[1] != p.channels:
        raise ShapeMismatch(f"query inputs {x_mean.shape}/{x_max.shape} do not match C={p.channels}")
    return T.linear(T.concat_last(x_mean, x_max), p.w_q, p.b_q)


def angular_marker(query: Tensor, n: int) -> Tensor:
    return T.broadcast_rows(query, n)


def view_marker(x: Tensor, p: AdapterParams, mode: AdapterMode = AdapterMode.SHARED) -> Tensor:
    """Angular marker (B, N, hidden) of one view under ``mode``."""
    if mode is AdapterMode.CONSISTENCY_ONLY:
        mean = adjacency_divergence(x)
        query = angular_query(mean, mean, p)
    elif mode is AdapterMode.DIFFERENCE_ONLY:
        peak = projection_difference(x)
        query = angular_query(peak, peak, p)
    else:
        query = angular_query(adjacency_divergence(x), projection_difference(x), p)
    return angular_marker(query, x.shape[1])


def adapt_view(x: Tensor, p: AdapterParams, mode: AdapterMode = AdapterMode.SHARED) -> Tensor:
    _check_tokens(x)
    if x.shape[2] != p.channels:
        raise ShapeMismatch(f"tokens have C={x.shape[2]}, adapter expects C={p.channels}")
    marker = view_marker(x, p, mode)
    down = T.gelu(T.linear(T.concat_last(x, marker), p.w_d, p.b_d))
    up = T.linear(down, p.w_u, p.b_u)
    return T.add(x, T.scale(up, p.gamma))


def apply_adapter(tokens: TokenSet | Sequence[Tensor], mode, params) -> TokenSet:
    """Run the adapter on every view of ``tokens``.

    ``params`` is a single :class:`AdapterParams` for the shared-weight modes,
    or a sequence with one entry per view for ``HARD_PER_VIEW``.
    """
    mode = AdapterMode.parse(mode)
    if not isinstance(tokens, TokenSet):
        tokens = TokenSet(tuple(tokens))
    per_view = _params_per_view(mode, params, tokens.K)
    out = tuple(adapt_view(x, p, mode) for x, p in zip(tokens.views, per_view))
    return TokenSet(out, tokens.representation)


def _params_per_view(mode: AdapterMode, params, k: int) -> list[AdapterParams]:
    if mode is AdapterMode.HARD_PER_VIEW:
        if isinstance(params, AdapterParams) or len(params) != k:
            got = 1 if isinstance(params, AdapterParams) else len(params)
            raise ModeParamMismatch(f"hard per-view mode needs {k} parameter sets, got {got}")
        return list(params)
    if not isinstance(params, AdapterParams):
        if len(params) != 1:
            raise ModeParamMismatch(f"{mode.name} shares one parameter set, got {len(params)}")
        params = params[0]
    return [params] * k


def params_per_set(channels: int, hidden: int = HIDDEN) -> int:
    """Trainable scalars in one adapter: query, down and up projections with biases."""
    return (hidden * 2 * channels + hidden) + (hidden * (channels + hidden) + hidden) + (channels * hidden + channels)


def count_params(mode, K: int, C: int, hidden: int = HIDDEN) -> int:
    mode = AdapterMode.parse(mode)
    if C < 1:
        raise LfxError("C must be >= 1")
    per = params_per_set(C, hidden)
    return K * per if mode is AdapterMode.HARD_PER_VIEW else per


# ---------------------------------------------------------------------------
# checkpoint: b"FOPA", u32 C, u32 mode id, then the six blocks as <f8,
# repeated once per view set for HARD_PER_VIEW

def save_checkpoint(path, mode, params) -> None:
    mode = AdapterMode.parse(mode)
    sets = list(params) if not isinstance(params, AdapterParams) else [params]
    if mode is not AdapterMode.HARD_PER_VIEW and len(sets) != 1:
        raise ModeParamMismatch(f"{mode.name} checkpoints hold one parameter set")
    c = sets[0].channels
    for p in sets:
        if p.channels != c or p.hidden != HIDDEN:
            raise ShapeMismatch("checkpoint sets must share C and use hidden width 16")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", c, mode.value)]
    for p in sets:
        chunks.extend(np.ascontiguousarray(t.data, dtype="<f8").tobytes() for t in p.tensors())
    try:
        Path(path).write_bytes(b"".join(chunks))
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_checkpoint(path, gamma: float = 1.0) -> tuple[AdapterMode, list[AdapterParams]]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if raw[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, got {raw[:4]!r}")
    if len(raw) < 12:
        raise TruncatedFile("checkpoint header is incomplete")
    c, mode_id = struct.unpack_from("<II", raw, 4)
    try:
        mode = AdapterMode(mode_id)
    except ValueError:
        raise LfxError(f"unknown mode id {mode_id}") from None
    per = params_per_set(c) * 8
    body = len(raw) - 12
    if c == 0 or body == 0 or body % per:
        raise TruncatedFile(f"payload of {body} bytes is not a whole number of C={c} parameter sets")
    shapes = [(HIDDEN, 2 * c), (HIDDEN,), (HIDDEN, c + HIDDEN), (HIDDEN,), (c, HIDDEN), (c,)]
    values = np.frombuffer(raw, dtype="<f8", offset=12).astype(np.float64)
    sets, offset = [], 0
    for _ in range(body // per):
        blocks = {}
        for name, shape in zip(BLOCKS, shapes):
            n = math.prod(shape)
            blocks[name] = Tensor(values[offset:offset + n].reshape(shape), requires_grad=True, name=name)
            offset += n
        sets.append(AdapterParams(**blocks, gamma=gamma))
    if mode is not AdapterMode.HARD_PER_VIEW and len(sets) != 1:
        raise ModeParamMismatch(f"{mode.name} checkpoint holds {len(sets)} parameter sets")
    return mode, sets
