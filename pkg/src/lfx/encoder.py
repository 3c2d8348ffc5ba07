"""LFX-lite: a staged multi-view encoder with angular adapters and a linear head.

Each of the K input images (sub-aperture views or focal slices) goes through
the same frozen backbone:

    patch embedding -> for each stage s:
        mixing block  x + GELU(W_s x + b_s)          (frozen, shared by all views)
        angular adapter, if placed at stage s         (trainable)
        2x2 patch merge + linear to the next width    (frozen, all but last stage)

The post-adapter tokens of every stage are summed over the K views, upsampled
(nearest) to the stage-1 token grid, concatenated along channels and fed to a
linear head. Stage 1 is summed across views as well.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapter import AdapterMode, AdapterParams, Representation, TokenSet, apply_adapter, init_params, random_params
from .errors import IndivisibleDims, LfxError, ShapeMismatch
from .lightfield import LightField, ViewSelection, extract_views
from .refocus import FocalStack
from .rng import generator
from .tensor import Tensor

SEGMENTATION = "segmentation"
SALIENCY = "saliency"


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 4
    stage_channels: tuple[int, ...] = (8, 8, 16, 16)
    adapter_placement: tuple[bool, ...] = (True, True, True, True)
    K: int = 5
    representation: Representation = Representation.SAI
    num_classes: int = 5
    seed: int = 0
    in_channels: int = 1
    head: str = SEGMENTATION
    adapter_mode: AdapterMode = AdapterMode.SHARED
    hidden: int = 16
    gamma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "adapter_placement", tuple(bool(p) for p in self.adapter_placement))
        object.__setattr__(self, "representation", Representation.parse(self.representation))
        object.__setattr__(self, "adapter_mode", AdapterMode.parse(self.adapter_mode))
        if not 1 <= len(self.stage_channels) <= 4:
            raise LfxError("between one and four stages are supported")
        if len(self.adapter_placement) != len(self.stage_channels):
            raise LfxError("adapter_placement needs one flag per stage")
        if any(c < 1 for c in self.stage_channels):
            raise LfxError("stage channels must be positive")
        if any(b < a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise LfxError(f"stage channels must be nondecreasing: {self.stage_channels}")
        if self.K < 1 or self.patch_size < 1 or self.in_channels < 1:
            raise LfxError("K, patch_size and in_channels must be positive")
        if self.head not in (SEGMENTATION, SALIENCY):
            raise LfxError(f"unknown head {self.head!r}")
        if self.head == SEGMENTATION and self.num_classes < 2:
            raise LfxError("segmentation needs at least two classes")

    @property
    def num_stages(self) -> int:
        return len(self.stage_channels)

    @property
    def head_outputs(self) -> int:
        return self.num_classes if self.head == SEGMENTATION else 1

    @property
    def uses_adapter(self) -> bool:
        return any(self.adapter_placement)

    def without_adapter(self) -> "EncoderConfig":
        return replace(self, adapter_placement=(False,) * self.num_stages)


@dataclass
class EncoderParams:
    backbone: dict[str, Tensor]
    adapters: list  # per stage: None, AdapterParams, or list[AdapterParams] for HARD_PER_VIEW
    head_w: Tensor
    head_b: Tensor

    def adapter_tensors(self) -> list[Tensor]:
        out: list[Tensor] = []
        for entry in self.adapters:
            if entry is None:
                continue
            for p in ([entry] if isinstance(entry, AdapterParams) else entry):
                out.extend(p.tensors())
        return out

    def trainable(self) -> list[Tensor]:
        return self.adapter_tensors() + [self.head_w, self.head_b]

    def backbone_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.backbone):
            h.update(name.encode())
            h.update(self.backbone[name].data.tobytes())
        return h.hexdigest()


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_encoder(config: EncoderConfig, adapter_init: str = "identity") -> EncoderParams:
    """Build frozen backbone, adapters and head from ``config.seed``.

    ``adapter_init="identity"`` zeroes the up-projection (the training start);
    ``"random"`` draws every adapter block, which suits gradient checks.
    """
    rng = generator(config.seed, "encoder", "backbone")
    chans = config.stage_channels
    patch_dim = config.patch_size ** 2 * config.in_channels
    backbone = {
        "embed.w": _uniform(rng, (chans[0], patch_dim), patch_dim),
        "embed.b": _uniform(rng, (chans[0],), patch_dim),
    }
    for s, c in enumerate(chans):
        backbone[f"mix{s}.w"] = _uniform(rng, (c, c), c)
        backbone[f"mix{s}.b"] = _uniform(rng, (c,), c)
        if s + 1 < len(chans):
            backbone[f"down{s}.w"] = _uniform(rng, (chans[s + 1], 4 * c), 4 * c)
            backbone[f"down{s}.b"] = _uniform(rng, (chans[s + 1],), 4 * c)
    frozen = {k: Tensor(v, requires_grad=False, name=f"backbone.{k}") for k, v in backbone.items()}

    make = {"identity": init_params, "random": random_params}[adapter_init]
    adapters: list = []
    for s, (c, placed) in enumerate(zip(chans, config.adapter_placement)):
        if not placed:
            adapters.append(None)
            continue
        arng = generator(config.seed, "encoder", "adapter", s)
        if config.adapter_mode is AdapterMode.HARD_PER_VIEW:
            adapters.append([make(c, arng, config.hidden, config.gamma, prefix=f"adapter{s}.view{k}")
                             for k in range(config.K)])
        else:
            adapters.append(make(c, arng, config.hidden, config.gamma, prefix=f"adapter{s}"))

    hrng = generator(config.seed, "encoder", "head")
    fan_in = sum(chans)
    head_w = Tensor(_uniform(hrng, (config.head_outputs, fan_in), fan_in), requires_grad=True, name="head.w")
    head_b = Tensor(np.zeros(config.head_outputs), requires_grad=True, name="head.b")
    return EncoderParams(frozen, adapters, head_w, head_b)


# ---------------------------------------------------------------------------
# building blocks

def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, C) -> (B, N, ps*ps*C), tokens in row-major grid order."""
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    b, h, w, c = imgs.shape
    if h % patch_size or w % patch_size:
        raise IndivisibleDims(f"patch size {patch_size} does not divide {h}x{w}")
    gh, gw = h // patch_size, w // patch_size
    patches = imgs.reshape(b, gh, patch_size, gw, patch_size, c).transpose(0, 1, 3, 2, 4, 5)
    return patches.reshape(b, gh * gw, patch_size * patch_size * c)


def patch_embed(images: np.ndarray, patch_size: int, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Linear embedding of each flattened patch: (B, H, W, C_in) -> (B, N, C_out)."""
    patches = patchify(images, patch_size)
    if weight.shape[1] != patches.shape[-1]:
        raise ShapeMismatch(f"embedding expects {weight.shape[1]} inputs per patch, got {patches.shape[-1]}")
    return T.linear(Tensor(patches), weight, bias)


def merge_indices(gh: int, gw: int) -> list[np.ndarray]:
    """Token indices of the four members of every 2x2 cell, in output grid order."""
    if gh % 2 or gw % 2:
        raise IndivisibleDims(f"cannot merge a {gh}x{gw} token grid in 2x2 cells")
    rows, cols = np.meshgrid(np.arange(0, gh, 2), np.arange(0, gw, 2), indexing="ij")
    base = (rows * gw + cols).reshape(-1)
    return [base, base + 1, base + gw, base + gw + 1]


def patch_merge(x: Tensor, grid: tuple[int, int], weight: Tensor, bias: Tensor) -> Tensor:
    parts = [T.take(x, idx, axis=1) for idx in merge_indices(*grid)]
    merged = parts[0]
    for p in parts[1:]:
        merged = T.concat_last(merged, p)
    return T.linear(merged, weight, bias)


def upsample_indices(grid: tuple[int, int], factor: int) -> np.ndarray:
    """Nearest-neighbour source index for every cell of the ``factor``-times finer grid."""
    gh, gw = grid
    rows, cols = np.meshgrid(np.arange(gh * factor) // factor, np.arange(gw * factor) // factor, indexing="ij")
    return (rows * gw + cols).reshape(-1)


def mixing_block(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return T.add(x, T.gelu(T.linear(x, weight, bias)))


def sum_views(views: Sequence[Tensor]) -> Tensor:
    total = views[0]
    for v in views[1:]:
        total = T.add(total, v)
    return total


@dataclass
class StagePiece:
    features: list[Tensor]  # per view, post-adapter tokens of this stage
    next_tokens: list[Tensor] | None  # per view, merged tokens feeding the next stage
    next_grid: tuple[int, int] | None


def stage_forward(tokens: Sequence[Tensor], stage: int, grid: tuple[int, int], config: EncoderConfig,
                  params: EncoderParams) -> StagePiece:
    c = config.stage_channels[stage]
    for x in tokens:
        if x.ndim != 3 or x.shape[2] != c or x.shape[1] != grid[0] * grid[1]:
            raise ShapeMismatch(f"stage {stage} expects (B, {grid[0] * grid[1]}, {c}) tokens, got {x.shape}")
    bb = params.backbone
    feats = [mixing_block(x, bb[f"mix{stage}.w"], bb[f"mix{stage}.b"]) for x in tokens]
    adapter = params.adapters[stage]
    if config.adapter_placement[stage] and adapter is not None:
        tagged = TokenSet(tuple(feats), config.representation)
        feats = list(apply_adapter(tagged, config.adapter_mode, adapter).views)
    if stage + 1 == config.num_stages:
        return StagePiece(feats, None, None)
    nxt = [patch_merge(f, grid, bb[f"down{stage}.w"], bb[f"down{stage}.b"]) for f in feats]
    return StagePiece(feats, nxt, (grid[0] // 2, grid[1] // 2))


@dataclass
class ForwardResult:
    per_view: list[list[Tensor]]  # [stage][view]
    fused: list[Tensor]  # [stage], summed over views
    grids: list[tuple[int, int]]
    features: Tensor  # (B, N1, sum C), fused stages upsampled to the stage-1 grid
    logits: Tensor  # (B, N1, head_outputs)

    @property
    def grid(self) -> tuple[int, int]:
        return self.grids[0]


def forward(views: np.ndarray, config: EncoderConfig, params: EncoderParams) -> ForwardResult:
    """Run the encoder on a batch ``views`` of shape (B, K, H, W, C_in) (or (K, H, W, C_in))."""
    views = np.asarray(views, dtype=np.float64)
    if views.ndim == 4:
        views = views[None]
    if views.ndim != 5:
        raise ShapeMismatch(f"expected (B, K, H, W, C) input, got {views.shape}")
    b, k, h, w, c_in = views.shape
    if k != config.K:
        raise ShapeMismatch(f"config expects K={config.K} views, got {k}")
    if c_in != config.in_channels:
        raise ShapeMismatch(f"config expects {config.in_channels} input channels, got {c_in}")
    ps = config.patch_size
    if h % ps or w % ps:
        raise IndivisibleDims(f"patch size {ps} does not divide {h}x{w}")
    grid = (h // ps, w // ps)
    depth = 2 ** (config.num_stages - 1)
    if grid[0] % depth or grid[1] % depth:
        raise IndivisibleDims(f"token grid {grid} cannot be halved {config.num_stages - 1} times")

    bb = params.backbone
    tokens = [patch_embed(views[:, i], ps, bb["embed.w"], bb["embed.b"]) for i in range(k)]
    per_view, grids = [], []
    for s in range(config.num_stages):
        piece = stage_forward(tokens, s, grid, config, params)
        per_view.append(piece.features)
        grids.append(grid)
        tokens, grid = piece.next_tokens, piece.next_grid

    fused = [sum_views(stage) for stage in per_view]
    features = fused[0]
    for s in range(1, config.num_stages):
        up = T.take(fused[s], upsample_indices(grids[s], 2 ** s), axis=1)
        features = T.concat_last(features, up)
    logits = T.linear(features, params.head_w, params.head_b)
    return ForwardResult(per_view, fused, grids, features, logits)


def loss(result: ForwardResult, targets, config: EncoderConfig) -> Tensor:
    """Mean cross-entropy (segmentation) or mean BCE (saliency) over stage-1 tokens."""
    targets = np.asarray(targets)
    if config.head == SEGMENTATION:
        return T.softmax_cross_entropy(result.logits, targets.reshape(result.logits.shape[:-1]))
    return T.bce_with_logits(result.logits, targets.reshape(result.logits.shape).astype(np.float64))


def predict(result: ForwardResult, config: EncoderConfig) -> np.ndarray:
    """Class ids (segmentation) or probabilities (saliency), shaped (B, gh, gw)."""
    b = result.logits.shape[0]
    gh, gw = result.grid
    if config.head == SEGMENTATION:
        return result.logits.data.argmax(axis=-1).reshape(b, gh, gw)
    return (0.5 * (1.0 + np.tanh(0.5 * result.logits.data[..., 0]))).reshape(b, gh, gw)


# ---------------------------------------------------------------------------
# inputs

def views_from_lightfield(lf: LightField, selection: ViewSelection) -> np.ndarray:
    """(K, H, W, C) stack of the selected sub-aperture images."""
    return extract_views(lf, selection.coords).astype(np.float64)


def views_from_stack(stack: FocalStack) -> np.ndarray:
    return stack.images().astype(np.float64)
