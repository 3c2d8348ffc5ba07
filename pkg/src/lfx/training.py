"""Toy training: SGD on adapter and head parameters over a frozen backbone."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoder as E
from .adapter import Representation
from .encoder import EncoderConfig, EncoderParams
from .errors import DivergedLoss, LfxError, NonFiniteValue
from .lightfield import select_views
from .metrics import ConfusionMatrix, accumulate, mae, miou
from .refocus import build_stack
from .rng import generator
from .synthetic import NUM_CLASSES, SyntheticScene, make_synthetic_task


@dataclass
class TrainingReport:
    config: EncoderConfig
    losses: list[float]
    final_loss: float
    metrics: dict[str, float]
    backbone_hash_before: str
    backbone_hash_after: str
    view_coords: tuple = ()
    params: EncoderParams | None = field(default=None, repr=False)

    @property
    def backbone_unchanged(self) -> bool:
        return self.backbone_hash_before == self.backbone_hash_after

    def to_csv(self) -> str:
        lines = ["step,loss"]
        lines += [f"{i},{loss!r}" for i, loss in enumerate(self.losses)]
        pairs = [("final_loss", self.final_loss)] + list(self.metrics.items())
        lines.append("metrics," + ",".join(f"{k}={v!r}" for k, v in pairs))
        return "\n".join(lines) + "\n"


def default_slopes(k: int) -> list[float]:
    """Evenly spaced refocus slopes covering the task's disparity range."""
    return [0.0] if k == 1 else [float(s) for s in np.linspace(-2.0, 2.0, k)]


def scene_inputs(scenes: list[SyntheticScene], config: EncoderConfig, strategy="nearest",
                 slopes=None) -> tuple[np.ndarray, tuple]:
    """Stack encoder inputs (B, K, H, W, C) for ``scenes`` under the config's representation."""
    batch, coords = [], ()
    for scene in scenes:
        if config.representation is Representation.SAI:
            sel = select_views(scene.lightfield, strategy, config.K)
            coords = sel.coords
            batch.append(E.views_from_lightfield(scene.lightfield, sel))
        else:
            stack = build_stack(scene.lightfield, slopes or default_slopes(config.K))
            batch.append(E.views_from_stack(stack))
    return np.stack(batch), coords


def _targets(scenes: list[SyntheticScene], config: EncoderConfig) -> np.ndarray:
    if config.head == E.SEGMENTATION:
        return np.stack([s.labels for s in scenes])
    return np.stack([s.saliency for s in scenes])


def evaluate(inputs, targets, config: EncoderConfig, params: EncoderParams) -> dict[str, float]:
    result = E.forward(inputs, config, params)
    out = {"eval_loss": E.loss(result, targets, config).item()}
    pred = E.predict(result, config)
    if config.head == E.SEGMENTATION:
        cm = accumulate(ConfusionMatrix.zeros(config.num_classes), targets, pred)
        out["acc"], out["macc"], out["miou"] = miou(cm)
    else:
        out["mae"] = mae(pred, targets)
    return out


def train_toy(scene_gen_seed: int, config: EncoderConfig, steps: int, lr: float = 1e-2,
              strategy="nearest", n_train: int = 4, n_eval: int = 4, angular: int = 5, size: int = 32,
              slopes=None) -> TrainingReport:
    """Full-batch SGD on the synthetic task; only adapter and head parameters move.

    ``losses[i]`` is the training loss before update ``i``; ``final_loss`` is
    measured after the last update.
    """
    if steps < 1:
        raise LfxError("steps must be >= 1")
    if not lr >= 0 or not math.isfinite(lr):
        raise LfxError("lr must be a finite nonnegative number")
    if config.head == E.SEGMENTATION and config.num_classes < NUM_CLASSES:
        raise LfxError(f"the synthetic task has {NUM_CLASSES} classes")
    seeds = generator(scene_gen_seed, "train_toy", "scenes").integers(0, 2**31, size=n_train + n_eval)
    scenes = [make_synthetic_task(int(s), angular=angular, size=size, channels=config.in_channels,
                                  patch_size=config.patch_size) for s in seeds]
    if config.representation is Representation.SAI:
        # corners/fixed5 pick their own view count
        config = replace(config, K=select_views(scenes[0].lightfield, strategy, config.K).K)
    train_in, coords = scene_inputs(scenes[:n_train], config, strategy, slopes)
    eval_in, _ = scene_inputs(scenes[n_train:], config, strategy, slopes)
    train_t, eval_t = _targets(scenes[:n_train], config), _targets(scenes[n_train:], config)

    params = E.init_encoder(config)
    before = params.backbone_hash()
    trainable = params.trainable()
    losses = []
    # divergence is reported as DivergedLoss, so numpy's overflow warnings add nothing
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            for p in trainable:
                p.zero_grad()
            try:
                value = E.loss(E.forward(train_in, config, params), train_t, config)
            except NonFiniteValue as exc:
                raise DivergedLoss(f"non-finite activations at step {step}") from exc
            if not math.isfinite(value.item()):
                raise DivergedLoss(f"loss became {value.item()} at step {step}")
            losses.append(value.item())
            value.backward()
            for p in trainable:
                if p.grad is not None:
                    p.data -= lr * p.grad
            if not all(np.isfinite(p.data).all() for p in trainable):
                raise DivergedLoss(f"parameters diverged at step {step}")
    for p in trainable:
        p.zero_grad()

    final = E.loss(E.forward(train_in, config, params), train_t, config).item()
    metrics = evaluate(eval_in, eval_t, config, params)
    return TrainingReport(config, losses, final, metrics, before, params.backbone_hash(), coords, params)
