"""Optimization loop: epochs, batching, the three-phase learning-rate
schedule, checkpointing and cohort evaluation.

The schedule holds 0.005 through epoch 40 and 0.001 through epoch 60,
then decays geometrically so the final epoch lands exactly on the
configured final rate (0.0004457 for the default 100-epoch run).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data_io import DatasetIndex, IndexEntry, read_nifti, normalize_intensity
from .errors import NumericError
from .metrics import MetricsReport, aggregate_report, volume_metrics
from .nn import functional as F
from .nn.optim import AdamState, adam_step, init_states
from .preprocess import (
    CANONICAL_SHAPE,
    PATCH_SHAPE,
    clean_mask,
    crop_or_pad_array,
    extract_patches,
    locate_heart_bbox,
)
from .unet import UNet3D, UNetConfig, save_model, sliding_window_infer


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    base_channels: int = 16
    levels: int = 3
    patch: Tuple[int, int, int] = PATCH_SHAPE
    patches_per_volume: int = 8
    seed: int = 0
    lr_phase1: float = 0.005
    lr_phase2: float = 0.001
    lr_final: float = 0.0004457
    checkpoint_every: int = 0
    classes: int = 3
    canonical_shape: Tuple[int, int, int] = CANONICAL_SHAPE
    smoothing: float = 1e-6

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("lr_phase1", "lr_phase2", "lr_final"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def unet_config(self) -> UNetConfig:
        return UNetConfig(
            in_channels=1,
            classes=self.classes,
            base_channels=self.base_channels,
            levels=self.levels,
            patch_shape=tuple(self.patch),
            seed=self.seed,
        )

    def to_json(self) -> str:
        return json.dumps({
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "base_channels": self.base_channels,
            "levels": self.levels,
            "patch": list(self.patch),
            "patches_per_volume": self.patches_per_volume,
            "seed": self.seed,
            "lr": {"phase1": self.lr_phase1, "phase2": self.lr_phase2,
                   "final": self.lr_final},
            "checkpoint_every": self.checkpoint_every,
        }, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        data = json.loads(text)
        lr = data.pop("lr", {})
        cfg = cls(
            epochs=data.get("epochs", 100),
            batch_size=data.get("batch_size", 32),
            base_channels=data.get("base_channels", 16),
            levels=data.get("levels", 3),
            patch=tuple(data.get("patch", list(PATCH_SHAPE))),
            patches_per_volume=data.get("patches_per_volume", 8),
            seed=data.get("seed", 0),
            lr_phase1=lr.get("phase1", 0.005),
            lr_phase2=lr.get("phase2", 0.001),
            lr_final=lr.get("final", 0.0004457),
            checkpoint_every=data.get("checkpoint_every", 0),
        )
        cfg.validate()
        return cfg


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    """Learning rate for a 1-based epoch index."""
    if not 1 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside 1..{config.epochs}")
    if epoch <= 40:
        return config.lr_phase1
    if epoch <= 60 or config.epochs <= 60:
        return config.lr_phase2
    ratio = (config.lr_final / config.lr_phase2) ** (1.0 / (config.epochs - 60))
    return config.lr_phase2 * ratio ** (epoch - 60)


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_dice: float
    train_loss: float
    val_dice: float
    val_loss: float
    val_f1: float
    val_iou: float


def write_epoch_log(logs: Sequence[EpochLog], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "lr", "train_dice", "train_loss",
                    "val_dice", "val_loss", "val_f1", "val_iou"])
        for row in logs:
            w.writerow([
                row.epoch, format(row.lr, ".6g"),
                format(row.train_dice, ".6g"), format(row.train_loss, ".6g"),
                format(row.val_dice, ".6g"), format(row.val_loss, ".6g"),
                format(row.val_f1, ".6g"), format(row.val_iou, ".6g"),
            ])


def load_canonical(entry: IndexEntry, root) -> Tuple[np.ndarray, np.ndarray]:
    """Read one image/mask pair and bring it to the canonical frame:
    normalized intensities, heart-centred crop/pad."""
    root = Path(root)
    volume = read_nifti(root / entry.image)
    mask = read_nifti(root / entry.mask)
    volume = normalize_intensity(volume)
    center = locate_heart_bbox(mask.labels)
    values = crop_or_pad_array(volume.values, center, CANONICAL_SHAPE)
    labels = crop_or_pad_array(mask.labels, center, CANONICAL_SHAPE)
    return values, labels


def _foreground_macro(report: MetricsReport) -> Tuple[float, float, float]:
    """(dice, f1, iou) averaged over phases' foreground macro rows."""
    if not report.macro_by_phase:
        return float("nan"), float("nan"), float("nan")
    dice = float(np.mean([a.dice for a in report.macro_by_phase.values()]))
    f1 = float(np.mean([a.f1 for a in report.macro_by_phase.values()]))
    iou = float(np.mean([a.iou_percent for a in report.macro_by_phase.values()]))
    return dice, f1, iou


def evaluate(net: UNet3D, index: DatasetIndex, split: str, root) -> MetricsReport:
    """Sliding-window inference plus mask cleaning against ground truth."""
    entries = index.for_split(split)
    if not entries:
        raise ValueError(f"split {split!r} is empty")
    rows = []
    for entry in entries:
        values, labels = load_canonical(entry, root)
        pred = sliding_window_infer(net, values)
        pred = clean_mask(pred)
        rows.extend(volume_metrics(pred, labels, entry.subject, entry.phase))
    return aggregate_report(rows)


def train(
    net: UNet3D,
    index: DatasetIndex,
    config: TrainConfig,
    root,
    checkpoint_base=None,
) -> List[EpochLog]:
    """Run the configured number of epochs over the train split, in place.

    Per epoch: seeded random patches from every training volume, shuffled
    and batched, sigmoid + soft-Dice loss, Adam with the scheduled rate.
    Validation (when a val split exists) runs full sliding-window
    inference at epoch end and never feeds the optimizer.
    """
    config.validate()
    train_entries = index.for_split("train")
    if not train_entries:
        raise ValueError("training split is empty")
    cache = [load_canonical(e, root) for e in train_entries]
    has_val = bool(index.for_split("val"))

    params = net.parameters()
    states = init_states(params)
    logs: List[EpochLog] = []
    for epoch in range(1, config.epochs + 1):
        lr = lr_schedule(epoch, config)
        rng = np.random.default_rng([config.seed, 1000 + epoch])
        samples = []
        for values, labels in cache:
            samples.extend(extract_patches(
                values, labels, config.patch, config.patches_per_volume,
                rng, classes=config.classes,
            ))
        order = rng.permutation(len(samples))

        losses = []
        for start in range(0, len(order), config.batch_size):
            chunk = [samples[i] for i in order[start : start + config.batch_size]]
            x = np.concatenate([s.image_patch for s in chunk])
            target = np.concatenate([s.label_patch for s in chunk])
            net.zero_grads()
            logits = net.forward(x, train=True)
            probs = F.sigmoid(logits)
            loss, dprobs = F.dice_loss(probs, target, config.smoothing)
            if not math.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss} at epoch {epoch}, "
                    f"batch {start // config.batch_size}, lr {lr}"
                )
            dlogits = F.sigmoid_backward(dprobs, probs)
            net.backward(dlogits)
            adam_step(params, states, lr)
            losses.append(loss)

        train_loss = float(np.mean(losses))
        val_dice = val_loss = val_f1 = val_iou = float("nan")
        if has_val:
            report = evaluate(net, index, "val", root)
            val_dice, val_f1, val_iou = _foreground_macro(report)
            val_loss = 1.0 - val_dice
        logs.append(EpochLog(epoch, lr, 1.0 - train_loss, train_loss,
                             val_dice, val_loss, val_f1, val_iou))

        if (checkpoint_base is not None and config.checkpoint_every > 0
                and epoch % config.checkpoint_every == 0):
            payload = {
                "t": states[0].t if states else 0,
                "epoch": epoch,
                "tensors": [(f"{p.name}.{kind}", getattr(s, kind))
                            for p, s in zip(params, states) for kind in ("m", "v")],
            }
            save_model(net, f"{checkpoint_base}.ep{epoch:03d}", payload)
    return logs
