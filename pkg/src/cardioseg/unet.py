"""3D encoder-decoder segmentation network.

Two conv(3x3x3)-batchnorm-relu layers per level, 2x2x2 max pooling on the
way down, transposed convolutions (kernel = stride = 2) on the way up,
skip concatenation at matching levels, and a 1x1x1 output conv with one
channel per target class.  Channels double per level from base_channels.

Axis bookkeeping: volumes are indexed [x, y, z]; network tensors are
[N, C, D, H, W] with D = z, H = y, W = x.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from typing import List, Optional, Tuple

import numpy as np

from .errors import (
    ModelMagicError,
    ModelShapeError,
    ModelTruncatedError,
    ModelVersionError,
)
from .nn.core import Parameter
from .nn.layers import BatchNorm3d, Conv3d, ConvTranspose3d, MaxPool3d, ReLU
from .nn import functional as F

MODEL_MAGIC = b"CSG1"
MODEL_VERSION = 1


@dataclass
class UNetConfig:
    in_channels: int = 1
    classes: int = 3
    base_channels: int = 16
    levels: int = 3
    patch_shape: Tuple[int, int, int] = (64, 64, 4)  # (x, y, z)
    seed: int = 0

    def validate(self) -> None:
        if self.classes < 2:
            raise ValueError("need at least 2 classes")
        if self.base_channels < 1:
            raise ValueError("base_channels must be >= 1")
        if self.levels < 2:
            raise ValueError("need at least 2 levels")
        factor = 2 ** (self.levels - 1)
        for axis, extent in zip("xyz", self.patch_shape):
            if extent < 4:
                raise ValueError(f"patch {axis} extent {extent} must be >= 4")
            if extent % factor:
                raise ValueError(
                    f"patch {axis} extent {extent} not divisible by {factor} "
                    f"(2^(levels-1) poolings)"
                )


class _ConvBlock:
    """conv-bn-relu twice."""

    def __init__(self, name: str, cin: int, cout: int, rng: np.random.Generator):
        self.ops = [
            Conv3d(f"{name}.conv1", cin, cout, (3, 3, 3), rng=rng),
            BatchNorm3d(f"{name}.bn1", cout),
            ReLU(),
            Conv3d(f"{name}.conv2", cout, cout, (3, 3, 3), rng=rng),
            BatchNorm3d(f"{name}.bn2", cout),
            ReLU(),
        ]

    def parameters(self) -> List[Parameter]:
        return [p for op in self.ops for p in op.parameters()]

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        for op in self.ops:
            x = op.forward(x, train)
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        for op in reversed(self.ops):
            g = op.backward(g)
        return g


class UNet3D:
    """The model: ordered parameters, batch-norm running stats, config."""

    def __init__(self, config: UNetConfig):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        nlev = config.levels
        chans = [config.base_channels * (2 ** i) for i in range(nlev)]
        self.enc_channels = chans[:-1]

        self.enc_blocks: List[_ConvBlock] = []
        self.pools: List[MaxPool3d] = []
        cin = config.in_channels
        for lvl in range(nlev - 1):
            self.enc_blocks.append(_ConvBlock(f"enc{lvl}", cin, chans[lvl], rng))
            self.pools.append(MaxPool3d((2, 2, 2)))
            cin = chans[lvl]
        self.bottleneck = _ConvBlock("bottleneck", cin, chans[-1], rng)

        self.ups: List[ConvTranspose3d] = []
        self.dec_blocks: List[_ConvBlock] = []
        for lvl in range(nlev - 2, -1, -1):
            self.ups.append(ConvTranspose3d(f"up{lvl}", chans[lvl + 1], chans[lvl], (2, 2, 2), rng=rng))
            self.dec_blocks.append(_ConvBlock(f"dec{lvl}", 2 * chans[lvl], chans[lvl], rng))
        # indexable by level
        self.ups = list(reversed(self.ups))
        self.dec_blocks = list(reversed(self.dec_blocks))

        self.final = Conv3d("final", chans[0], config.classes, (1, 1, 1), rng=rng)

    # -- parameter access ------------------------------------------------

    def _layers_in_order(self):
        nlev = self.config.levels
        for lvl in range(nlev - 1):
            yield from self.enc_blocks[lvl].ops
        yield from self.bottleneck.ops
        for lvl in range(nlev - 2, -1, -1):
            yield self.ups[lvl]
            yield from self.dec_blocks[lvl].ops
        yield self.final

    def parameters(self) -> List[Parameter]:
        return [p for layer in self._layers_in_order() for p in layer.parameters()]

    def named_tensors(self) -> List[Tuple[str, np.ndarray]]:
        """Trainable values plus batch-norm running stats, in a fixed order."""
        out = []
        for layer in self._layers_in_order():
            for p in layer.parameters():
                out.append((p.name, p.value))
            if isinstance(layer, BatchNorm3d):
                name = layer.gamma.name.rsplit(".", 1)[0]
                out.append((f"{name}.running_mean", layer.running_mean))
                out.append((f"{name}.running_var", layer.running_var))
        return out

    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    # -- forward / backward ----------------------------------------------

    def _check_batch(self, batch: np.ndarray) -> None:
        px, py, pz = self.config.patch_shape
        expected = (batch.shape[0], self.config.in_channels, pz, py, px)
        if batch.ndim != 5 or batch.shape[1:] != expected[1:]:
            raise ValueError(
                f"batch shape {batch.shape} does not match configured patch "
                f"[N,{self.config.in_channels},{pz},{py},{px}]"
            )

    def forward(self, batch: np.ndarray, train: bool = False) -> np.ndarray:
        """Patch batch to logits; spatial shape is preserved."""
        self._check_batch(batch)
        nlev = self.config.levels
        skips = []
        t = batch
        for lvl in range(nlev - 1):
            t = self.enc_blocks[lvl].forward(t, train)
            skips.append(t)
            t = self.pools[lvl].forward(t, train)
        t = self.bottleneck.forward(t, train)
        for lvl in range(nlev - 2, -1, -1):
            up = self.ups[lvl].forward(t, train)
            t = np.concatenate([skips[lvl], up], axis=1)
            t = self.dec_blocks[lvl].forward(t, train)
        return self.final.forward(t, train)

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        """Accumulates parameter gradients; returns gradient wrt the batch."""
        nlev = self.config.levels
        g = self.final.backward(grad_logits)
        skip_grads = [None] * (nlev - 1)
        for lvl in range(nlev - 1):
            g = self.dec_blocks[lvl].backward(g)
            cs = self.enc_channels[lvl]
            skip_grads[lvl] = g[:, :cs]
            g = self.ups[lvl].backward(np.ascontiguousarray(g[:, cs:]))
        g = self.bottleneck.backward(g)
        for lvl in range(nlev - 2, -1, -1):
            g = self.pools[lvl].backward(g)
            g = g + skip_grads[lvl]
            g = self.enc_blocks[lvl].backward(g)
        return g


def build(config: UNetConfig) -> UNet3D:
    """Deterministic He-normal initialization from config.seed."""
    return UNet3D(config)


def predict_labels(logits: np.ndarray) -> np.ndarray:
    """Per-voxel argmax of the per-channel sigmoid activations.

    Ties resolve to the lowest class index.  Accepts [N,C,D,H,W] or
    [C,D,H,W]; returns uint8 labels without the channel axis.
    """
    probs = F.sigmoid(np.asarray(logits, dtype=np.float64))
    axis = 1 if probs.ndim == 5 else 0
    return probs.argmax(axis=axis).astype(np.uint8)


def sliding_window_infer(
    net: UNet3D,
    values: np.ndarray,
    stride: Tuple[int, int, int] = (32, 32, 2),
    batch_windows: int = 8,
) -> np.ndarray:
    """Whole-volume inference by averaging overlapping patch logits.

    values is the preprocessed volume indexed [x, y, z].  Window origins
    step by stride and the final window per axis is clamped to the
    boundary so every voxel is covered.  Returns uint8 labels [x, y, z].
    """
    if values.ndim != 3:
        raise ValueError(f"expected a 3D volume, got shape {values.shape}")
    px, py, pz = net.config.patch_shape
    vx, vy, vz = values.shape
    if vx < px or vy < py or vz < pz:
        raise ValueError(
            f"volume shape {values.shape} smaller than patch {net.config.patch_shape}"
        )

    def starts(dim: int, patch: int, step: int) -> List[int]:
        out = list(range(0, dim - patch + 1, step))
        if out[-1] != dim - patch:
            out.append(dim - patch)
        return out

    origins = [
        (x0, y0, z0)
        for x0 in starts(vx, px, stride[0])
        for y0 in starts(vy, py, stride[1])
        for z0 in starts(vz, pz, stride[2])
    ]
    acc = np.zeros((net.config.classes, vx, vy, vz), dtype=np.float64)
    cnt = np.zeros((vx, vy, vz), dtype=np.float64)
    for i in range(0, len(origins), batch_windows):
        chunk = origins[i : i + batch_windows]
        batch = np.stack([
            values[x0 : x0 + px, y0 : y0 + py, z0 : z0 + pz].transpose(2, 1, 0)
            for (x0, y0, z0) in chunk
        ])[:, None].astype(np.float32)
        logits = net.forward(batch, train=False)
        for (x0, y0, z0), lg in zip(chunk, logits):
            acc[:, x0 : x0 + px, y0 : y0 + py, z0 : z0 + pz] += lg.transpose(0, 3, 2, 1)
            cnt[x0 : x0 + px, y0 : y0 + py, z0 : z0 + pz] += 1.0
    mean_logits = acc / cnt
    return predict_labels(mean_logits)


# --------------------------------------------------------------------------
# serialization: magic, version byte, length-prefixed JSON header, raw
# little-endian float32 tensors in header order
# --------------------------------------------------------------------------

def _header_dict(net: UNet3D, optimizer: Optional[dict]) -> dict:
    cfg = asdict(net.config)
    cfg["patch_shape"] = list(net.config.patch_shape)
    header = {
        "config": cfg,
        "tensors": [[name, list(t.shape)] for name, t in net.named_tensors()],
    }
    if optimizer is not None:
        header["optimizer"] = {
            "t": optimizer["t"],
            "epoch": optimizer.get("epoch", 0),
            "tensors": [[name, list(t.shape)] for name, t in optimizer["tensors"]],
        }
    return header


def save_model(net: UNet3D, path, optimizer: Optional[dict] = None) -> None:
    """optimizer, when given, is {"t": int, "epoch": int,
    "tensors": [(name, array), ...]} and rides in the same container."""
    header = json.dumps(_header_dict(net, optimizer),
                        separators=(",", ":"), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(bytes([MODEL_VERSION]))
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for _, t in net.named_tensors():
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
        if optimizer is not None:
            for _, t in optimizer["tensors"]:
                f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise ModelTruncatedError(f"model file truncated while reading {what}")
    return data


def load_model(path) -> Tuple[UNet3D, Optional[dict]]:
    """Returns the model and the optimizer payload (None when absent)."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != MODEL_MAGIC:
            raise ModelMagicError(f"bad magic {magic!r}, expected {MODEL_MAGIC!r}")
        version = _read_exact(f, 1, "version")[0]
        if version != MODEL_VERSION:
            raise ModelVersionError(f"unsupported model version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        try:
            header = json.loads(_read_exact(f, hlen, "header").decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ModelShapeError(f"unreadable model header: {e}") from e

        cfg = dict(header["config"])
        cfg["patch_shape"] = tuple(cfg["patch_shape"])
        net = UNet3D(UNetConfig(**cfg))
        expected = [[name, list(t.shape)] for name, t in net.named_tensors()]
        if header["tensors"] != expected:
            raise ModelShapeError(
                "stored tensor census does not match the config's layer chain"
            )
        for name, t in net.named_tensors():
            raw = _read_exact(f, 4 * t.size, f"tensor {name}")
            t[...] = np.frombuffer(raw, dtype="<f4").reshape(t.shape)

        opt = header.get("optimizer")
        payload = None
        if opt is not None:
            tensors = []
            for name, shape in opt["tensors"]:
                size = int(np.prod(shape))
                raw = _read_exact(f, 4 * size, f"optimizer tensor {name}")
                tensors.append((name, np.frombuffer(raw, dtype="<f4").reshape(shape).copy()))
            payload = {"t": opt["t"], "epoch": opt.get("epoch", 0), "tensors": tensors}
    return net, payload
