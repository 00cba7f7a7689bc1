"""Mask-based time-domain enhancement network (encoder / TCN separator / decoder).

One mask is estimated per input, so the network maps a noisy waveform to a
single enhanced waveform of the same length. Four size presets share the
encoder and decoder; bottleneck, hidden and skip channels are halved per step
from L down to T.
"""

from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .audio import SAMPLE_RATE, AudioClip
from .errors import ArgumentError, CheckpointError, ConfigError

CHECKPOINT_FORMAT = "pse-checkpoint"
CHECKPOINT_VERSION = 1


class ModelSize(str, Enum):
    L = "L"
    M = "M"
    S = "S"
    T = "T"

    @property
    def multiplier(self) -> float:
        return {"L": 1.0, "M": 0.5, "S": 0.25, "T": 0.125}[self.value]

    @property
    def target_params(self) -> int:
        return SIZE_TARGETS[self]


SIZE_TARGETS = {
    ModelSize.L: 1_000_000,
    ModelSize.M: 437_800,
    ModelSize.S: 224_100,
    ModelSize.T: 138_800,
}


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of one network instance.

    ``bottleneck_channels``, ``convblock_channels`` and ``skip_channels`` are
    the values actually used; :meth:`scaled` derives them from a size-L base.
    """

    encoder_filters: int = 992
    encoder_kernel: int = 40
    bottleneck_channels: int = 208
    convblock_channels: int = 104
    skip_channels: int = 208
    convblock_kernel: int = 3
    blocks_per_repeat: int = 8
    repeats: int = 1
    size: ModelSize = ModelSize.L
    mask_activation: str = "sigmoid"
    norm: str = "gLN"

    def __post_init__(self):
        object.__setattr__(self, "size", ModelSize(self.size))
        ints = (
            self.encoder_filters, self.encoder_kernel, self.bottleneck_channels,
            self.convblock_channels, self.skip_channels, self.convblock_kernel,
            self.blocks_per_repeat, self.repeats,
        )
        if any(int(v) != v or v <= 0 for v in ints):
            raise ConfigError(f"all channel/kernel/block counts must be positive integers: {self}")
        if self.encoder_kernel % 2:
            raise ConfigError("encoder_kernel must be even (stride is half the kernel)")
        if self.convblock_kernel % 2 == 0:
            raise ConfigError("convblock_kernel must be odd for symmetric padding")
        if self.mask_activation not in ("sigmoid", "relu"):
            raise ConfigError(f"unknown mask activation {self.mask_activation!r}")
        if self.norm != "gLN":
            raise ConfigError("only global layer norm (gLN) is supported")

    @property
    def stride(self) -> int:
        return self.encoder_kernel // 2

    def scaled(self, size: ModelSize | str) -> "ModelConfig":
        """Return this (size-L) config resized to ``size`` by channel halving."""
        size = ModelSize(size)
        ratio = size.multiplier / self.size.multiplier

        def scale(c: int) -> int:
            return max(1, int(round(c * ratio)))

        return dataclasses.replace(
            self,
            bottleneck_channels=scale(self.bottleneck_channels),
            convblock_channels=scale(self.convblock_channels),
            skip_channels=scale(self.skip_channels),
            size=size,
        )

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["size"] = self.size.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


DEFAULT_BASE = ModelConfig()


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form trainable-parameter count for ``cfg`` (mirrors the modules below)."""
    n, k = cfg.encoder_filters, cfg.encoder_kernel
    b, h, sk, p = cfg.bottleneck_channels, cfg.convblock_channels, cfg.skip_channels, cfg.convblock_kernel
    block = (b * h + h) + 1 + 2 * h + (h * p + h) + 1 + 2 * h + (h * b + b) + (h * sk + sk)
    sep = 2 * n + (n * b + b) + cfg.blocks_per_repeat * cfg.repeats * block + 1 + (sk * n + n)
    return n * k + sep + n * k


class GlobalLayerNorm(nn.GroupNorm):
    """Normalises over channels and time jointly, per-channel gain and bias."""

    def __init__(self, channels: int):
        super().__init__(1, channels, eps=1e-8)


class ConvBlock(nn.Module):
    def __init__(self, bn_chan: int, hid_chan: int, skip_chan: int, kernel: int, dilation: int):
        super().__init__()
        self.in_conv = nn.Conv1d(bn_chan, hid_chan, 1)
        self.act1 = nn.PReLU()
        self.norm1 = GlobalLayerNorm(hid_chan)
        self.dconv = nn.Conv1d(
            hid_chan, hid_chan, kernel, padding=dilation * (kernel - 1) // 2,
            dilation=dilation, groups=hid_chan,
        )
        self.act2 = nn.PReLU()
        self.norm2 = GlobalLayerNorm(hid_chan)
        self.res_conv = nn.Conv1d(hid_chan, bn_chan, 1)
        self.skip_conv = nn.Conv1d(hid_chan, skip_chan, 1)

    def forward(self, x):
        y = self.norm1(self.act1(self.in_conv(x)))
        y = self.norm2(self.act2(self.dconv(y)))
        return self.res_conv(y), self.skip_conv(y)


class MaskNet(nn.Module):
    """Temporal convolutional network producing one mask over encoder frames."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        n = cfg.encoder_filters
        self.in_norm = GlobalLayerNorm(n)
        self.bottleneck = nn.Conv1d(n, cfg.bottleneck_channels, 1)
        self.blocks = nn.ModuleList(
            ConvBlock(cfg.bottleneck_channels, cfg.convblock_channels, cfg.skip_channels,
                      cfg.convblock_kernel, 2 ** x)
            for _ in range(cfg.repeats)
            for x in range(cfg.blocks_per_repeat)
        )
        self.out_act = nn.PReLU()
        self.mask_conv = nn.Conv1d(cfg.skip_channels, n, 1)
        self.mask_act = torch.sigmoid if cfg.mask_activation == "sigmoid" else torch.relu

    def forward(self, w):
        out = self.bottleneck(self.in_norm(w))
        skip_sum = 0.0
        for block in self.blocks:
            res, skip = block(out)
            out = out + res
            skip_sum = skip_sum + skip
        return self.mask_act(self.mask_conv(self.out_act(skip_sum)))


class SepNet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.Conv1d(1, cfg.encoder_filters, cfg.encoder_kernel, stride=cfg.stride, bias=False)
        self.masker = MaskNet(cfg)
        self.decoder = nn.ConvTranspose1d(
            cfg.encoder_filters, 1, cfg.encoder_kernel, stride=cfg.stride, bias=False
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Enhance a batch ``(batch, time)``; output has the same shape."""
        squeeze = x.dim() == 1
        if squeeze:
            x = x.unsqueeze(0)
        length = x.shape[-1]
        k, s = self.cfg.encoder_kernel, self.cfg.stride
        n_frames = max(1, math.ceil((length - k) / s) + 1)
        padded = k + (n_frames - 1) * s
        x = nn.functional.pad(x, (0, padded - length)).unsqueeze(1)
        w = torch.relu(self.encoder(x))
        y = self.decoder(w * self.masker(w)).squeeze(1)[..., :length]
        return y.squeeze(0) if squeeze else y


@dataclass
class EnhancementModel:
    config: ModelConfig
    net: SepNet
    training_meta: dict = field(default_factory=dict)

    @property
    def parameters(self):
        return self.net.state_dict()


def build_model(size: ModelSize | str = ModelSize.L, base: ModelConfig = DEFAULT_BASE,
                init_seed: int = 0, strict: bool = False) -> EnhancementModel:
    """Instantiate a freshly initialised network of the requested size preset.

    With ``strict`` set, a config whose parameter count is more than 2x away
    from the preset target raises :class:`ConfigError`.
    """
    size = ModelSize(size)
    cfg = base.scaled(size)
    if strict:
        count = expected_param_count(cfg)
        target = SIZE_TARGETS[size]
        if not 0.5 * target <= count <= 2.0 * target:
            raise ConfigError(f"size {size.value}: {count} parameters is outside [0.5, 2]x of {target}")
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(init_seed)
        net = SepNet(cfg)
    finally:
        torch.random.set_rng_state(gen_state)
    net.eval()
    return EnhancementModel(cfg, net, {"init_seed": init_seed, "mixtures_seen": 0})


def param_count(model: EnhancementModel | nn.Module) -> int:
    net = model.net if isinstance(model, EnhancementModel) else model
    return sum(p.numel() for p in net.parameters() if p.requires_grad)


@torch.no_grad()
def enhance(model: EnhancementModel, x: AudioClip) -> AudioClip:
    if x.sample_rate_hz != SAMPLE_RATE:
        raise ArgumentError(f"expected {SAMPLE_RATE} Hz input, got {x.sample_rate_hz}")
    samples = np.asarray(x.samples)
    if not np.all(np.isfinite(samples)):
        raise ArgumentError("input contains non-finite samples")
    was_training = model.net.training
    model.net.eval()
    try:
        y = model.net(torch.from_numpy(np.array(samples, dtype=np.float32))).double().numpy()
    finally:
        model.net.train(was_training)
    return AudioClip(y, SAMPLE_RATE)


def checkpoint_id(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def save_checkpoint(model: EnhancementModel, path: str | Path) -> Path:
    """Write a single-file checkpoint: JSON header line, then a torch state blob."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    torch.save({k: v.detach().cpu().clone() for k, v in model.net.state_dict().items()}, buf)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "param_count": param_count(model),
        "training_meta": model.training_meta,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expect_size: ModelSize | str | None = None,
                    expect_config: ModelConfig | None = None) -> EnhancementModel:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    head, sep, blob = raw.partition(b"\n")
    try:
        header = json.loads(head)
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"{path}: malformed checkpoint header") from e
    if not sep or header.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a pse checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    try:
        cfg = ModelConfig.from_dict(header["config"])
    except (TypeError, KeyError, ConfigError) as e:
        raise CheckpointError(f"{path}: invalid embedded config ({e})") from e
    if expect_size is not None and cfg.size != ModelSize(expect_size):
        raise CheckpointError(f"{path}: checkpoint is size {cfg.size.value}, expected {ModelSize(expect_size).value}")
    if expect_config is not None and cfg != expect_config:
        raise CheckpointError(f"{path}: config mismatch")
    net = SepNet(cfg)
    try:
        state = torch.load(io.BytesIO(blob), weights_only=True)
        net.load_state_dict(state)
    except Exception as e:  # torch raises a variety of types here
        raise CheckpointError(f"{path}: parameter blob does not match config ({e})") from e
    net.eval()
    meta = dict(header.get("training_meta", {}))
    meta["loaded_from"] = str(path)
    meta["source_checkpoint_id"] = checkpoint_id(path)
    return EnhancementModel(cfg, net, meta)
