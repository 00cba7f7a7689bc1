"""Neg-SDR training of generalists and finetuning of personalized models.

Progress is counted in mixtures seen, not steps: the model is validated each
time another ``validate_every_mixtures`` mixtures have been consumed, and
training stops once ``patience_mixtures`` have passed without a new best mean
validation SDR. The returned model carries the best-validation parameters.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import math
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .audio import AudioClip
from .corpus import Manifest, ManifestKind
from .errors import ArgumentError, ConfigError, TrainingError
from .metrics import sdr
from .mixer import DEFAULT_SEGMENT_SEC, ClipLoader, Mixture, mixture_stream
from .sepnet import EnhancementModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EPS_REL = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 8
    validate_every_mixtures: int = 500
    patience_mixtures: int = 5000
    max_mixtures: int = 200_000
    snr_range: tuple = (-5.0, 5.0)
    seed: int = 0
    segment_sec: float = DEFAULT_SEGMENT_SEC
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    val_count: int = 100

    def __post_init__(self):
        object.__setattr__(self, "snr_range", tuple(float(v) for v in self.snr_range))
        object.__setattr__(self, "adam_betas", tuple(float(v) for v in self.adam_betas))
        positive = ("learning_rate", "batch_size", "validate_every_mixtures", "patience_mixtures",
                    "max_mixtures", "segment_sec", "val_count")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.patience_mixtures < self.validate_every_mixtures:
            raise ConfigError("patience_mixtures must be >= validate_every_mixtures")
        if self.snr_range[0] > self.snr_range[1]:
            raise ConfigError(f"invalid snr_range {self.snr_range}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["snr_range"] = list(self.snr_range)
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def _as_array(v) -> np.ndarray:
    return v.samples if isinstance(v, AudioClip) else np.asarray(v, dtype=np.float64)


def neg_sdr_loss(estimate, target) -> float:
    """Negative SDR in dB, stabilised by ``1e-8 * sum(target**2)`` in the denominator.

    The stabiliser puts a floor of -80 dB on a perfect estimate.
    """
    v_hat, v = _as_array(estimate), _as_array(target)
    if v_hat.shape != v.shape or v.size < 1:
        raise ArgumentError(f"length mismatch: estimate {v_hat.shape} vs target {v.shape}")
    p_target = float(np.sum(v ** 2))
    if not p_target > 0:
        raise ArgumentError("target has zero power")
    p_resid = float(np.sum((v - v_hat) ** 2))
    return -10.0 * math.log10(p_target / (p_resid + EPS_REL * p_target))


def neg_sdr_torch(estimate: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable :func:`neg_sdr_loss`; returns one value per row."""
    p_target = torch.sum(target ** 2, dim=-1)
    p_resid = torch.sum((target - estimate) ** 2, dim=-1)
    return -10.0 * torch.log10(p_target / (p_resid + EPS_REL * p_target))


@dataclass
class LogEntry:
    mixtures_seen: int
    train_loss: float | None
    val_sdr: float | None = None


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)
    best_val_sdr: float = -math.inf
    best_mixtures_seen: int = 0
    best_checkpoint: str | None = None
    source_checkpoint: str | None = None
    stop_reason: str = ""

    def append(self, entry: LogEntry) -> None:
        if self.entries and entry.mixtures_seen <= self.entries[-1].mixtures_seen:
            raise ArgumentError("mixtures_seen must be strictly increasing")
        self.entries.append(entry)

    def val_scores(self) -> list[float]:
        return [e.val_sdr for e in self.entries if e.val_sdr is not None]

    def save(self, path: str | Path) -> Path:
        """JSON lines: one row per entry, then a summary row."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as f:
            for e in self.entries:
                f.write(json.dumps(dataclasses.asdict(e)) + "\n")
            f.write(json.dumps({"summary": {
                "best_val_sdr": self.best_val_sdr, "best_mixtures_seen": self.best_mixtures_seen,
                "best_checkpoint": self.best_checkpoint, "source_checkpoint": self.source_checkpoint,
                "stop_reason": self.stop_reason,
            }}) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "TrainLog":
        out = cls()
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            row = json.loads(line)
            if "summary" in row:
                for k, v in row["summary"].items():
                    setattr(out, k, v)
            else:
                out.entries.append(LogEntry(**row))
        return out


class EarlyStopping:
    """Patience bookkeeping on the nominal validation schedule.

    Validation ``k`` nominally happens at ``k * validate_every`` mixtures, so
    with the defaults (500 / 5000) training halts exactly ten validations
    after the best one regardless of batch-size rounding.
    """

    def __init__(self, validate_every: int, patience: int):
        self.validate_every = validate_every
        self.patience = patience
        self.best_score = -math.inf
        self.best_index = -1
        self.index = -1

    def update(self, score: float) -> tuple[bool, bool]:
        """Register the next validation score; returns ``(is_best, should_stop)``."""
        self.index += 1
        is_best = score > self.best_score
        if is_best:
            self.best_score = score
            self.best_index = self.index
        waited = (self.index - self.best_index) * self.validate_every
        return is_best, waited >= self.patience


@torch.no_grad()
def validation_sdr(model: EnhancementModel, mixtures: Sequence[Mixture], batch_size: int = 8) -> float:
    """Mean SDR of the model's outputs over ``mixtures``."""
    if len(mixtures) == 0:
        raise ArgumentError("validation set is empty")
    net = model.net
    was_training = net.training
    net.eval()
    scores = []
    try:
        for start in range(0, len(mixtures), batch_size):
            chunk = [mixtures[i] for i in range(start, min(start + batch_size, len(mixtures)))]
            for group in _same_length_groups(chunk):
                x = torch.as_tensor(np.stack([m.x.samples for m in group]), dtype=torch.float32)
                y = net(x).double().numpy()
                scores += [sdr(yi, m.s.samples) for yi, m in zip(y, group)]
    finally:
        net.train(was_training)
    return float(np.mean(scores))


def _same_length_groups(mixtures):
    groups: dict[int, list] = {}
    for m in mixtures:
        groups.setdefault(len(m.x), []).append(m)
    return list(groups.values())


class Trainer:
    """Adam on Neg-SDR over seeded mixture batches with early stopping.

    ``validator`` replaces the mean-SDR validation (used to drive the stopping
    rule with scripted scores); ``out_dir`` receives the best checkpoint and
    the log. ``stream`` replaces the seeded mixture stream with any sequence
    indexed by mixtures seen.
    """

    def __init__(self, model: EnhancementModel, speech: Manifest, noise: Manifest,
                 val_mixtures: Sequence[Mixture], cfg: TrainConfig,
                 out_dir: str | Path | None = None,
                 validator: Callable[[EnhancementModel], float] | None = None,
                 loader: ClipLoader | None = None, stream: Sequence[Mixture] | None = None):
        if not speech.records or not noise.records:
            raise ArgumentError("speech and noise manifests must be non-empty")
        if validator is None and len(val_mixtures) == 0:
            raise ArgumentError("validation mixtures are required")
        self.model = model
        self.cfg = cfg
        self.val_mixtures = val_mixtures
        self.validator = validator or (lambda m: validation_sdr(m, self.val_mixtures, cfg.batch_size))
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.stream = stream if stream is not None else mixture_stream(
            speech, noise, cfg.max_mixtures, cfg.snr_range, cfg.segment_sec, cfg.seed, loader=loader)
        self.optimizer = torch.optim.Adam(model.net.parameters(), lr=cfg.learning_rate,
                                          betas=cfg.adam_betas, eps=cfg.adam_eps)

    def batch(self, indices: range) -> tuple[torch.Tensor, torch.Tensor]:
        mixes = [self.stream[i] for i in indices]
        x = torch.as_tensor(np.stack([m.x.samples for m in mixes]), dtype=torch.float32)
        s = torch.as_tensor(np.stack([m.s.samples for m in mixes]), dtype=torch.float32)
        return x, s

    def train_step(self, indices: range) -> float:
        x, s = self.batch(indices)
        net = self.model.net
        net.train()
        loss = neg_sdr_torch(net(x), s).mean()
        if not torch.isfinite(loss):
            raise TrainingError(f"non-finite loss at mixtures {indices.start}-{indices.stop - 1}",
                                self._dump_batch(x, s, indices))
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()
        return float(loss.detach())

    def _dump_batch(self, x, s, indices) -> Path:
        target = self.out_dir or Path(tempfile.mkdtemp(prefix="pse-diverged-"))
        target.mkdir(parents=True, exist_ok=True)
        path = target / f"diverged_batch_{indices.start}.npz"
        np.savez(path, x=x.numpy(), s=s.numpy(), indices=np.array(list(indices)))
        return path

    def run(self) -> tuple[EnhancementModel, TrainLog]:
        cfg = self.cfg
        trainlog = TrainLog(source_checkpoint=self.model.training_meta.get("source_checkpoint_id"))
        stopper = EarlyStopping(cfg.validate_every_mixtures, cfg.patience_mixtures)
        best_state = None

        def validate(seen: int, train_loss: float | None) -> bool:
            nonlocal best_state
            score = float(self.validator(self.model))
            is_best, stop = stopper.update(score)
            trainlog.append(LogEntry(seen, train_loss, score))
            if is_best:
                best_state = copy.deepcopy(self.model.net.state_dict())
                trainlog.best_val_sdr = score
                trainlog.best_mixtures_seen = seen
            log.info("mixtures %d  train %s  val SDR %.3f%s", seen,
                     "-" if train_loss is None else f"{train_loss:.3f}", score, "  *" if is_best else "")
            return stop

        seen = 0
        stop = validate(0, None)
        next_mark = cfg.validate_every_mixtures
        losses: list[float] = []
        while not stop:
            if seen >= cfg.max_mixtures:
                trainlog.stop_reason = "max_mixtures"
                break
            end = min(seen + cfg.batch_size, cfg.max_mixtures)
            losses.append(self.train_step(range(seen, end)))
            seen = end
            if seen >= next_mark:
                stop = validate(seen, float(np.mean(losses)))
                losses = []
                while next_mark <= seen:
                    next_mark += cfg.validate_every_mixtures
        else:
            trainlog.stop_reason = "patience"
        if seen >= cfg.max_mixtures and not trainlog.stop_reason:
            trainlog.stop_reason = "max_mixtures"

        self.model.net.load_state_dict(best_state)
        self.model.net.eval()
        meta = self.model.training_meta
        meta["mixtures_seen"] = int(meta.get("mixtures_seen", 0)) + seen
        meta["best_mixtures_seen"] = trainlog.best_mixtures_seen
        meta["best_val_sdr"] = trainlog.best_val_sdr
        meta["train_config"] = cfg.to_dict()
        if self.out_dir is not None:
            trainlog.best_checkpoint = str(save_checkpoint(self.model, self.out_dir / "best.ckpt"))
            trainlog.save(self.out_dir / "trainlog.jsonl")
        return self.model, trainlog


def train(model: EnhancementModel, speech: Manifest, noise: Manifest, val_mixtures: Sequence[Mixture],
          cfg: TrainConfig = TrainConfig(), out_dir: str | Path | None = None,
          validator: Callable[[EnhancementModel], float] | None = None,
          loader: ClipLoader | None = None) -> tuple[EnhancementModel, TrainLog]:
    torch.manual_seed(cfg.seed)
    return Trainer(model, speech, noise, val_mixtures, cfg, out_dir, validator, loader).run()


def _split_or_all(manifest: Manifest, part: str) -> Manifest:
    parts = {r.partition for r in manifest.records}
    if part in parts:
        return manifest.partition(part)
    return manifest


def finetune_pse(generalist_ckpt: str | Path, synth_speech: Manifest, noise: Manifest,
                 cfg: TrainConfig = TrainConfig(), out_dir: str | Path | None = None,
                 loader: ClipLoader | None = None, val_seed: int | None = None) -> tuple[EnhancementModel, TrainLog]:
    """Continue training a generalist checkpoint on one speaker's (synthesized) data.

    Training draws from the ``tr`` partitions of ``synth_speech`` and
    ``noise``; the fixed validation set of ``cfg.val_count`` mixtures comes
    from their ``vl`` partitions (falling back to the whole manifest when a
    partition is absent).
    """
    if synth_speech.kind not in (ManifestKind.synthesized_speech, ManifestKind.clean_speech):
        raise ArgumentError(f"finetuning needs speech, got a {synth_speech.kind.value} manifest")
    if not synth_speech.records:
        raise ArgumentError("synthesized speech manifest is empty")
    model = load_checkpoint(generalist_ckpt)
    speech_tr, speech_vl = _split_or_all(synth_speech, "tr"), _split_or_all(synth_speech, "vl")
    noise_tr, noise_vl = _split_or_all(noise, "tr"), _split_or_all(noise, "vl")
    vseed = cfg.seed + 1_000_003 if val_seed is None else val_seed
    val = list(mixture_stream(speech_vl, noise_vl, cfg.val_count, cfg.snr_range, cfg.segment_sec,
                              vseed, loader=loader))
    model, trainlog = train(model, speech_tr, noise_tr, val, cfg, out_dir=out_dir, loader=loader)
    trainlog.source_checkpoint = model.training_meta.get("source_checkpoint_id")
    if out_dir is not None:
        trainlog.save(Path(out_dir) / "trainlog.jsonl")
    return model, trainlog
