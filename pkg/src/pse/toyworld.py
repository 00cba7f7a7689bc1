"""A fully synthetic desk-scale world: toy speakers, noise, texts and manifests.

Everything is generated from seeds, so the same :class:`ToyWorldConfig`
always produces byte-identical corpora. The layout mirrors a real setup:

* ``G``: generalist speech from many toy speakers, split ``tr``/``vl``;
* ``N``: noise split ``tr``/``vl``/``te`` from disjoint generators (babble
  in each partition uses its own pool of voices);
* ``T``: a text corpus for synthesis;
* per target speaker ``S_<k>``: a short enrollment clip and clean test speech.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .audio import SAMPLE_RATE, AudioClip, write_wav
from .corpus import (Manifest, ManifestKind, SpeakerRef, TextRecord, UtteranceRecord, load_manifest,
                     make_manifest, read_clip, write_manifest)
from .errors import ArgumentError
from .synthesis import TOY_RMS, ToySpeakerParams, random_speaker_params, render_toy_speech

WORDS = (
    "the a an one two three red blue green small large quiet loud river stone window garden morning "
    "evening city road music paper letter table market summer winter bright dark early late open "
    "close bring carry follow listen speak travel wonder gather remember simple careful gentle sudden "
    "over under before after between around through across inside outside always never often slowly "
    "quickly together alone happy tired friend teacher doctor farmer painter sailor child mother father "
    "house bridge forest mountain island harbor station kitchen lantern basket ribbon candle mirror"
).split()

NOISE_KINDS = ("white", "pink", "brown", "hum", "babble", "bursts")

# Seed offsets keep every generated population disjoint.
_SEED_TARGET = 1_000
_SEED_GENERALIST = 10_000
_SEED_BABBLE = {"tr": 20_000, "vl": 30_000, "te": 40_000}
_SEED_NOISE = {"tr": 50_000, "vl": 60_000, "te": 70_000}


def make_sentences(count: int, seed: int, min_words: int = 4, max_words: int = 7) -> list[str]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        n = int(rng.integers(min_words, max_words + 1))
        out.append(" ".join(WORDS[int(i)] for i in rng.integers(len(WORDS), size=n)))
    return out


def _scaled(x: np.ndarray, rms: float) -> np.ndarray:
    p = float(np.sqrt(np.mean(x ** 2)))
    return x * (rms / p) if p > 0 else x


def make_noise(kind: str, duration_sec: float, seed: int, babble_pool: int = 0) -> np.ndarray:
    """One noise clip of ``kind`` at RMS 0.05.

    ``babble_pool`` is the seed base for babble voices so that each
    partition can draw from its own set of interfering speakers.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration_sec * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "pink":
        # Paul Kellet's economy filter approximation of 1/f.
        x = lfilter([0.049922035, -0.095993537, 0.050612699, -0.004408786],
                    [1, -2.494956002, 2.017265875, -0.522189400], rng.standard_normal(n))
    elif kind == "brown":
        x = lfilter([1.0], [1, -0.995], rng.standard_normal(n))
        x = x - lfilter([1.0], [1, -0.999], x) * 0.001
    elif kind == "hum":
        f0 = rng.uniform(45, 130)
        drift = 1 + 0.01 * np.sin(2 * np.pi * rng.uniform(0.1, 0.5) * t)
        phase = 2 * np.pi * f0 * np.cumsum(drift) / SAMPLE_RATE
        x = sum(rng.uniform(0.2, 1.0) / k * np.sin(k * phase + rng.uniform(0, 2 * np.pi)) for k in range(1, 30))
        x = x + 0.05 * rng.standard_normal(n)
    elif kind == "babble":
        voices = int(rng.integers(2, 5))
        x = np.zeros(n)
        for v in range(voices):
            params = random_speaker_params(babble_pool + int(rng.integers(200)))
            text = " ".join(make_sentences(3, int(rng.integers(2**31))))
            y = render_toy_speech(params, text, int(rng.integers(2**31)))
            while y.size < n:
                y = np.concatenate([y, y])
            off = int(rng.integers(0, y.size - n + 1))
            x += rng.uniform(0.5, 1.0) * y[off:off + n]
    elif kind == "bursts":
        x = 0.05 * rng.standard_normal(n)
        pos = 0
        while pos < n:
            pos += int(rng.uniform(0.1, 0.6) * SAMPLE_RATE)
            length = int(rng.uniform(0.03, 0.25) * SAMPLE_RATE)
            seg = rng.standard_normal(min(length, max(n - pos, 0)))
            x[pos:pos + seg.size] += seg * np.hanning(seg.size) * rng.uniform(1, 4)
    else:
        raise ArgumentError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    return _scaled(np.asarray(x, dtype=np.float64), TOY_RMS)


@dataclass(frozen=True)
class ToyWorldConfig:
    seed: int = 0
    n_generalist_speakers: int = 40
    generalist_utterances: int = 6
    generalist_vl_fraction: float = 0.1
    n_target_speakers: int = 3
    enrollment_sec: float = 5.0
    target_test_sec: float = 30.0
    noise_clips_per_kind: dict = field(default_factory=lambda: {"tr": 3, "vl": 1, "te": 1})
    noise_sec: float = 10.0
    n_texts: int = 200

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ToyWorld:
    root: Path
    generalist: Manifest
    noise: Manifest
    texts: Manifest
    targets: dict = field(default_factory=dict)  # speaker_id -> (enroll Manifest, test Manifest)
    speaker_params: dict = field(default_factory=dict)

    def enrollment(self, speaker_id: str) -> SpeakerRef:
        enroll = self.targets[speaker_id][0]
        return SpeakerRef(speaker_id, [read_clip(r, enroll.root) for r in enroll.records])

    def test_speech(self, speaker_id: str) -> Manifest:
        return self.targets[speaker_id][1]

    @property
    def target_ids(self) -> list[str]:
        return sorted(self.targets)


def _speech_until(params: ToySpeakerParams, seconds: float, seed: int, texts: list[str]) -> np.ndarray:
    rng = np.random.default_rng(seed)
    parts, total = [], 0
    while total < seconds * SAMPLE_RATE:
        y = render_toy_speech(params, texts[int(rng.integers(len(texts)))], int(rng.integers(2**31)))
        parts.append(y)
        total += y.size
    return np.concatenate(parts)[: int(round(seconds * SAMPLE_RATE))]


def _write(root: Path, rel: str, x: np.ndarray) -> float:
    clip = AudioClip(x)
    write_wav(root / rel, clip)
    return clip.duration_sec


def build_toy_world(out_dir: str | Path, cfg: ToyWorldConfig = ToyWorldConfig()) -> ToyWorld:
    """Generate (or reuse, if already built with the same config) a toy world under ``out_dir``."""
    root = Path(out_dir).resolve()
    stamp = root / "toyworld.json"
    if stamp.exists() and json.loads(stamp.read_text()) == cfg.to_dict():
        return load_toy_world(root)
    root.mkdir(parents=True, exist_ok=True)
    base = cfg.seed * 1_000_003

    sentences = make_sentences(cfg.n_texts, base + 7)
    texts = make_manifest("T", ManifestKind.text, [TextRecord(f"t{i:04d}", s) for i, s in enumerate(sentences)], root)
    write_manifest(texts, root / "T.jsonl")

    recs = []
    vl_every = max(1, round(1 / cfg.generalist_vl_fraction)) if cfg.generalist_vl_fraction > 0 else 0
    k = 0
    for spk in range(cfg.n_generalist_speakers):
        params = random_speaker_params(base + _SEED_GENERALIST + spk)
        for u in range(cfg.generalist_utterances):
            seed = base + _SEED_GENERALIST * 10 + spk * 1000 + u
            y = render_toy_speech(params, sentences[int(np.random.default_rng(seed).integers(len(sentences)))], seed)
            rel = f"G/g{spk:03d}_{u:02d}.wav"
            part = "vl" if vl_every and k % vl_every == vl_every - 1 else "tr"
            recs.append(UtteranceRecord(f"g{spk:03d}_{u:02d}", f"g{spk:03d}", rel, _write(root, rel, y), part))
            k += 1
    generalist = make_manifest("G", ManifestKind.clean_speech, recs, root)
    write_manifest(generalist, root / "G.jsonl")

    recs = []
    for part, count in cfg.noise_clips_per_kind.items():
        for kind in NOISE_KINDS:
            for i in range(count):
                seed = base + _SEED_NOISE[part] + NOISE_KINDS.index(kind) * 100 + i
                y = make_noise(kind, cfg.noise_sec, seed, babble_pool=base + _SEED_BABBLE[part])
                rel = f"N/{part}_{kind}_{i:02d}.wav"
                recs.append(UtteranceRecord(f"n_{part}_{kind}_{i:02d}", f"noise_{kind}", rel, _write(root, rel, y), part))
    noise = make_manifest("N", ManifestKind.noise, recs, root)
    write_manifest(noise, root / "N.jsonl")

    world = ToyWorld(root, generalist, noise, texts)
    for t in range(cfg.n_target_speakers):
        sid = f"s{t:02d}"
        params = random_speaker_params(base + _SEED_TARGET + t)
        world.speaker_params[sid] = params
        enroll_y = _speech_until(params, cfg.enrollment_sec, base + _SEED_TARGET * 7 + t, sentences)
        rel = f"S/{sid}_enroll.wav"
        enroll = make_manifest(f"S_{sid}_enroll", ManifestKind.clean_speech,
                               [UtteranceRecord(f"{sid}_enroll", sid, rel, _write(root, rel, enroll_y))], root)
        recs = []
        te_seed = base + _SEED_TARGET * 13 + t
        rng = np.random.default_rng(te_seed)
        total, u = 0.0, 0
        while total < cfg.target_test_sec:
            y = render_toy_speech(params, sentences[int(rng.integers(len(sentences)))], int(rng.integers(2**31)))
            rel = f"S/{sid}_te_{u:02d}.wav"
            dur = _write(root, rel, y)
            recs.append(UtteranceRecord(f"{sid}_te_{u:02d}", sid, rel, dur, "te"))
            total += dur
            u += 1
        test = make_manifest(f"S_{sid}_te", ManifestKind.clean_speech, recs, root)
        write_manifest(enroll, root / f"S_{sid}_enroll.jsonl")
        write_manifest(test, root / f"S_{sid}_te.jsonl")
        world.targets[sid] = (enroll, test)
    (root / "speakers.json").write_text(json.dumps({k: v.to_json() for k, v in world.speaker_params.items()},
                                                   indent=2, sort_keys=True))
    stamp.write_text(json.dumps(cfg.to_dict(), sort_keys=True))
    return world


def load_toy_world(root: str | Path) -> ToyWorld:
    root = Path(root).resolve()
    world = ToyWorld(root, load_manifest(root / "G.jsonl"), load_manifest(root / "N.jsonl"),
                     load_manifest(root / "T.jsonl"))
    params = json.loads((root / "speakers.json").read_text())
    for sid, p in sorted(params.items()):
        world.speaker_params[sid] = ToySpeakerParams(**{**p, "envelope": tuple(p["envelope"])})
        world.targets[sid] = (load_manifest(root / f"S_{sid}_enroll.jsonl"), load_manifest(root / f"S_{sid}_te.jsonl"))
    return world
