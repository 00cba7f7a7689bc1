"""Noisy-mixture simulation ``x = s + g * n`` at a prescribed segment SNR."""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .audio import SAMPLE_RATE, AudioClip, write_wav
from .corpus import Manifest, UtteranceRecord, read_clip
from .errors import ArgumentError, DegenerateSourceError, PseError

DEFAULT_SNR_RANGE = (-5.0, 5.0)
DEFAULT_SEGMENT_SEC = 4.0
SILENCE_POWER = 1e-8
DEGENERATE_POWER = 1e-12
MAX_OFFSET_RETRIES = 10
CROSSFADE_SEC = 0.010
PEAK_LIMIT = 1.0


@dataclass(frozen=True)
class MixtureSpec:
    clean_id: str
    noise_id: str
    snr_db: float
    seed: int
    clean_offset_sec: float
    noise_offset_sec: float
    segment_sec: float

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True, eq=False)
class Mixture:
    x: AudioClip
    s: AudioClip
    n_scaled: AudioClip
    spec: MixtureSpec
    gain: float
    rescale: float = 1.0

    @property
    def realized_snr_db(self) -> float:
        return float(10 * np.log10(np.sum(self.s.samples ** 2) / np.sum(self.n_scaled.samples ** 2)))


def gain_for_snr(clean_power: float, noise_power: float, snr_db: float) -> float:
    """Noise gain ``g`` such that ``10 log10(P_s / (g^2 P_n)) == snr_db``."""
    if not noise_power >= DEGENERATE_POWER:
        raise DegenerateSourceError(f"noise power {noise_power:.3g} is (near) zero")
    if not clean_power >= DEGENERATE_POWER:
        raise DegenerateSourceError(f"clean power {clean_power:.3g} is (near) zero")
    return float(np.sqrt(clean_power / (noise_power * 10.0 ** (snr_db / 10.0))))


def loop_segment(n: np.ndarray, offset: int, length: int, crossfade: int) -> np.ndarray:
    """Read ``length`` samples of ``n`` from ``offset``, wrapping around.

    The loop point is smoothed with a linear crossfade of ``crossfade``
    samples: the tail of the clip is faded into its head so the cyclic buffer
    has no discontinuity.
    """
    if n.size > 2 * crossfade and crossfade > 0:
        period = n.size - crossfade
        ramp = (np.arange(crossfade) + 0.5) / crossfade
        cyc = n[:period].copy()
        cyc[:crossfade] = n[:crossfade] * ramp + n[period:] * (1.0 - ramp)
    else:
        cyc = n
        period = n.size
    return cyc[(offset + np.arange(length)) % period]


def mix_at_snr(s: AudioClip, n: AudioClip, snr_db: float, segment_sec: float = DEFAULT_SEGMENT_SEC,
               seed: int = 0, clean_id: str = "", noise_id: str = "") -> Mixture:
    """Crop speech and noise to one segment and mix them at ``snr_db``.

    The SNR is measured as the ratio of mean powers over the whole cropped
    segment. Noise shorter than the segment is looped. If the mixture peaks
    above full scale all three signals are scaled down together, which keeps
    both the SNR and ``x == s + n_scaled`` exact.
    """
    if s.sample_rate_hz != SAMPLE_RATE or n.sample_rate_hz != SAMPLE_RATE:
        raise ArgumentError("both sources must be 16 kHz")
    if not segment_sec > 0:
        raise ArgumentError("segment_sec must be positive")
    seg = int(round(segment_sec * SAMPLE_RATE))
    if len(s) < seg:
        raise ArgumentError(f"speech {clean_id or ''} is {s.duration_sec:.3f}s, shorter than the {segment_sec}s segment")
    xfade = int(round(CROSSFADE_SEC * SAMPLE_RATE))
    rng = np.random.default_rng(seed)
    s_all, n_all = s.samples, n.samples
    for _ in range(MAX_OFFSET_RETRIES + 1):
        c_off = int(rng.integers(0, len(s) - seg + 1))
        if len(n) >= seg:
            n_off = int(rng.integers(0, len(n) - seg + 1))
            n_seg = n_all[n_off:n_off + seg]
        else:
            n_off = int(rng.integers(0, len(n)))
            n_seg = loop_segment(n_all, n_off, seg, xfade)
        s_seg = s_all[c_off:c_off + seg]
        ps, pn = float(np.mean(s_seg ** 2)), float(np.mean(n_seg ** 2))
        if ps >= SILENCE_POWER and pn >= SILENCE_POWER:
            break
    else:
        which = "noise" if pn < SILENCE_POWER else "speech"
        raise DegenerateSourceError(
            f"{which} segment stayed silent after {MAX_OFFSET_RETRIES} offset retries"
            f" (speech power {ps:.3g}, noise power {pn:.3g})"
        )
    g = gain_for_snr(ps, pn, snr_db)
    s_out = s_seg.copy()
    n_out = g * n_seg
    x = s_out + n_out
    rescale = 1.0
    peak = float(np.max(np.abs(x)))
    if peak > PEAK_LIMIT:
        rescale = PEAK_LIMIT / peak
        s_out = s_out * rescale
        n_out = n_out * rescale
        x = s_out + n_out
    spec = MixtureSpec(
        clean_id=clean_id, noise_id=noise_id, snr_db=float(snr_db), seed=int(seed),
        clean_offset_sec=c_off / SAMPLE_RATE, noise_offset_sec=n_off / SAMPLE_RATE,
        segment_sec=float(segment_sec),
    )
    return Mixture(AudioClip(x), AudioClip(s_out), AudioClip(n_out), spec, g, rescale)


ClipLoader = Callable[[Manifest, UtteranceRecord], AudioClip]


class CachedLoader:
    """Reads each manifest record at most once."""

    def __init__(self, normalize_rms: float | None = None):
        self.normalize_rms = normalize_rms
        self._cache: dict[str, AudioClip] = {}

    def __call__(self, manifest: Manifest, record: UtteranceRecord) -> AudioClip:
        key = str(manifest.resolve(record))
        clip = self._cache.get(key)
        if clip is None:
            clip = read_clip(record, manifest.root, normalize_rms=self.normalize_rms)
            self._cache[key] = clip
        return clip


class MixtureStream(Sequence):
    """Lazy, indexable sequence of seeded mixtures.

    Item ``i`` depends only on ``(seed, i)`` and the manifests, so items can
    be produced in any order or in parallel and always come out identical.
    """

    def __init__(self, speech: Manifest, noise: Manifest, count: int,
                 snr_range: tuple[float, float] = DEFAULT_SNR_RANGE,
                 segment_sec: float = DEFAULT_SEGMENT_SEC, seed: int = 0,
                 loader: ClipLoader | None = None):
        if count < 0:
            raise ArgumentError("count must be >= 0")
        if not speech.records or not noise.records:
            raise ArgumentError("speech and noise manifests must be non-empty")
        lo, hi = snr_range
        if lo > hi:
            raise ArgumentError(f"invalid snr_range {snr_range}")
        self.speech = speech
        self.noise = noise
        self.count = int(count)
        self.snr_range = (float(lo), float(hi))
        self.segment_sec = float(segment_sec)
        self.seed = int(seed)
        self.loader = loader or CachedLoader()
        self._eligible = [r for r in speech.records if r.duration_sec >= segment_sec - 0.5 / SAMPLE_RATE]
        if not self._eligible:
            raise ArgumentError(f"no speech record in {speech.name} is at least {segment_sec}s long")

    def __len__(self) -> int:
        return self.count

    def draw(self, index: int) -> tuple[UtteranceRecord, UtteranceRecord, float, int]:
        """The (speech record, noise record, snr, mixing seed) for item ``index``."""
        rng = np.random.default_rng(np.random.SeedSequence([self.seed % 2**63, index]))
        clean = self._eligible[int(rng.integers(len(self._eligible)))]
        noise = self.noise.records[int(rng.integers(len(self.noise.records)))]
        snr = float(rng.uniform(*self.snr_range))
        mix_seed = int(rng.integers(2**62))
        return clean, noise, snr, mix_seed

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(self.count))]
        if index < 0:
            index += self.count
        if not 0 <= index < self.count:
            raise IndexError(index)
        clean, noise, snr, mix_seed = self.draw(index)
        try:
            return mix_at_snr(
                self.loader(self.speech, clean), self.loader(self.noise, noise), snr,
                self.segment_sec, mix_seed, clean_id=clean.id, noise_id=noise.id,
            )
        except PseError as e:
            e.index = index
            e.args = (f"mixture {index}: {e.args[0] if e.args else e}",) + e.args[1:]
            raise


def mixture_stream(speech: Manifest, noise: Manifest, count: int,
                   snr_range: tuple[float, float] = DEFAULT_SNR_RANGE,
                   segment_sec: float = DEFAULT_SEGMENT_SEC, seed: int = 0,
                   loader: ClipLoader | None = None) -> MixtureStream:
    return MixtureStream(speech, noise, count, snr_range, segment_sec, seed, loader)


def write_mixtures(mixtures, out_dir: str | Path) -> Path:
    """Write ``x/s/n`` WAV triplets and a ``specs.jsonl`` file; returns the specs path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = out_dir / "specs.jsonl"
    with specs.open("w", encoding="utf-8") as f:
        for i, m in enumerate(mixtures):
            stem = f"{i:06d}"
            write_wav(out_dir / f"{stem}_x.wav", m.x)
            write_wav(out_dir / f"{stem}_s.wav", m.s)
            write_wav(out_dir / f"{stem}_n.wav", m.n_scaled)
            row = {"index": i, **m.spec.to_json(), "gain": m.gain, "rescale": m.rescale}
            f.write(json.dumps(row) + "\n")
    return specs
