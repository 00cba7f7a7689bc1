"""AudioClip and WAV input/output.

Every clip inside the toolkit is mono at 16 kHz. Files at other rates are
resampled on load with a polyphase windowed-sinc filter
(``scipy.signal.resample_poly``, Kaiser window, beta = 5.0); multi-channel
files are downmixed by the channel mean.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ArgumentError, AudioIOError

SAMPLE_RATE = 16000
RESAMPLE_WINDOW = ("kaiser", 5.0)


@dataclass(frozen=True, eq=False)
class AudioClip:
    """Mono waveform at 16 kHz, stored as float64.

    Amplitudes are nominally in [-1, 1]; the constructor enforces finiteness
    and a non-empty signal but leaves the range to producers (model outputs
    may legitimately overshoot).
    """

    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64).reshape(-1)
        if arr.size < 1:
            raise ArgumentError("an AudioClip needs at least one sample")
        if not np.all(np.isfinite(arr)):
            raise ArgumentError("AudioClip samples must be finite")
        if self.sample_rate_hz != SAMPLE_RATE:
            raise ArgumentError(f"AudioClip must be {SAMPLE_RATE} Hz, got {self.sample_rate_hz}")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_sec(self) -> float:
        return self.samples.size / self.sample_rate_hz

    @property
    def power(self) -> float:
        return float(np.mean(self.samples ** 2))


def resample(x: np.ndarray, orig_sr: int, target_sr: int = SAMPLE_RATE) -> np.ndarray:
    if orig_sr == target_sr:
        return np.asarray(x, dtype=np.float64)
    ratio = Fraction(target_sr, orig_sr)
    return resample_poly(np.asarray(x, dtype=np.float64), ratio.numerator, ratio.denominator,
                         axis=0, window=RESAMPLE_WINDOW)


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if np.issubdtype(data.dtype, np.integer):
        return data.astype(np.float64) / float(-np.iinfo(data.dtype).min)
    return data.astype(np.float64)


def read_wav(path: str | Path, record_id: str | None = None) -> AudioClip:
    """Load a PCM/float WAV file as a 16 kHz mono clip."""
    try:
        sr, data = wavfile.read(str(path))
    except (OSError, ValueError, EOFError) as e:
        raise AudioIOError(f"cannot read WAV {path}: {e}", record_id) from e
    x = _to_float(data)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise AudioIOError(f"WAV {path} holds no samples", record_id)
    x = resample(x, sr)
    if not np.all(np.isfinite(x)):
        raise AudioIOError(f"WAV {path} contains non-finite samples", record_id)
    return AudioClip(x)


def write_wav(path: str | Path, clip: AudioClip | np.ndarray, sample_rate: int = SAMPLE_RATE) -> Path:
    """Write 16-bit PCM mono. Samples beyond full scale are clipped."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    pcm = np.round(np.clip(x, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)
    return path


def rms_normalize(clip: AudioClip, target_rms: float = 0.05) -> AudioClip:
    rms = np.sqrt(clip.power)
    if rms <= 0:
        return clip
    y = clip.samples * (target_rms / rms)
    peak = np.max(np.abs(y))
    if peak > 1.0:
        y = y / peak
    return AudioClip(y)
