"""Low-level speaker features: autocorrelation f0 and 8-band log energies.

Shared by the simulated synthesis backend (to read a speaker off enrollment
audio) and by the fallback speaker embedding.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import welch

from .audio import SAMPLE_RATE

# Band edges in Hz; the envelope of a toy speaker holds one gain per band.
BAND_EDGES_HZ = (50.0, 250.0, 500.0, 1000.0, 1500.0, 2200.0, 3200.0, 4800.0, 7800.0)
N_BANDS = len(BAND_EDGES_HZ) - 1
BAND_CENTERS_HZ = tuple(float(np.sqrt(lo * hi)) for lo, hi in zip(BAND_EDGES_HZ[:-1], BAND_EDGES_HZ[1:]))

F0_MIN_HZ = 70.0
F0_MAX_HZ = 320.0
_FRAME = 640  # 40 ms
_HOP = 160


def estimate_f0(x: np.ndarray, sr: int = SAMPLE_RATE) -> float | None:
    """Median f0 over voiced frames, or ``None`` if no frame looks periodic.

    Frames whose energy is within 20 dB of the loudest frame are analysed;
    a frame counts as voiced when its normalised autocorrelation peak
    exceeds 0.5. Sub-multiples of the best lag are preferred when they reach
    85% of its correlation, which suppresses octave-down errors.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.size < _FRAME:
        x = np.pad(x, (0, _FRAME - x.size))
    frames = sliding_window_view(x, _FRAME)[::_HOP]
    frames = frames - frames.mean(axis=1, keepdims=True)
    energy = np.sum(frames ** 2, axis=1)
    if energy.max() <= 0:
        return None
    frames = frames[energy >= energy.max() * 1e-2]
    nfft = 2048
    spec = np.fft.rfft(frames * np.hanning(_FRAME), n=nfft, axis=1)
    ac = np.fft.irfft(np.abs(spec) ** 2, n=nfft, axis=1)[:, :_FRAME]
    # Undo the taper of the windowed autocorrelation.
    win_ac = np.fft.irfft(np.abs(np.fft.rfft(np.hanning(_FRAME), n=nfft)) ** 2, n=nfft)[:_FRAME]
    ac = ac / np.maximum(win_ac, 1e-12)
    ac = ac / np.maximum(ac[:, :1], 1e-12)
    lo, hi = int(sr / F0_MAX_HZ), int(np.ceil(sr / F0_MIN_HZ))
    seg = ac[:, lo:hi + 1]
    f0s = []
    for row in seg:
        best = int(np.argmax(row))
        r_best = row[best]
        if r_best < 0.5:
            continue
        for k in (4, 3, 2):
            cand = int(round((best + lo) / k)) - lo
            if cand >= 1:
                window = row[max(cand - 2, 0):cand + 3]
                j = int(np.argmax(window)) + max(cand - 2, 0)
                if row[j] >= 0.85 * r_best:
                    best = j
                    break
        lag = best + lo
        if 1 <= best < row.size - 1:
            a, b, c = row[best - 1], row[best], row[best + 1]
            denom = a - 2 * b + c
            if denom < 0:
                lag = lag + 0.5 * (a - c) / denom
        f0s.append(sr / lag)
    if not f0s:
        return None
    return float(np.median(f0s))


def band_log_energies(x: np.ndarray, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Mean power spectral density per band, in dB."""
    x = np.asarray(x, dtype=np.float64)
    nperseg = min(1024, x.size)
    freqs, psd = welch(x, fs=sr, nperseg=nperseg)
    out = np.empty(N_BANDS)
    for b in range(N_BANDS):
        sel = (freqs >= BAND_EDGES_HZ[b]) & (freqs < BAND_EDGES_HZ[b + 1])
        out[b] = 10 * np.log10(np.mean(psd[sel]) + 1e-20)
    return out


def syllable_rate(x: np.ndarray, sr: int = SAMPLE_RATE, lo: float = 2.0, hi: float = 8.0) -> float:
    """Dominant energy-modulation frequency in ``[lo, hi]`` Hz."""
    hop = sr // 100
    n = x.size // hop
    if n < 16:
        return (lo + hi) / 2
    env = np.sqrt(np.mean(np.asarray(x[: n * hop]).reshape(n, hop) ** 2, axis=1))
    env = env - env.mean()
    nfft = max(1024, 1 << int(np.ceil(np.log2(n))))
    mag = np.abs(np.fft.rfft(env * np.hanning(n), n=nfft))
    freqs = np.fft.rfftfreq(nfft, d=0.01)
    sel = (freqs >= lo) & (freqs <= hi)
    return float(freqs[sel][np.argmax(mag[sel])])
