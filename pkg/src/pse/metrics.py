"""Objective evaluation: SDR, SDRI, eSTOI, speaker similarity, external adapters.

PESQ and neural MOS estimation are only ever delegated to external tools via
command templates; when no tool is configured their values are absent
(``None``), never zero.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import re
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.signal import resample_poly

from .audio import SAMPLE_RATE, AudioClip, write_wav
from .errors import ArgumentError, BackendError, BackendTimeoutError, NumericError
from .features import band_log_energies, estimate_f0

log = logging.getLogger(__name__)

SDR_CAP_DB = 80.0


def _arr(v) -> np.ndarray:
    return v.samples if isinstance(v, AudioClip) else np.asarray(v, dtype=np.float64).reshape(-1)


# --------------------------------------------------------------------------- SDR


def sdr(estimate, reference) -> float:
    """``10 log10(sum v^2 / sum (v - v_hat)^2)`` in dB, capped at +80 dB."""
    v_hat, v = _arr(estimate), _arr(reference)
    if v_hat.shape != v.shape:
        raise ArgumentError(f"length mismatch: {v_hat.size} vs {v.size}")
    p_ref = float(np.sum(v ** 2))
    if not p_ref > 0:
        raise ArgumentError("reference has zero power")
    p_res = float(np.sum((v - v_hat) ** 2))
    if p_res <= p_ref * 10 ** (-SDR_CAP_DB / 10):
        return SDR_CAP_DB
    return 10.0 * math.log10(p_ref / p_res)


def sdri(estimate, reference, mixture) -> float:
    """SDR improvement of ``estimate`` over the unprocessed ``mixture``."""
    if _arr(mixture).shape != _arr(reference).shape:
        raise ArgumentError("mixture and reference lengths differ")
    return sdr(estimate, reference) - sdr(mixture, reference)


# ------------------------------------------------------------------------- eSTOI

ESTOI_FS = 10000
ESTOI_FRAME = 256
ESTOI_HOP = 128
ESTOI_NFFT = 512
ESTOI_BANDS = 15
ESTOI_MIN_CF = 150.0
ESTOI_SEGMENT = 30  # frames: 384 ms
ESTOI_DYN_RANGE = 40.0
ESTOI_MIN_SAMPLES = int(np.ceil(((ESTOI_SEGMENT - 1) * ESTOI_HOP + ESTOI_FRAME) * SAMPLE_RATE / ESTOI_FS))


@lru_cache(maxsize=1)
def _third_octave_matrix() -> np.ndarray:
    """Binary (bands x bins) matrix grouping FFT bins into 1/3-octave bands."""
    freqs = np.linspace(0, ESTOI_FS, ESTOI_NFFT + 1)[: ESTOI_NFFT // 2 + 1]
    k = np.arange(ESTOI_BANDS)
    cf = ESTOI_MIN_CF * 2.0 ** (k / 3.0)
    lo_edges = ESTOI_MIN_CF * 2.0 ** ((2 * k - 1) / 6.0)
    hi_edges = ESTOI_MIN_CF * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((ESTOI_BANDS, freqs.size))
    for b in range(ESTOI_BANDS):
        lo = int(np.argmin((freqs - lo_edges[b]) ** 2))
        hi = int(np.argmin((freqs - hi_edges[b]) ** 2))
        obm[b, lo:hi] = 1.0
    del cf
    return obm


def _window() -> np.ndarray:
    return np.hanning(ESTOI_FRAME + 2)[1:-1]


def _frames(x: np.ndarray) -> np.ndarray:
    return sliding_window_view(x, ESTOI_FRAME)[::ESTOI_HOP]


def _drop_silent_frames(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Remove frames more than 40 dB below the loudest reference frame, then overlap-add."""
    w = _window()
    xf, yf = _frames(x) * w, _frames(y) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = energy > energy.max() - ESTOI_DYN_RANGE
    xf, yf = xf[keep], yf[keep]
    n = xf.shape[0]
    length = (n - 1) * ESTOI_HOP + ESTOI_FRAME if n else 0
    xs, ys = np.zeros(length), np.zeros(length)
    for i in range(n):
        sl = slice(i * ESTOI_HOP, i * ESTOI_HOP + ESTOI_FRAME)
        xs[sl] += xf[i]
        ys[sl] += yf[i]
    return xs, ys


def _band_envelopes(x: np.ndarray) -> np.ndarray:
    frames = _frames(x) * _window()
    spec = np.fft.rfft(frames, n=ESTOI_NFFT, axis=1)
    return np.sqrt(_third_octave_matrix() @ (np.abs(spec) ** 2).T)  # (bands, frames)


def _normalize(a: np.ndarray, axis: int) -> np.ndarray:
    a = a - a.mean(axis=axis, keepdims=True)
    norm = np.linalg.norm(a, axis=axis, keepdims=True)
    return np.divide(a, norm, out=np.zeros_like(a), where=norm > 0)


def estoi(estimate, reference) -> float:
    """Extended short-time objective intelligibility of ``estimate`` against ``reference``.

    Both signals are resampled to 10 kHz, frames where the reference is
    more than 40 dB below its peak are dropped, and 1/3-octave band
    envelopes (15 bands from 150 Hz) are cut into 384 ms segments. Each
    segment is normalised to zero mean / unit norm along time per band and
    then along bands per frame; the score is the mean inner product of the
    normalised spectra.
    """
    y, x = _arr(estimate), _arr(reference)
    if y.shape != x.shape:
        raise ArgumentError(f"length mismatch: {y.size} vs {x.size}")
    if x.size < ESTOI_MIN_SAMPLES:
        raise ArgumentError(
            f"eSTOI needs at least {ESTOI_MIN_SAMPLES} samples "
            f"({ESTOI_MIN_SAMPLES / SAMPLE_RATE * 1000:.1f} ms at 16 kHz, {ESTOI_SEGMENT} analysis frames); got {x.size}"
        )
    x = resample_poly(x, 5, 8, window=("kaiser", 5.0))
    y = resample_poly(y, 5, 8, window=("kaiser", 5.0))
    x, y = _drop_silent_frames(x, y)
    if x.size < (ESTOI_SEGMENT - 1) * ESTOI_HOP + ESTOI_FRAME:
        raise ArgumentError(
            f"eSTOI needs at least {ESTOI_SEGMENT} non-silent analysis frames (384 ms of speech)"
        )
    xe, ye = _band_envelopes(x), _band_envelopes(y)
    # (segments, bands, frames)
    xs = sliding_window_view(xe, ESTOI_SEGMENT, axis=1).transpose(1, 0, 2)
    ys = sliding_window_view(ye, ESTOI_SEGMENT, axis=1).transpose(1, 0, 2)
    xn = _normalize(_normalize(xs, axis=2), axis=1)
    yn = _normalize(_normalize(ys, axis=2), axis=1)
    return float(np.sum(xn * yn) / (ESTOI_SEGMENT * xs.shape[0]))


# ------------------------------------------------------------- external adapters

_FLOAT_RE = re.compile(r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?")


@dataclass(frozen=True)
class CommandAdapter:
    """Shell command template with ``{ref_wav}``, ``{deg_wav}`` and ``{out_txt}`` placeholders.

    The tool must write its result as whitespace-separated decimal numbers
    to ``{out_txt}``; if that file is empty or missing, stdout is parsed
    instead. Scalar adapters use the first number, embedding adapters use
    all of them.
    """

    name: str
    command: str
    timeout_sec: float = 120.0

    @classmethod
    def from_env(cls, var: str, name: str | None = None) -> "CommandAdapter | None":
        cmd = os.environ.get(var)
        return cls(name or var.lower(), cmd) if cmd else None

    def run(self, ref: AudioClip | None, deg: AudioClip | None) -> list[float]:
        with tempfile.TemporaryDirectory(prefix="pse-adapter-") as tmp:
            tmp = Path(tmp)
            ref_wav, deg_wav, out_txt = tmp / "ref.wav", tmp / "deg.wav", tmp / "out.txt"
            if ref is not None:
                write_wav(ref_wav, ref)
            if deg is not None:
                write_wav(deg_wav, deg)
            cmd = self.command.format(ref_wav=shlex.quote(str(ref_wav)), deg_wav=shlex.quote(str(deg_wav)),
                                      out_txt=shlex.quote(str(out_txt)))
            try:
                proc = subprocess.run(cmd, shell=True, capture_output=True, text=True, timeout=self.timeout_sec)
            except subprocess.TimeoutExpired as e:
                raise BackendTimeoutError(f"{self.name}: timed out after {self.timeout_sec}s") from e
            diag = f"command: {cmd}\nexit: {proc.returncode}\nstdout: {proc.stdout}\nstderr: {proc.stderr}"
            if proc.returncode != 0:
                raise BackendError(f"{self.name}: exit code {proc.returncode}", diag)
            text = out_txt.read_text() if out_txt.exists() else ""
            if not text.strip():
                text = proc.stdout
            values = [float(t) for t in _FLOAT_RE.findall(text)]
            if not values or not all(np.isfinite(values)):
                raise BackendError(f"{self.name}: no numeric output", diag)
            return values


def pesq_adapter(estimate, reference, adapter: CommandAdapter | None = None) -> float | None:
    """Wideband PESQ from an external tool, or ``None`` when unavailable or failing.

    Without an explicit adapter the ``PSE_PESQ_CMD`` environment variable is
    consulted.
    """
    adapter = adapter or CommandAdapter.from_env("PSE_PESQ_CMD", "pesq")
    if adapter is None:
        return None
    try:
        value = adapter.run(_clip(reference), _clip(estimate))[0]
    except BackendError as e:
        log.warning("PESQ adapter failed: %s", e)
        return None
    if not -0.5 <= value <= 4.5:
        log.warning("PESQ adapter returned out-of-range value %r; ignoring", value)
        return None
    return value


def mos_estimate(clip: AudioClip, adapter: CommandAdapter | None) -> float | None:
    """Non-intrusive MOS estimate of one clip (passed as ``{deg_wav}``)."""
    if adapter is None:
        return None
    try:
        return adapter.run(None, clip)[0]
    except BackendError as e:
        log.warning("MOS adapter failed: %s", e)
        return None


def _clip(v) -> AudioClip:
    return v if isinstance(v, AudioClip) else AudioClip(np.asarray(v, dtype=np.float64))


# ------------------------------------------------------------ speaker similarity

# Population statistics of the fallback features over random toy speakers.
_EMBED_MEAN = np.array([5.025, 0.179, 4.824, 5.142, 1.454, 0.869, -1.333, -3.912, -7.222])
_EMBED_STD = np.array([0.343, 5.989, 4.731, 4.75, 4.967, 4.823, 4.911, 4.301, 5.371])

FALLBACK_EXTRACTOR = "fallback"


@dataclass(frozen=True)
class SpeakerEmbedding:
    vector: np.ndarray
    extractor_id: str

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise NumericError("speaker embedding is not finite")
        if not np.linalg.norm(v) > 0:
            raise NumericError("speaker embedding has zero norm")
        object.__setattr__(self, "vector", v)


def fallback_embedding(clip: AudioClip) -> SpeakerEmbedding:
    """z-normalised [log f0, 8 mean-removed band log energies].

    Unvoiced input contributes the population-mean f0 (a zero coordinate).
    """
    x = _arr(clip)
    f0 = estimate_f0(x)
    bands = band_log_energies(x)
    raw = np.concatenate([[np.log(f0) if f0 else _EMBED_MEAN[0]], bands - bands.mean()])
    return SpeakerEmbedding((raw - _EMBED_MEAN) / _EMBED_STD, FALLBACK_EXTRACTOR)


@dataclass(frozen=True)
class EmbeddingAdapter:
    """Pretrained speaker encoder behind a :class:`CommandAdapter` (clip passed as ``{ref_wav}``)."""

    adapter: CommandAdapter

    @property
    def extractor_id(self) -> str:
        return self.adapter.name

    def embed(self, clip: AudioClip) -> SpeakerEmbedding:
        return SpeakerEmbedding(np.array(self.adapter.run(clip, clip)), self.adapter.name)


def embed(clip: AudioClip, extractor=FALLBACK_EXTRACTOR) -> SpeakerEmbedding:
    if extractor == FALLBACK_EXTRACTOR or extractor is None:
        return fallback_embedding(clip)
    return extractor.embed(clip)


def cosine(a: SpeakerEmbedding | np.ndarray, b: SpeakerEmbedding | np.ndarray) -> float:
    va = a.vector if isinstance(a, SpeakerEmbedding) else np.asarray(a, dtype=np.float64)
    vb = b.vector if isinstance(b, SpeakerEmbedding) else np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(va), np.linalg.norm(vb)
    if not (na > 0 and nb > 0):
        raise NumericError("cannot take the cosine of a zero-norm embedding")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))


def speaker_similarity(a: AudioClip, b: AudioClip, extractor=FALLBACK_EXTRACTOR) -> float:
    """Cosine similarity of the two clips' speaker embeddings."""
    for c in (a, b):
        if c.duration_sec < 1.0:
            raise ArgumentError(f"speaker similarity needs clips of at least 1 s, got {c.duration_sec:.3f}s")
    return cosine(embed(a, extractor), embed(b, extractor))


# ------------------------------------------------------- synthesis-quality table


@dataclass
class QualityRow:
    subset: str
    mos_estimate: float | None
    mean_cosine: float
    n_utterances: int = 0


@dataclass
class QualityTable:
    rows: list = field(default_factory=list)

    @property
    def has_mos(self) -> bool:
        return any(r.mos_estimate is not None for r in self.rows)

    def to_markdown(self) -> str:
        """Markdown table; the best value of each column is bold."""
        cols = (["MOS (est.)"] if self.has_mos else []) + ["Cosine Similarity"]
        lines = ["| Subset | " + " | ".join(cols) + " |", "|:--|" + "--:|" * len(cols)]
        best_mos = max((r.mos_estimate for r in self.rows if r.mos_estimate is not None), default=None)
        best_cos = max((round(r.mean_cosine, 2) for r in self.rows), default=None)
        for r in self.rows:
            cells = []
            if self.has_mos:
                cells.append("n/a" if r.mos_estimate is None else _bold(f"{r.mos_estimate:.2f}",
                                                                         round(r.mos_estimate, 2) == round(best_mos, 2)))
            cells.append(_bold(f"{r.mean_cosine:.2f}", round(r.mean_cosine, 2) == best_cos))
            lines.append(f"| {r.subset} | " + " | ".join(cells) + " |")
        return "\n".join(lines) + "\n"


def _bold(text: str, on: bool) -> str:
    return f"**{text}**" if on else text


def assess_synthesis_quality(synth, enrollment, mos_adapter: CommandAdapter | None = None,
                             extractor=FALLBACK_EXTRACTOR, subset_label: str | None = None,
                             loader=None) -> QualityTable:
    """Mean estimated MOS and mean speaker cosine per subset of a synthesized manifest.

    Subsets are the manifest's backend tags, labelled with the mean
    synthesized duration per speaker (``"<tag>; 21 sec."``). ``enrollment`` is one
    :class:`SpeakerRef` or a mapping from speaker id to :class:`SpeakerRef`.
    The MOS column is absent (``None``) when no adapter is given or every
    call fails.
    """
    from .corpus import read_clip  # local: corpus imports nothing from here

    if not synth.records:
        raise ArgumentError("synthesized manifest is empty")
    refs = enrollment if isinstance(enrollment, Mapping) else None
    ref_cache: dict[str, SpeakerEmbedding] = {}

    def ref_embedding(speaker_id: str) -> SpeakerEmbedding:
        if speaker_id not in ref_cache:
            spk = refs[speaker_id] if refs is not None else enrollment
            ref_cache[speaker_id] = embed(spk.concatenated(), extractor)
        return ref_cache[speaker_id]

    groups: dict[str, list] = {}
    for r in synth.records:
        groups.setdefault(r.backend_tag or synth.name, []).append(r)
    table = QualityTable()
    for tag, records in groups.items():
        cosines, moses = [], []
        for r in records:
            clip = loader(synth, r) if loader else read_clip(r, synth.root)
            cosines.append(cosine(embed(clip, extractor), ref_embedding(r.speaker_id)))
            m = mos_estimate(clip, mos_adapter)
            if m is not None:
                moses.append(m)
        per_speaker = sum(r.duration_sec for r in records) / len({r.speaker_id for r in records})
        label = subset_label if subset_label and len(groups) == 1 else f"{tag}; {per_speaker:.0f} sec."
        table.rows.append(QualityRow(label, float(np.mean(moses)) if moses else None,
                                     float(np.mean(cosines)), len(records)))
    return table


# ------------------------------------------------------------------- EvalReport


@dataclass
class EvalRow:
    utterance_id: str
    sdr_db: float
    sdri_db: float
    estoi: float | None
    pesq: float | None = None


METRIC_COLUMNS = ("sdr_db", "sdri_db", "estoi", "pesq")


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    condition_tags: dict = field(default_factory=dict)

    @property
    def aggregates(self) -> dict:
        """Arithmetic means per metric over rows where the metric is present."""
        out = {}
        for col in METRIC_COLUMNS:
            vals = [getattr(r, col) for r in self.rows if getattr(r, col) is not None]
            if vals:
                out[col] = float(np.mean(vals))
        return out

    def check(self) -> None:
        for r in self.rows:
            if r.estoi is not None and not -1.0 <= r.estoi <= 1.0:
                raise NumericError(f"{r.utterance_id}: eSTOI {r.estoi} outside [-1, 1]")
            if r.pesq is not None and not -0.5 <= r.pesq <= 4.5:
                raise NumericError(f"{r.utterance_id}: PESQ {r.pesq} outside [-0.5, 4.5]")

    def to_csv(self, path: str | Path) -> Path:
        self.check()
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(("utterance_id",) + METRIC_COLUMNS)
            for r in self.rows:
                w.writerow([r.utterance_id] + ["" if getattr(r, c) is None else repr(getattr(r, c))
                                               for c in METRIC_COLUMNS])
        return path

    def to_json(self) -> dict:
        self.check()
        return {"aggregates": self.aggregates, "condition_tags": self.condition_tags, "n": len(self.rows)}

    def save(self, stem: str | Path) -> tuple[Path, Path]:
        stem = Path(stem)
        csv_path = self.to_csv(stem.with_suffix(".csv"))
        json_path = stem.with_suffix(".json")
        json_path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True), encoding="utf-8")
        return csv_path, json_path


def evaluate(estimates: Sequence, mixtures: Sequence, ids: Sequence[str] | None = None,
             pesq: CommandAdapter | None = None, with_estoi: bool = True,
             condition_tags: Mapping | None = None) -> EvalReport:
    """Score enhanced signals against the clean references of ``mixtures``."""
    if len(estimates) != len(mixtures):
        raise ArgumentError("one estimate per mixture is required")
    report = EvalReport(condition_tags=dict(condition_tags or {}))
    for i, (y, m) in enumerate(zip(estimates, mixtures)):
        uid = ids[i] if ids is not None else f"{i:05d}"
        s, x = m.s.samples, m.x.samples
        report.rows.append(EvalRow(
            utterance_id=uid,
            sdr_db=sdr(y, s),
            sdri_db=sdri(y, s, x),
            estoi=estoi(y, s) if with_estoi else None,
            pesq=pesq_adapter(y, s, pesq) if pesq is not None else None,
        ))
    report.check()
    return report
