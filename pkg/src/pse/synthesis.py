"""Speech-synthesis backends and augmented-set construction.

Two backend kinds exist. ``external_command`` wraps any off-the-shelf TTS
through a shell command template with ``{text_file}``, ``{ref_wav}`` and
``{out_wav}`` placeholders. ``simulated`` is a parametric toy voice: it reads a
speaker's f0, spectral envelope and speaking rate off the enrollment audio,
blends those parameters with a distractor speaker according to a fidelity
knob, and renders harmonic "phoneme" sequences from text.
"""

from __future__ import annotations

import hashlib
import logging
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.ndimage import uniform_filter1d

from .audio import SAMPLE_RATE, AudioClip, read_wav, write_wav
from .corpus import (
    Manifest,
    ManifestKind,
    SpeakerRef,
    TextRecord,
    UtteranceRecord,
    write_manifest,
)
from .errors import ArgumentError, AudioIOError, BackendError, BackendTimeoutError
from .features import BAND_CENTERS_HZ, N_BANDS, band_log_energies, estimate_f0, syllable_rate

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_SEC = 120.0
MAX_RETRIES = 3
TOY_RMS = 0.05
F0_RANGE = (80.0, 300.0)
RATE_RANGE = (2.0, 8.0)

_VOWEL_FORMANTS = {"a": (750, 1200), "e": (500, 1900), "i": (300, 2300), "o": (500, 900), "u": (350, 800)}
_VOICED = set("bdgjlmnrvwyz")
_UNVOICED = set("cfhkpqstx")


@dataclass(frozen=True)
class ToySpeakerParams:
    f0_hz: float
    envelope: tuple
    rate_units_per_sec: float
    identity_seed: int = 0

    def __post_init__(self):
        env = tuple(float(v) for v in self.envelope)
        object.__setattr__(self, "envelope", env)
        if len(env) != N_BANDS:
            raise ArgumentError(f"envelope needs {N_BANDS} band gains, got {len(env)}")
        if not all(np.isfinite(env)) or min(env) < 0 or max(env) > 1:
            raise ArgumentError("envelope gains must be finite and in [0, 1]")
        if not F0_RANGE[0] <= self.f0_hz <= F0_RANGE[1]:
            raise ArgumentError(f"f0_hz {self.f0_hz} outside {F0_RANGE}")
        if not RATE_RANGE[0] <= self.rate_units_per_sec <= RATE_RANGE[1]:
            raise ArgumentError(f"rate {self.rate_units_per_sec} outside {RATE_RANGE}")

    def to_json(self) -> dict:
        return {"f0_hz": self.f0_hz, "envelope": list(self.envelope),
                "rate_units_per_sec": self.rate_units_per_sec, "identity_seed": self.identity_seed}


def random_speaker_params(seed: int) -> ToySpeakerParams:
    """Draw a toy speaker: log-uniform f0, random band envelope, uniform rate."""
    rng = np.random.default_rng(np.random.SeedSequence([7919, seed % 2**63]))
    f0 = float(np.exp(rng.uniform(np.log(85.0), np.log(280.0))))
    gains = np.exp(rng.normal(0.0, 0.9, N_BANDS))
    env = np.clip(gains / gains.max(), 0.03, 1.0)
    rate = float(rng.uniform(3.0, 6.0))
    return ToySpeakerParams(f0, tuple(env), rate, int(rng.integers(2**31)))


def interpolate_params(target: ToySpeakerParams, distractor: ToySpeakerParams, alpha: float) -> ToySpeakerParams:
    """``alpha * target + (1 - alpha) * distractor`` on the continuous fields.

    The integer ``identity_seed`` cannot be blended; it follows whichever
    speaker has the larger weight (target at ``alpha >= 0.5``).
    """
    if alpha == 1.0:
        return target
    if alpha == 0.0:
        return distractor
    mix = lambda a, b: alpha * a + (1.0 - alpha) * b  # noqa: E731
    return ToySpeakerParams(
        f0_hz=mix(target.f0_hz, distractor.f0_hz),
        envelope=tuple(mix(a, b) for a, b in zip(target.envelope, distractor.envelope)),
        rate_units_per_sec=mix(target.rate_units_per_sec, distractor.rate_units_per_sec),
        identity_seed=target.identity_seed if alpha >= 0.5 else distractor.identity_seed,
    )


def _char_class(ch: str) -> str:
    if ch in _VOWEL_FORMANTS:
        return ch
    if ch in _VOICED:
        return "voiced"
    if ch in _UNVOICED:
        return "unvoiced"
    if ch.isalpha():
        return "voiced"
    if ch.isdigit():
        return "a"
    return "pause"


def text_units(text: str) -> list[str]:
    """Character classes of ``text``; runs of pauses collapse to one."""
    units = []
    for ch in text.lower():
        c = _char_class(ch)
        if c == "pause" and (not units or units[-1] == "pause"):
            continue
        units.append(c)
    while units and units[-1] == "pause":
        units.pop()
    return units or ["a"]


def _envelope_at(params: ToySpeakerParams, freqs: np.ndarray) -> np.ndarray:
    logc = np.log(BAND_CENTERS_HZ)
    env = np.interp(np.log(np.maximum(freqs, 1.0)), logc, np.asarray(params.envelope))
    return np.maximum(env, 0.01)


def _class_shape(unit: str, freqs: np.ndarray) -> np.ndarray:
    if unit in _VOWEL_FORMANTS:
        f1, f2 = _VOWEL_FORMANTS[unit]
        res = lambda f, c: 1.0 / (1.0 + ((f - c) / (0.2 * c + 60.0)) ** 2)  # noqa: E731
        return 0.3 + res(freqs, f1) + 0.7 * res(freqs, f2)
    if unit == "voiced":
        return 0.5 / (1.0 + (freqs / 900.0) ** 2) + 0.05
    if unit == "unvoiced":
        return freqs / (freqs + 2500.0)
    return np.zeros_like(freqs)


def render_toy_speech(params: ToySpeakerParams, text: str, seed: int) -> np.ndarray:
    """Render ``text`` in the voice of ``params``.

    One unit per character class lasts ``1 / rate`` seconds (+-25% jitter);
    pauses last 60% of a unit. Vowels and voiced consonants are harmonic
    series on a slowly varying f0 contour, shaped by the speaker envelope
    and a class-specific spectral shape; unvoiced consonants are shaped
    noise. The result is scaled to a fixed RMS.
    """
    if not text or not text.strip():
        raise ArgumentError("text must be non-empty")
    sr = SAMPLE_RATE
    rng = np.random.default_rng(np.random.SeedSequence([params.identity_seed, seed % 2**63]))
    units = text_units(text)
    unit_len = 1.0 / params.rate_units_per_sec
    durs = np.array([unit_len * (0.6 if u == "pause" else rng.uniform(0.75, 1.25)) for u in units])
    bounds = np.concatenate([[0], np.cumsum(np.round(durs * sr).astype(int))])
    n = int(bounds[-1])
    unit_idx = np.repeat(np.arange(len(units)), np.diff(bounds))
    t = np.arange(n) / sr
    total = max(n / sr, 1e-3)

    ph = rng.uniform(0, 2 * np.pi, 2)
    contour = 1.0 + 0.06 * np.sin(2 * np.pi * 0.7 * t + ph[0]) + 0.03 * np.sin(2 * np.pi * 2.3 * t + ph[1])
    contour += 0.08 * (0.5 - t / total)
    f0_t = params.f0_hz * contour
    phase = 2 * np.pi * np.cumsum(f0_t) / sr

    n_harm = max(1, int(7600.0 / (params.f0_hz * 1.2)))
    harm_freqs = params.f0_hz * np.arange(1, n_harm + 1)
    env = _envelope_at(params, harm_freqs)
    voiced_units = [u != "unvoiced" and u != "pause" for u in units]
    amp_units = np.stack([
        env * _class_shape(u, harm_freqs) * (1.0 if u in _VOWEL_FORMANTS else 0.6) if v else np.zeros(n_harm)
        for u, v in zip(units, voiced_units)
    ], axis=1)  # (n_harm, n_units)
    smooth = int(0.012 * sr)
    amp = uniform_filter1d(amp_units[:, unit_idx], smooth, axis=1, mode="nearest")
    # Per-utterance phases: speaker identity lives only in observable features.
    theta = rng.uniform(0, 2 * np.pi, n_harm)
    voiced = np.zeros(n)
    for k in range(n_harm):
        voiced += amp[k] * np.sin((k + 1) * phase + theta[k])

    noise_gate = np.array([1.0 if u == "unvoiced" else 0.0 for u in units])[unit_idx]
    noise_gate = uniform_filter1d(noise_gate, smooth, mode="nearest")
    unvoiced = np.zeros(n)
    if noise_gate.any():
        white = rng.standard_normal(n)
        spec = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / sr)
        shape = _envelope_at(params, freqs) * _class_shape("unvoiced", freqs) * (freqs < 7800)
        unvoiced = np.fft.irfft(spec * shape, n=n)
        unvoiced *= 0.35 * np.sqrt(np.mean(voiced ** 2) + 1e-12) / (np.sqrt(np.mean(unvoiced ** 2)) + 1e-12)
        unvoiced *= noise_gate
    y = voiced + unvoiced
    rms = np.sqrt(np.mean(y ** 2))
    if rms <= 0:
        return np.zeros(n)
    y *= TOY_RMS / rms
    peak = np.max(np.abs(y))
    if peak > 0.99:
        y *= 0.99 / peak
    return y


_CALIBRATION_TEXT = "the quick brown fox jumps over a lazy dog while seven amused owls sing"
# Energy modulation of toy speech peaks near this fraction of the unit rate.
_MODULATION_PER_UNIT = 0.35
_ENVELOPE_ITERATIONS = 4


def _render_bands(f0: float, env: tuple, rate: float) -> np.ndarray:
    ref = ToySpeakerParams(f0, env, rate, 0)
    return band_log_energies(render_toy_speech(ref, _CALIBRATION_TEXT, 0))


def estimate_speaker_params(clip: AudioClip) -> ToySpeakerParams:
    """Read toy-speaker parameters off enrollment audio.

    f0 is the autocorrelation median and the rate comes from the dominant
    energy-modulation frequency. The envelope is fitted by re-rendering a
    reference sentence and correcting each band gain by the band-energy
    mismatch, a few fixed-point iterations starting from flat. The identity
    seed is a hash of the quantised features.
    """
    return _estimate_cached(clip.samples.tobytes())


@lru_cache(maxsize=64)
def _estimate_cached(raw: bytes) -> ToySpeakerParams:
    x = np.frombuffer(raw, dtype=np.float64)
    f0 = estimate_f0(x)
    f0 = float(np.clip(150.0 if f0 is None else f0, *F0_RANGE))
    rate = syllable_rate(x, lo=1.0, hi=10.0) / _MODULATION_PER_UNIT
    rate = float(np.clip(rate, 3.0, 6.0))
    observed = band_log_energies(x)
    observed = observed - observed.max()
    env = np.ones(N_BANDS)
    for _ in range(_ENVELOPE_ITERATIONS):
        rendered = _render_bands(f0, tuple(env), rate)
        rendered = rendered - rendered.max()
        env = env * 10 ** ((observed - rendered) / 20.0)
        env = np.clip(env / env.max(), 0.005, 1.0)
    env = np.round(env, 6)
    digest = hashlib.sha256(np.round(np.concatenate([[f0, rate], env]), 3).tobytes()).digest()
    ident = int.from_bytes(digest[:4], "little") % 2**31
    return ToySpeakerParams(f0, tuple(env), rate, ident)


@dataclass(frozen=True)
class SynthesisRequest:
    text: str
    speaker: SpeakerRef
    seed: int = 0

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text.strip():
            raise ArgumentError("synthesis text must be non-empty")
        if not self.speaker.enrollment_clips:
            raise ArgumentError("speaker needs at least one enrollment clip")


@dataclass(frozen=True)
class SynthesisBackend:
    backend_id: str
    kind: str
    params: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("external_command", "simulated"):
            raise ArgumentError(f"unknown backend kind {self.kind!r}")


def simulated_backend(fidelity: float, distractor_seed: int = 0) -> SynthesisBackend:
    if not 0.0 <= fidelity <= 1.0:
        raise ArgumentError(f"fidelity must be in [0, 1], got {fidelity}")
    return SynthesisBackend(
        backend_id=f"sim-a{fidelity:.3f}-d{distractor_seed}",
        kind="simulated",
        params={"fidelity": float(fidelity), "distractor_seed": int(distractor_seed)},
    )


def external_backend(backend_id: str, command: str, timeout_sec: float = DEFAULT_TIMEOUT_SEC) -> SynthesisBackend:
    """Wrap a TTS command line, e.g. ``"tts --text_file {text_file} --speaker_wav {ref_wav} --out {out_wav}"``."""
    for ph in ("{text_file}", "{ref_wav}", "{out_wav}"):
        if ph not in command:
            raise ArgumentError(f"command template lacks the {ph} placeholder")
    return SynthesisBackend(backend_id, "external_command", {"command": command, "timeout_sec": float(timeout_sec)})


def _target_params(speaker: SpeakerRef) -> ToySpeakerParams:
    return estimate_speaker_params(speaker.concatenated())


def emitted_params(backend: SynthesisBackend, speaker: SpeakerRef) -> ToySpeakerParams:
    """Speaker parameters a simulated backend renders for ``speaker``."""
    if backend.kind != "simulated":
        raise ArgumentError("only simulated backends expose speaker parameters")
    target = _target_params(speaker)
    distractor = random_speaker_params(backend.params["distractor_seed"])
    return interpolate_params(target, distractor, backend.params["fidelity"])


def _run_external(backend: SynthesisBackend, request: SynthesisRequest) -> AudioClip:
    timeout = float(backend.params.get("timeout_sec", DEFAULT_TIMEOUT_SEC))
    with tempfile.TemporaryDirectory(prefix="pse-synth-") as tmp:
        tmp = Path(tmp)
        text_file, ref_wav, out_wav = tmp / "text.txt", tmp / "ref.wav", tmp / "out.wav"
        text_file.write_text(request.text, encoding="utf-8")
        write_wav(ref_wav, request.speaker.concatenated())
        cmd = backend.params["command"].format(
            text_file=shlex.quote(str(text_file)), ref_wav=shlex.quote(str(ref_wav)),
            out_wav=shlex.quote(str(out_wav)), seed=request.seed,
        )
        try:
            proc = subprocess.run(cmd, shell=True, capture_output=True, text=True, timeout=timeout)
        except subprocess.TimeoutExpired as e:
            raise BackendTimeoutError(f"{backend.backend_id}: timed out after {timeout}s",
                                      f"stdout: {e.stdout}\nstderr: {e.stderr}") from e
        log.debug("%s stdout: %s", backend.backend_id, proc.stdout)
        log.debug("%s stderr: %s", backend.backend_id, proc.stderr)
        diag = f"command: {cmd}\nexit: {proc.returncode}\nstdout: {proc.stdout}\nstderr: {proc.stderr}"
        if proc.returncode != 0:
            raise BackendError(f"{backend.backend_id}: command failed with exit code {proc.returncode}", diag)
        try:
            return read_wav(out_wav)
        except (AudioIOError, ArgumentError) as e:
            raise BackendError(f"{backend.backend_id}: malformed output audio ({e})", diag) from e


def synthesize(backend: SynthesisBackend, request: SynthesisRequest) -> AudioClip:
    if backend.kind == "simulated":
        params = emitted_params(backend, request.speaker)
        return AudioClip(render_toy_speech(params, request.text, request.seed))
    return _run_external(backend, request)


def _text_order(n: int, seed: int):
    """Sentence indices without replacement; reshuffled once exhausted."""
    epoch = 0
    while True:
        yield from np.random.default_rng(np.random.SeedSequence([seed % 2**63, epoch])).permutation(n)
        epoch += 1


def build_augmented_set(backend: SynthesisBackend, speaker: SpeakerRef, texts: Manifest,
                        target_duration_sec: float, seed: int, out_dir: str | Path,
                        split_ratio: tuple[float, float] = (2.0, 1.0),
                        name: str | None = None) -> Manifest:
    """Synthesize utterances for ``speaker`` until ``target_duration_sec`` is reached.

    Synthesis stops at the first utterance whose addition reaches the target,
    so the total never undershoots and overshoots by less than one utterance.
    The first ``split_ratio[0] / sum(split_ratio)`` of the audio (by
    duration, in synthesis order) becomes ``tr``, the rest ``vl``. The
    manifest is written to ``out_dir/<name>.jsonl`` with WAVs under
    ``out_dir/wav``.
    """
    if texts.kind != ManifestKind.text:
        raise ArgumentError("texts must be a text manifest")
    if not texts.records:
        raise ArgumentError("text manifest is empty")
    if not target_duration_sec > 0:
        raise ArgumentError("target_duration_sec must be positive")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    name = name or f"Stilde_{speaker.speaker_id}_{backend.backend_id}"
    order = _text_order(len(texts.records), seed)
    records: list[UtteranceRecord] = []
    total = 0.0
    idx = 0
    while total < target_duration_sec:
        text_rec: TextRecord = texts.records[int(next(order))]
        req_seed = int(np.random.SeedSequence([seed % 2**63, idx]).generate_state(1)[0])
        request = SynthesisRequest(text_rec.text, speaker, req_seed)
        clip, last_err = None, None
        for attempt in range(MAX_RETRIES):
            try:
                clip = synthesize(backend, request)
                break
            except BackendError as e:
                last_err = e
                log.warning("%s: attempt %d for text %s failed: %s", backend.backend_id, attempt + 1, text_rec.id, e)
        if clip is None:
            partial = _finish(name, records, out_dir, split_ratio)
            err = BackendError(
                f"{backend.backend_id}: text {text_rec.id} failed {MAX_RETRIES} times; "
                f"partial manifest with {len(records)} utterances ({total:.2f}s) at {out_dir / (name + '.jsonl')}",
                last_err.diagnostics if last_err else "",
            )
            err.partial_manifest = partial
            raise err
        utt_id = f"{speaker.speaker_id}_{backend.backend_id}_{idx:04d}"
        rel = Path("wav") / f"{utt_id}.wav"
        write_wav(out_dir / rel, clip)
        records.append(UtteranceRecord(
            id=utt_id, speaker_id=speaker.speaker_id, path=str(rel),
            duration_sec=len(clip) / SAMPLE_RATE, partition=None,
            origin="synthesized", backend_tag=backend.backend_id,
        ))
        total += clip.duration_sec
        idx += 1
    return _finish(name, records, out_dir, split_ratio)


def _finish(name: str, records: list[UtteranceRecord], out_dir: Path, split_ratio) -> Manifest:
    tr_share = split_ratio[0] / float(sum(split_ratio))
    total = sum(r.duration_sec for r in records)
    acc = 0.0
    assigned = []
    for i, r in enumerate(records):
        # keep at least one vl utterance once there are two or more
        is_tr = (acc < tr_share * total - 1e-9) and not (i == len(records) - 1 and i > 0 and tr_share < 1)
        assigned.append(replace(r, partition="tr" if is_tr else "vl"))
        if is_tr:
            acc += r.duration_sec
    if assigned and all(r.partition == "vl" for r in assigned):
        assigned[0] = replace(assigned[0], partition="tr")
    manifest = Manifest(name, ManifestKind.synthesized_speech, tuple(assigned), root=out_dir.resolve())
    write_manifest(manifest, out_dir / f"{name}.jsonl")
    return manifest
