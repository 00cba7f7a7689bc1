"""JSON-lines manifests for speech, noise, text and synthesized sets.

A manifest file starts with a header object ``{"name": ..., "kind": ...}``
followed by one record per line. Relative audio paths are resolved against
the directory holding the manifest.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .audio import AudioClip, read_wav, rms_normalize
from .errors import (
    ArgumentError,
    ManifestParseError,
    ManifestValidationError,
    MissingFileError,
)

log = logging.getLogger(__name__)

PARTITIONS = ("tr", "vl", "te")
RECORD_FIELDS = ("id", "speaker_id", "path", "duration_sec", "partition", "origin", "backend_tag")
TEXT_FIELDS = ("id", "text")
DURATION_TOLERANCE_SEC = 1e-3


class ManifestKind(str, Enum):
    clean_speech = "clean_speech"
    noise = "noise"
    text = "text"
    synthesized_speech = "synthesized_speech"


@dataclass(frozen=True)
class UtteranceRecord:
    id: str
    speaker_id: str
    path: str
    duration_sec: float
    partition: str | None = None
    origin: str = "natural"
    backend_tag: str | None = None

    def __post_init__(self):
        if not self.id:
            raise ManifestValidationError("record id must be non-empty")
        if not (self.duration_sec > 0 and np.isfinite(self.duration_sec)):
            raise ManifestValidationError(f"record {self.id}: duration_sec must be > 0")
        if self.partition is not None and self.partition not in PARTITIONS:
            raise ManifestValidationError(f"record {self.id}: unknown partition {self.partition!r}")
        if self.origin not in ("natural", "synthesized"):
            raise ManifestValidationError(f"record {self.id}: unknown origin {self.origin!r}")
        if (self.origin == "synthesized") != (self.backend_tag is not None):
            raise ManifestValidationError(
                f"record {self.id}: backend_tag must be set exactly when origin is synthesized"
            )

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in RECORD_FIELDS}


@dataclass(frozen=True)
class TextRecord:
    id: str
    text: str

    def __post_init__(self):
        if not self.id:
            raise ManifestValidationError("text record id must be non-empty")
        if not self.text.strip():
            raise ManifestValidationError(f"text record {self.id}: empty sentence")

    def to_json(self) -> dict:
        return {"id": self.id, "text": self.text}


@dataclass(frozen=True)
class Manifest:
    name: str
    kind: ManifestKind
    records: tuple = ()
    root: Path | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", ManifestKind(self.kind))
        object.__setattr__(self, "records", tuple(self.records))
        validate(self)

    @property
    def total_duration_sec(self) -> float:
        if self.kind == ManifestKind.text:
            return 0.0
        return float(sum(r.duration_sec for r in self.records))

    def __len__(self) -> int:
        return len(self.records)

    def partition(self, part: str) -> "Manifest":
        """Sub-manifest holding only records of one partition."""
        return replace(self, name=f"{self.name}_{part}",
                       records=tuple(r for r in self.records if r.partition == part))

    def speakers(self) -> list[str]:
        return sorted({r.speaker_id for r in self.records})

    def resolve(self, record: UtteranceRecord) -> Path:
        p = Path(record.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p


def validate(manifest: Manifest) -> None:
    seen: set[str] = set()
    text_kind = manifest.kind == ManifestKind.text
    for r in manifest.records:
        if text_kind != isinstance(r, TextRecord):
            raise ManifestValidationError(
                f"{manifest.name}: record {getattr(r, 'id', r)!r} does not match manifest kind {manifest.kind.value}"
            )
        if r.id in seen:
            raise ManifestValidationError(f"{manifest.name}: duplicate record id {r.id!r}")
        seen.add(r.id)
    if text_kind:
        return
    parts_by_path: dict[str, set] = defaultdict(set)
    for r in manifest.records:
        parts_by_path[r.path].add(r.partition)
    for path, parts in parts_by_path.items():
        if len(parts) > 1:
            raise ManifestValidationError(
                f"{manifest.name}: file {path} appears in several partitions {sorted(map(str, parts))}"
            )


def _parse_record(obj: dict, kind: ManifestKind):
    fields = TEXT_FIELDS if kind == ManifestKind.text else RECORD_FIELDS
    unknown = set(obj) - set(fields)
    if unknown:
        raise ValueError(f"unknown fields {sorted(unknown)}")
    if kind == ManifestKind.text:
        return TextRecord(id=str(obj["id"]), text=str(obj["text"]))
    return UtteranceRecord(
        id=str(obj["id"]),
        speaker_id=str(obj["speaker_id"]),
        path=str(obj["path"]),
        duration_sec=float(obj["duration_sec"]),
        partition=obj.get("partition"),
        origin=obj.get("origin", "natural"),
        backend_tag=obj.get("backend_tag"),
    )


def load_manifest(path: str | Path, validate_files: bool = False, strict: bool = False) -> Manifest:
    """Parse and validate a JSON-lines manifest.

    Args:
        path: manifest file.
        validate_files: raise :class:`MissingFileError` if any audio file is absent.
        strict: additionally re-measure every file's duration against the record.
    """
    path = Path(path)
    header = None
    records = []
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestParseError(path, line_no, f"invalid JSON ({e.msg})") from e
            if not isinstance(obj, dict):
                raise ManifestParseError(path, line_no, "expected a JSON object")
            if header is None:
                if set(obj) != {"name", "kind"}:
                    raise ManifestParseError(path, line_no, "first line must be a {name, kind} header")
                try:
                    header = (str(obj["name"]), ManifestKind(obj["kind"]))
                except ValueError as e:
                    raise ManifestParseError(path, line_no, f"unknown manifest kind {obj['kind']!r}") from e
                continue
            try:
                records.append(_parse_record(obj, header[1]))
            except ManifestValidationError:
                raise
            except (KeyError, ValueError, TypeError) as e:
                raise ManifestParseError(path, line_no, f"malformed record: {e}") from e
    if header is None:
        raise ManifestParseError(path, 1, "missing header line")
    manifest = Manifest(header[0], header[1], tuple(records), root=path.parent.resolve())
    if (validate_files or strict) and manifest.kind != ManifestKind.text:
        for r in manifest.records:
            p = manifest.resolve(r)
            if not p.is_file():
                raise MissingFileError(f"{manifest.name}: record {r.id}: missing audio file {p}")
            if strict:
                actual = read_clip(r, manifest.root).duration_sec
                if abs(actual - r.duration_sec) > DURATION_TOLERANCE_SEC:
                    raise ManifestValidationError(
                        f"{manifest.name}: record {r.id}: manifest says {r.duration_sec:.4f}s, file has {actual:.4f}s"
                    )
    if not manifest.records:
        log.warning("manifest %s has no records", manifest.name)
    return manifest


def dumps_manifest(manifest: Manifest) -> str:
    lines = [json.dumps({"name": manifest.name, "kind": manifest.kind.value}, ensure_ascii=False)]
    lines += [json.dumps(r.to_json(), ensure_ascii=False) for r in manifest.records]
    return "\n".join(lines) + "\n"


def write_manifest(manifest: Manifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_manifest(manifest), encoding="utf-8")
    return path


def read_clip(record: UtteranceRecord, root: str | Path | None = None,
              normalize_rms: float | None = None) -> AudioClip:
    """Load a record's audio as a 16 kHz mono clip.

    ``normalize_rms`` rescales the utterance to that RMS level; off by default.
    """
    p = Path(record.path)
    if not p.is_absolute() and root is not None:
        p = Path(root) / p
    clip = read_wav(p, record_id=record.id)
    if normalize_rms is not None:
        clip = rms_normalize(clip, normalize_rms)
    return clip


def split_partitions(manifest: Manifest, fractions: Mapping[str, float], seed: int) -> Manifest:
    """Assign tr/vl/te partitions at random, deterministically in ``seed``.

    Partition sizes use largest-remainder rounding, so each differs from
    ``fraction * n`` by less than one record.
    """
    if not fractions or any(k not in PARTITIONS for k in fractions):
        raise ArgumentError(f"fractions must be keyed by {PARTITIONS}, got {dict(fractions)}")
    if any(v < 0 for v in fractions.values()):
        raise ArgumentError("fractions must be non-negative")
    if abs(sum(fractions.values()) - 1.0) > 1e-9:
        raise ArgumentError(f"fractions must sum to 1, got {sum(fractions.values())}")
    if manifest.kind == ManifestKind.text:
        raise ArgumentError("text manifests carry no partitions")
    n = len(manifest.records)
    parts = [p for p in PARTITIONS if p in fractions]
    exact = np.array([fractions[p] * n for p in parts])
    sizes = np.floor(exact).astype(int)
    remainder = n - sizes.sum()
    for i in np.argsort(-(exact - sizes), kind="stable")[:remainder]:
        sizes[i] += 1
    order = np.random.default_rng(seed).permutation(n)
    labels = np.empty(n, dtype=object)
    start = 0
    for part, size in zip(parts, sizes):
        labels[order[start:start + size]] = part
        start += size
    records = tuple(replace(r, partition=str(lab)) for r, lab in zip(manifest.records, labels))
    return replace(manifest, records=records)


@dataclass(frozen=True)
class SpeakerRef:
    """Enrollment audio for one target speaker (a few seconds of clean speech)."""

    speaker_id: str
    enrollment_clips: tuple

    def __post_init__(self):
        object.__setattr__(self, "enrollment_clips", tuple(self.enrollment_clips))
        if not self.enrollment_clips:
            raise ArgumentError(f"speaker {self.speaker_id}: at least one enrollment clip is required")

    @property
    def total_enrollment_sec(self) -> float:
        return float(sum(c.duration_sec for c in self.enrollment_clips))

    def concatenated(self) -> AudioClip:
        return AudioClip(np.concatenate([c.samples for c in self.enrollment_clips]))


def summary(manifest: Manifest) -> str:
    """Table-1-style plain-text summary: per-speaker durations by partition."""
    lines = [f"manifest: {manifest.name} ({manifest.kind.value})", f"records: {len(manifest.records)}"]
    if not manifest.records:
        lines.append("WARNING: manifest is empty")
        return "\n".join(lines) + "\n"
    if manifest.kind == ManifestKind.text:
        lines.append(f"sentences: {len(manifest.records)}")
        return "\n".join(lines) + "\n"
    table: dict[str, dict[str, float]] = defaultdict(lambda: defaultdict(float))
    for r in manifest.records:
        table[r.speaker_id][r.partition or "-"] += r.duration_sec
    cols = [p for p in (*PARTITIONS, "-") if any(p in row for row in table.values())]
    lines.append(f"speakers: {len(table)}")
    lines.append(f"total duration: {manifest.total_duration_sec:.2f} s")
    lines.append("")
    lines.append("speaker".ljust(20) + "".join(c.rjust(10) for c in cols) + "total".rjust(10))
    for spk in sorted(table):
        row = table[spk]
        lines.append(spk.ljust(20) + "".join(f"{row.get(c, 0.0):10.2f}" for c in cols)
                     + f"{sum(row.values()):10.2f}")
    return "\n".join(lines) + "\n"


def make_manifest(name: str, kind: ManifestKind | str, records: Iterable, root: Path | None = None) -> Manifest:
    return Manifest(name, ManifestKind(kind), tuple(records), root=root)


def concat_manifests(name: str, manifests: Sequence[Manifest]) -> Manifest:
    """Merge manifests of the same kind; records keep their own absolute paths."""
    kinds = {m.kind for m in manifests}
    if len(kinds) != 1:
        raise ArgumentError(f"cannot merge manifests of kinds {sorted(k.value for k in kinds)}")
    records = []
    for m in manifests:
        for r in m.records:
            if isinstance(r, UtteranceRecord):
                r = replace(r, path=str(m.resolve(r)))
            records.append(r)
    return Manifest(name, kinds.pop(), tuple(records), root=None)
