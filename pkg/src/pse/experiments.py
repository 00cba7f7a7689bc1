"""Grid runner: generalist baselines vs. personalized finetuning across sizes and synthesis conditions.

A plan is a grid of model sizes x synthesis conditions x target speakers x
seeds. Each grid cell builds an augmented set for its speaker, finetunes the
generalist of its size on it, and scores the result on the speaker's test
mixtures (built with test-only noise) and on the finetuning validation
mixtures. Every artifact lands under ``output_dir``:

```
output_dir/
  lock.json                      seeds + config hashes, checked on resume
  world/                         toy world (when the plan asks for one)
  generalist/<size>/best.ckpt    pretrained generalists
  aug/<cond>/<speaker>/seed<k>/  augmented sets
  cells/<cond>/<size>/<speaker>/seed<k>/result.json
  baseline/<size>/<speaker>/result.json
  results.json, results.csv, report.md
```

A cell is complete when its ``result.json`` exists; resuming skips complete
cells and reruns everything else.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import shutil
import traceback
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import __version__
from .corpus import Manifest, SpeakerRef, load_manifest, read_clip
from .errors import ArgumentError, ConfigError, LockfileMismatchError
from .metrics import CommandAdapter, evaluate
from .mixer import CachedLoader, Mixture, mixture_stream
from .sepnet import ModelSize, build_model, enhance, load_checkpoint, save_checkpoint
from .synthesis import SynthesisBackend, build_augmented_set, external_backend, simulated_backend
from .toyworld import ToyWorldConfig, build_toy_world
from .trainer import TrainConfig, finetune_pse, train

log = logging.getLogger(__name__)

COLUMNS = ("sdri_te", "sdr_te", "estoi_te", "pesq_te", "sdri_vl", "sdr_vl", "estoi_vl", "pesq_vl")
COLUMN_TITLES = ("SDRI (te)", "SDR (te)", "eSTOI (te)", "PESQ (te)",
                 "SDRI (vl)", "SDR (vl)", "eSTOI (vl)", "PESQ (vl)")
BASELINE = "generalist"
_DISTRACTOR_BASE = 90_000


def distractor_seed_for(speaker_id: str) -> int:
    """Stable per-speaker distractor voice for simulated backends."""
    return _DISTRACTOR_BASE + zlib.crc32(speaker_id.encode()) % 10_000


@dataclass(frozen=True)
class Condition:
    """One synthesis condition of the grid.

    ``fidelity`` selects the simulated backend; ``command`` an external one.
    A condition with neither refers to a backend this run cannot construct
    and all of its cells fail.
    """

    backend_id: str
    fidelity: float | None = None
    augment_duration_sec: float = 60.0
    command: str | None = None
    distractor_seed: int | None = None
    label: str | None = None

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        tag = f"{self.backend_id} a={self.fidelity:.2f}" if self.fidelity is not None else self.backend_id
        return f"{tag}; {self.augment_duration_sec:.0f} sec."

    @property
    def slug(self) -> str:
        return "".join(c if c.isalnum() or c in "-_." else "_" for c in self.name)

    def backend(self, speaker_id: str) -> SynthesisBackend:
        if self.fidelity is not None:
            seed = self.distractor_seed if self.distractor_seed is not None else distractor_seed_for(speaker_id)
            return simulated_backend(self.fidelity, seed)
        if self.command:
            return external_backend(self.backend_id, self.command)
        raise ArgumentError(f"backend {self.backend_id!r} is not available (no fidelity or command given)")


@dataclass(frozen=True)
class PlanData:
    """Manifest paths for a non-toy run."""

    generalist: str
    noise: str
    texts: str
    enrollment: Mapping[str, str]
    test_speech: Mapping[str, str]


@dataclass(frozen=True)
class ExperimentPlan:
    name: str
    sizes: tuple
    conditions: tuple
    speakers: tuple
    seeds: tuple
    output_dir: str
    test_noise: str | None = None
    toy_world: dict | None = None
    data: PlanData | None = None
    generalists: Mapping[str, str] = field(default_factory=dict)
    pretrain: dict | None = None
    finetune: dict = field(default_factory=dict)
    test_mixtures: int = 30
    test_segment_sec: float = 4.0
    pesq_command: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(ModelSize(s) if not isinstance(s, ModelSize) else s
                                                for s in self.sizes))
        object.__setattr__(self, "conditions", tuple(c if isinstance(c, Condition) else Condition(**c)
                                                     for c in self.conditions))
        object.__setattr__(self, "speakers", tuple(self.speakers))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if isinstance(self.data, Mapping):
            object.__setattr__(self, "data", PlanData(**self.data))
        for what in ("sizes", "conditions", "speakers", "seeds"):
            if not getattr(self, what):
                raise ConfigError(f"plan {self.name!r}: {what} must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"plan {self.name!r}: seeds must be distinct")
        if len({c.name for c in self.conditions}) != len(self.conditions):
            raise ConfigError(f"plan {self.name!r}: condition names must be distinct")
        if (self.toy_world is None) == (self.data is None):
            raise ConfigError(f"plan {self.name!r}: give exactly one of toy_world or data")
        missing = [s.value for s in self.sizes if s.value not in self.generalists]
        if missing and self.pretrain is None:
            raise ConfigError(f"plan {self.name!r}: no generalist checkpoint for {missing} and no pretrain stage")
        if self.test_mixtures < 1:
            raise ConfigError("test_mixtures must be >= 1")
        TrainConfig.from_dict(self.finetune)
        if self.pretrain is not None:
            TrainConfig.from_dict(self.pretrain)

    @property
    def finetune_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.finetune)

    @property
    def pretrain_config(self) -> TrainConfig | None:
        return TrainConfig.from_dict(self.pretrain) if self.pretrain is not None else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizes"] = [s.value for s in self.sizes]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentPlan":
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentPlan":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        d.setdefault("output_dir", str(Path(path).with_suffix("")))
        return cls.from_dict(d)

    def n_finetune_runs(self) -> int:
        return len(self.sizes) * len(self.conditions) * len(self.speakers) * len(self.seeds)


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def lockfile_content(plan: ExperimentPlan) -> dict:
    d = plan.to_dict()
    d.pop("output_dir")
    return {
        "plan": plan.name,
        "plan_hash": _hash(d),
        "seeds": list(plan.seeds),
        "finetune_config_hash": _hash(plan.finetune_config.to_dict()),
        "pretrain_config_hash": _hash(plan.pretrain_config.to_dict()) if plan.pretrain is not None else None,
        "toy_world_hash": _hash(d["toy_world"]) if plan.toy_world is not None else None,
        "generalists": {k: v for k, v in sorted(plan.generalists.items())},
        "package_version": __version__,
    }


# ----------------------------------------------------------------- result table


@dataclass
class CellResult:
    condition: str
    size: str
    speaker: str
    seed: int | None
    metrics: dict = field(default_factory=dict)
    val_sdr_initial: float | None = None
    val_sdr_best: float | None = None
    failed: str | None = None

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class ResultTable:
    """Per-(condition, size) means over speakers and seeds.

    ``rows`` maps ``(condition, size)`` to a column dict; a cell whose runs all
    failed carries ``{"failed": <reason>}`` instead.
    """

    rows: dict = field(default_factory=dict)
    cells: list = field(default_factory=list)
    condition_order: list = field(default_factory=list)

    @classmethod
    def from_cells(cls, cells: Sequence[CellResult], condition_order: Sequence[str] = ()) -> "ResultTable":
        order = list(condition_order) or list(dict.fromkeys(c.condition for c in cells))
        groups: dict = {}
        for c in cells:
            groups.setdefault((c.condition, c.size), []).append(c)
        rows = {}
        for key, members in groups.items():
            ok = [c for c in members if c.failed is None]
            if not ok:
                rows[key] = {"failed": "; ".join(sorted({c.failed for c in members}))}
                continue
            row = {}
            for col in COLUMNS:
                vals = [c.metrics[col] for c in ok if c.metrics.get(col) is not None]
                if vals:
                    row[col] = float(np.mean(vals))
                    row[col + "_std"] = float(np.std(vals))
            row["n"] = len(ok)
            row["n_failed"] = len(members) - len(ok)
            rows[key] = row
        return cls(rows, list(cells), order)

    def value(self, condition: str, size: str, column: str) -> float | None:
        return self.rows.get((condition, size), {}).get(column)

    def sizes(self) -> list[str]:
        present = {k[1] for k in self.rows}
        return [s.value for s in ModelSize if s.value in present]

    def conditions(self) -> list[str]:
        present = {k[0] for k in self.rows}
        return [c for c in self.condition_order if c in present] + sorted(present - set(self.condition_order))

    @property
    def any_failed(self) -> bool:
        return any(c.failed for c in self.cells)

    def to_json(self) -> dict:
        return {
            "condition_order": self.condition_order,
            "rows": [{"condition": k[0], "size": k[1], **v} for k, v in
                     sorted(self.rows.items(), key=lambda kv: self._sort_key(kv[0]))],
            "cells": [c.to_json() for c in self.cells],
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "ResultTable":
        cells = [CellResult(**c) for c in d.get("cells", [])]
        rows = {(r["condition"], r["size"]): {k: v for k, v in r.items() if k not in ("condition", "size")}
                for r in d.get("rows", [])}
        return cls(rows, cells, list(d.get("condition_order", [])))

    def _sort_key(self, key):
        cond, size = key
        order = self.conditions()
        sizes = [s.value for s in ModelSize]
        return (order.index(cond) if cond in order else len(order), sizes.index(size) if size in sizes else 99)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("condition", "size") + COLUMNS + ("n", "failed"))
        for key in sorted(self.rows, key=self._sort_key):
            row = self.rows[key]
            w.writerow(list(key) + [_fmt_csv(row.get(c)) for c in COLUMNS] + [row.get("n", 0), row.get("failed", "")])
        return buf.getvalue()


def _fmt_csv(v) -> str:
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------------- report


def _bold_sets(table: ResultTable, decimals: int) -> set:
    """``(condition, size, column)`` triples holding the best displayed value of their size group."""
    bold = set()
    for size in table.sizes():
        for col in COLUMNS:
            vals = {}
            for cond in table.conditions():
                v = table.value(cond, size, col)
                if v is not None:
                    vals[cond] = round(v, decimals)
            if vals:
                best = max(vals.values())
                bold |= {(cond, size, col) for cond, v in vals.items() if v == best}
    return bold


def render_report(table: ResultTable, literature: Mapping | None = None, title: str = "Results",
                  decimals: int = 2) -> str:
    """Markdown report with one row per (condition, size).

    Within each size, the best value of every column is bold (all of them on
    a tie, compared at the displayed precision). ``literature`` maps a
    condition label to ``{size: {column: value}}``; those rows are shown in
    italics with a ``(literature)`` tag and never take part in bolding.
    """
    lines = [f"# {title}", ""]
    literature = literature or {}
    if not table.rows and not literature:
        lines += ["> **No results**: the table is empty.", ""]
        return "\n".join(lines)
    lines.append("| Condition | Size | " + " | ".join(COLUMN_TITLES) + " |")
    lines.append("|:--|:-:|" + "--:|" * len(COLUMNS))
    bold = _bold_sets(table, decimals)
    sizes = [s.value for s in ModelSize]
    for cond in table.conditions():
        for size in sizes:
            row = table.rows.get((cond, size))
            if row is None:
                continue
            if "failed" in row:
                cells = ["failed"] * len(COLUMNS)
            else:
                cells = []
                for col in COLUMNS:
                    v = row.get(col)
                    text = "" if v is None else f"{v:.{decimals}f}"
                    cells.append(f"**{text}**" if (cond, size, col) in bold else text)
            lines.append(f"| {cond} | {size} | " + " | ".join(cells) + " |")
    for cond, by_size in literature.items():
        for size in sizes:
            vals = by_size.get(size)
            if vals is None:
                continue
            cells = ["" if vals.get(col) is None else f"*{vals[col]:.{decimals}f}*" for col in COLUMNS]
            lines.append(f"| *{cond} (literature)* | {size} | " + " | ".join(cells) + " |")
    lines.append("")
    if not table.rows:
        lines += ["> **No results**: only literature values are shown.", ""]
    failed = [c for c in table.cells if c.failed]
    if failed:
        lines += ["## Failed runs", ""]
        lines += [f"- {c.condition} / {c.size} / {c.speaker} / seed {c.seed}: {c.failed}" for c in failed]
        lines.append("")
    lines.append("Bold: best value per size and column. Italic rows are quoted literature values.")
    lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------- runner


@dataclass
class _Inputs:
    generalist: Manifest
    noise: Manifest
    test_noise: Manifest
    texts: Manifest
    enrollment: dict
    test_speech: dict


def _part(m: Manifest, part: str) -> Manifest:
    return m.partition(part) if any(r.partition == part for r in m.records) else m


def _resolve_inputs(plan: ExperimentPlan, out: Path) -> _Inputs:
    if plan.toy_world is not None:
        world = build_toy_world(out / "world", ToyWorldConfig(**plan.toy_world))
        unknown = set(plan.speakers) - set(world.target_ids)
        if unknown:
            raise ConfigError(f"speakers {sorted(unknown)} are not in the toy world {world.target_ids}")
        enroll = {s: world.enrollment(s) for s in plan.speakers}
        test = {s: world.test_speech(s) for s in plan.speakers}
        g, n, t = world.generalist, world.noise, world.texts
    else:
        d = plan.data
        g, n, t = load_manifest(d.generalist), load_manifest(d.noise), load_manifest(d.texts)
        enroll, test = {}, {}
        for s in plan.speakers:
            em = load_manifest(d.enrollment[s])
            enroll[s] = SpeakerRef(s, [read_clip(r, em.root) for r in em.records])
            test[s] = _part(load_manifest(d.test_speech[s]), "te")
    tn = load_manifest(plan.test_noise) if plan.test_noise else n
    return _Inputs(g, n, _part(tn, "te"), t, enroll, test)


def _check_lock(plan: ExperimentPlan, out: Path) -> None:
    lock = out / "lock.json"
    content = lockfile_content(plan)
    if lock.exists():
        existing = json.loads(lock.read_text(encoding="utf-8"))
        if existing != content:
            diff = sorted(k for k in set(existing) | set(content) if existing.get(k) != content.get(k))
            raise LockfileMismatchError(f"{lock} does not match this plan (differs in {', '.join(diff)})")
    else:
        out.mkdir(parents=True, exist_ok=True)
        lock.write_text(json.dumps(content, indent=2, sort_keys=True), encoding="utf-8")


def _test_seed(speaker: str) -> int:
    return 7_000_000 + zlib.crc32(speaker.encode()) % 1_000_000


def _score(model, mixtures: Sequence[Mixture], suffix: str, pesq: CommandAdapter | None) -> dict:
    estimates = [enhance(model, m.x).samples for m in mixtures]
    report = evaluate(estimates, mixtures, pesq=pesq)
    agg = report.aggregates
    return {f"sdri_{suffix}": agg["sdri_db"], f"sdr_{suffix}": agg["sdr_db"],
            f"estoi_{suffix}": agg.get("estoi"), f"pesq_{suffix}": agg.get("pesq")}


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")
    tmp.replace(path)


def _pretrain(plan: ExperimentPlan, size: ModelSize, inputs: _Inputs, out: Path, loader) -> Path:
    if size.value in plan.generalists:
        return Path(plan.generalists[size.value])
    ckpt_dir = out / "generalist" / size.value
    ckpt = ckpt_dir / "best.ckpt"
    if ckpt.exists():
        return ckpt
    cfg = plan.pretrain_config
    log.info("pretraining generalist %s", size.value)
    val = list(mixture_stream(_part(inputs.generalist, "vl"), _part(inputs.noise, "vl"), cfg.val_count,
                              cfg.snr_range, cfg.segment_sec, cfg.seed + 1_000_003, loader=loader))
    model = build_model(size, init_seed=cfg.seed)
    train(model, _part(inputs.generalist, "tr"), _part(inputs.noise, "tr"), val, cfg, out_dir=ckpt_dir, loader=loader)
    return ckpt


def run_experiment(plan: ExperimentPlan, deterministic: bool = True) -> ResultTable:
    """Run (or resume) every cell of ``plan`` and return the aggregated table.

    Failed cells are recorded, not raised. Raises
    :class:`LockfileMismatchError` when ``output_dir`` holds a run of a
    different plan.
    """
    out = Path(plan.output_dir)
    _check_lock(plan, out)
    if deterministic:
        torch.set_num_threads(1)
    inputs = _resolve_inputs(plan, out)
    loader = CachedLoader()
    pesq = CommandAdapter("pesq", plan.pesq_command) if plan.pesq_command else None
    ft_cfg = plan.finetune_config
    cells: list[CellResult] = []

    test_mix = {s: list(mixture_stream(inputs.test_speech[s], inputs.test_noise, plan.test_mixtures,
                                       ft_cfg.snr_range, plan.test_segment_sec, _test_seed(s), loader=loader))
                for s in plan.speakers}

    generalists = {}
    for size in plan.sizes:
        try:
            generalists[size] = _pretrain(plan, size, inputs, out, loader)
        except Exception as e:  # noqa: BLE001 - recorded as failed cells
            log.error("generalist %s failed: %s", size.value, e)
            generalists[size] = e

    for size in plan.sizes:
        for spk in plan.speakers:
            path = out / "baseline" / size.value / spk / "result.json"
            cells.append(_run_cell(path, CellResult(BASELINE, size.value, spk, None),
                                   lambda: _baseline(generalists[size], test_mix[spk], pesq)))

    for cond in plan.conditions:
        for spk in plan.speakers:
            for seed in plan.seeds:
                aug_dir = out / "aug" / cond.slug / spk / f"seed{seed}"
                for size in plan.sizes:
                    path = out / "cells" / cond.slug / size.value / spk / f"seed{seed}" / "result.json"
                    cells.append(_run_cell(path, CellResult(cond.name, size.value, spk, seed), lambda: _finetune_cell(
                        generalists[size], cond, inputs, spk, seed, aug_dir, path.parent, ft_cfg, test_mix[spk],
                        loader, pesq)))

    table = ResultTable.from_cells(cells, [BASELINE] + [c.name for c in plan.conditions])
    _write_json(out / "results.json", table.to_json())
    (out / "results.csv").write_text(table.to_csv(), encoding="utf-8")
    (out / "report.md").write_text(render_report(table, title=plan.name), encoding="utf-8")
    return table


def _run_cell(path: Path, cell: CellResult, fn) -> CellResult:
    if path.exists():
        return CellResult(**json.loads(path.read_text(encoding="utf-8")))
    try:
        metrics, v0, vb = fn()
        cell.metrics, cell.val_sdr_initial, cell.val_sdr_best = metrics, v0, vb
        _write_json(path, cell.to_json())
    except Exception as e:  # noqa: BLE001 - isolation: one bad cell must not stop the grid
        cell.failed = f"{type(e).__name__}: {e}"
        log.error("cell %s/%s/%s/%s failed: %s", cell.condition, cell.size, cell.speaker, cell.seed, e)
        log.debug("%s", traceback.format_exc())
    return cell


def _baseline(ckpt, test_mix, pesq):
    if isinstance(ckpt, Exception):
        raise ckpt
    return _score(load_checkpoint(ckpt), test_mix, "te", pesq), None, None


def _finetune_cell(ckpt, cond: Condition, inputs: _Inputs, spk: str, seed: int, aug_dir: Path, cell_dir: Path,
                   ft_cfg: TrainConfig, test_mix, loader, pesq):
    if isinstance(ckpt, Exception):
        raise ckpt
    manifest_name = f"aug_{spk}"
    manifest_path = aug_dir / f"{manifest_name}.jsonl"
    if manifest_path.exists():
        aug = load_manifest(manifest_path)
    else:
        if aug_dir.exists():
            shutil.rmtree(aug_dir)  # partial leftovers from an interrupted build
        aug = build_augmented_set(cond.backend(spk), inputs.enrollment[spk], inputs.texts,
                                  cond.augment_duration_sec, seed, aug_dir, name=manifest_name)
    cfg = TrainConfig.from_dict({**ft_cfg.to_dict(), "seed": ft_cfg.seed + seed})
    model, tl = finetune_pse(ckpt, aug, inputs.noise, cfg, out_dir=cell_dir, loader=loader)
    val = list(mixture_stream(_part(aug, "vl"), _part(inputs.noise, "vl"), cfg.val_count, cfg.snr_range,
                              cfg.segment_sec, cfg.seed + 1_000_003, loader=loader))
    metrics = _score(model, test_mix, "te", pesq)
    metrics.update(_score(model, val, "vl", pesq))
    v0 = tl.entries[0].val_sdr if tl.entries else math.nan
    return metrics, v0, tl.best_val_sdr


def load_results(run_dir: str | Path) -> ResultTable:
    path = Path(run_dir) / "results.json"
    if not path.exists():
        return ResultTable()
    return ResultTable.from_json(json.loads(path.read_text(encoding="utf-8")))
