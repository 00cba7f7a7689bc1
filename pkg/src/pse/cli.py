"""``pse`` command line.

Exit codes: 0 success, 1 a run finished with failed cells, 2 usage or input
errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .audio import read_wav
from .corpus import SpeakerRef, load_manifest, summary
from .errors import PseError


def _parse_overrides(pairs: list[str]) -> dict:
    """``key=value`` pairs; values are parsed as JSON when possible."""
    out = {}
    for pair in pairs or []:
        key, sep, value = pair.partition("=")
        if not sep:
            raise argparse.ArgumentTypeError(f"override {pair!r} is not key=value")
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def _train_config(args):
    from .trainer import TrainConfig

    base = json.loads(Path(args.config).read_text()) if args.config else {}
    return TrainConfig.from_dict({**base, **_parse_overrides(args.set)})


def cmd_data_validate(args) -> int:
    m = load_manifest(args.manifest, validate_files=args.check_files, strict=args.strict)
    print(f"{args.manifest}: OK ({len(m.records)} records, kind {m.kind.value})")
    return 0


def cmd_data_summary(args) -> int:
    print(summary(load_manifest(args.manifest)), end="")
    return 0


def cmd_data_toyworld(args) -> int:
    from .toyworld import ToyWorldConfig, build_toy_world

    cfg = ToyWorldConfig(seed=args.seed, n_target_speakers=args.speakers)
    world = build_toy_world(args.out, cfg)
    print(f"toy world at {world.root}: G {world.generalist.total_duration_sec:.0f}s, "
          f"N {world.noise.total_duration_sec:.0f}s, targets {', '.join(world.target_ids)}")
    return 0


def cmd_mix(args) -> int:
    from .mixer import mixture_stream, write_mixtures

    stream = mixture_stream(load_manifest(args.speech), load_manifest(args.noise), args.count,
                            (args.snr_min, args.snr_max), args.segment_sec, args.seed)
    specs = write_mixtures(stream, args.out)
    print(f"wrote {args.count} mixtures; specs in {specs}")
    return 0


def cmd_synth(args) -> int:
    from .synthesis import build_augmented_set, external_backend, simulated_backend

    if args.backend == "sim":
        backend = simulated_backend(args.fidelity, args.distractor_seed)
    elif args.command:
        backend = external_backend(args.backend, args.command, args.timeout)
    else:
        print(f"error: backend {args.backend!r} needs --command (or use 'sim')", file=sys.stderr)
        return 2
    speaker = SpeakerRef(args.speaker_id or Path(args.speaker).stem, [read_wav(args.speaker)])
    m = build_augmented_set(backend, speaker, load_manifest(args.texts), args.duration, args.seed, args.out)
    print(f"wrote {len(m.records)} utterances ({m.total_duration_sec:.1f}s) to {args.out}")
    return 0


def cmd_train(args) -> int:
    from .mixer import mixture_stream
    from .sepnet import ModelSize, build_model
    from .trainer import train

    cfg = _train_config(args)
    speech, noise = load_manifest(args.speech), load_manifest(args.noise)
    vl = lambda m: m.partition("vl") if any(r.partition == "vl" for r in m.records) else m  # noqa: E731
    tr = lambda m: m.partition("tr") if any(r.partition == "tr" for r in m.records) else m  # noqa: E731
    val = list(mixture_stream(vl(speech), vl(noise), cfg.val_count, cfg.snr_range, cfg.segment_sec,
                              cfg.seed + 1_000_003))
    model = build_model(ModelSize(args.size), init_seed=cfg.seed)
    _, trainlog = train(model, tr(speech), tr(noise), val, cfg, out_dir=args.out)
    print(f"best val SDR {trainlog.best_val_sdr:.3f} dB at {trainlog.best_mixtures_seen} mixtures; "
          f"checkpoint {trainlog.best_checkpoint}")
    return 0


def cmd_finetune(args) -> int:
    from .trainer import finetune_pse

    cfg = _train_config(args)
    _, trainlog = finetune_pse(args.checkpoint, load_manifest(args.synth), load_manifest(args.noise), cfg,
                               out_dir=args.out)
    print(f"best val SDR {trainlog.best_val_sdr:.3f} dB at {trainlog.best_mixtures_seen} mixtures; "
          f"checkpoint {trainlog.best_checkpoint}")
    return 0


def cmd_eval(args) -> int:
    from .metrics import CommandAdapter, evaluate
    from .mixer import mixture_stream
    from .sepnet import enhance, load_checkpoint

    model = load_checkpoint(args.checkpoint)
    noise = load_manifest(args.noise)
    if any(r.partition == "te" for r in noise.records):
        noise = noise.partition("te")
    mixes = list(mixture_stream(load_manifest(args.speech), noise, args.count, (args.snr_min, args.snr_max),
                                args.segment_sec, args.seed))
    pesq = CommandAdapter("pesq", args.pesq_cmd) if args.pesq_cmd else CommandAdapter.from_env("PSE_PESQ_CMD", "pesq")
    ids = [f"{i:05d}_{m.spec.clean_id}" for i, m in enumerate(mixes)]
    report = evaluate([enhance(model, m.x).samples for m in mixes], mixes, ids, pesq=pesq,
                      condition_tags={"checkpoint": str(args.checkpoint), "size": model.config.size.value,
                                      "speech": str(args.speech)})
    csv_path, json_path = report.save(args.out)
    print(json.dumps(report.aggregates, indent=2, sort_keys=True))
    print(f"rows in {csv_path}; aggregates in {json_path}")
    return 0


def cmd_quality(args) -> int:
    from .metrics import CommandAdapter, assess_synthesis_quality

    mos = CommandAdapter("mos", args.mos_cmd) if args.mos_cmd else CommandAdapter.from_env("PSE_MOS_CMD", "mos")
    synth = load_manifest(args.synth)
    enroll = SpeakerRef(synth.records[0].speaker_id if synth.records else "speaker", [read_wav(args.enroll)])
    print(assess_synthesis_quality(synth, enroll, mos).to_markdown(), end="")
    return 0


def cmd_exp_run(args) -> int:
    from .experiments import ExperimentPlan, render_report, run_experiment

    plan_dict = json.loads(Path(args.plan).read_text())
    if args.output_dir:
        plan_dict["output_dir"] = args.output_dir
    plan_dict.setdefault("output_dir", str(Path(args.plan).with_suffix("")))
    plan = ExperimentPlan.from_dict(plan_dict)
    table = run_experiment(plan)
    print(render_report(table, title=plan.name))
    return 1 if table.any_failed else 0


def cmd_exp_report(args) -> int:
    from .experiments import load_results, render_report

    table = load_results(args.run_dir)
    literature = json.loads(Path(args.literature).read_text()) if args.literature else None
    text = render_report(table, literature, title=args.title)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    print(text)
    return 1 if table.any_failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pse", description="Personalized speech enhancement toolkit.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    data = sub.add_parser("data", help="manifest tools").add_subparsers(dest="data_command", required=True)
    d = data.add_parser("validate", help="parse and validate a manifest")
    d.add_argument("manifest")
    d.add_argument("--check-files", action="store_true", help="also require every referenced file to exist")
    d.add_argument("--strict", action="store_true", help="treat an empty manifest as an error")
    d.set_defaults(func=cmd_data_validate)
    d = data.add_parser("summary", help="per-speaker and per-partition durations")
    d.add_argument("manifest")
    d.set_defaults(func=cmd_data_summary)
    d = data.add_parser("toyworld", help="generate a synthetic corpus")
    d.add_argument("--out", required=True)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--speakers", type=int, default=3)
    d.set_defaults(func=cmd_data_toyworld)

    m = sub.add_parser("mix", help="write seeded noisy mixtures")
    m.add_argument("--speech", required=True)
    m.add_argument("--noise", required=True)
    m.add_argument("--count", type=int, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--snr-min", type=float, default=-5.0)
    m.add_argument("--snr-max", type=float, default=5.0)
    m.add_argument("--segment-sec", type=float, default=4.0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mix)

    s = sub.add_parser("synth", help="build an augmented set for one speaker")
    s.add_argument("--backend", required=True, help="'sim' for the simulated backend, otherwise a backend id")
    s.add_argument("--fidelity", type=float, default=1.0)
    s.add_argument("--distractor-seed", type=int, default=0)
    s.add_argument("--command", help="external command template with {text_file} {ref_wav} {out_wav}")
    s.add_argument("--timeout", type=float, default=120.0)
    s.add_argument("--speaker", required=True, help="enrollment WAV")
    s.add_argument("--speaker-id")
    s.add_argument("--texts", required=True)
    s.add_argument("--duration", type=float, default=60.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    for name, helptext in (("train", "train a generalist"), ("finetune", "finetune a generalist checkpoint")):
        t = sub.add_parser(name, help=helptext)
        if name == "train":
            t.add_argument("--speech", required=True)
            t.add_argument("--size", default="T", choices=["L", "M", "S", "T"])
            t.set_defaults(func=cmd_train)
        else:
            t.add_argument("--checkpoint", required=True)
            t.add_argument("--synth", required=True)
            t.set_defaults(func=cmd_finetune)
        t.add_argument("--noise", required=True)
        t.add_argument("--config", help="JSON file with TrainConfig fields")
        t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
        t.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="score a checkpoint on seeded test mixtures")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--speech", required=True)
    e.add_argument("--noise", required=True)
    e.add_argument("--count", type=int, default=30)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--snr-min", type=float, default=-5.0)
    e.add_argument("--snr-max", type=float, default=5.0)
    e.add_argument("--segment-sec", type=float, default=4.0)
    e.add_argument("--pesq-cmd", help="PESQ command template with {ref_wav} {deg_wav} {out_txt}")
    e.add_argument("--out", required=True, help="output stem for .csv and .json")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("quality", help="speaker similarity (and MOS estimate) of a synthesized set")
    q.add_argument("--synth", required=True)
    q.add_argument("--enroll", required=True, help="enrollment WAV of the target speaker")
    q.add_argument("--mos-cmd", help="MOS estimator template with {deg_wav} {out_txt}")
    q.set_defaults(func=cmd_quality)

    x = sub.add_parser("exp", help="experiment grids").add_subparsers(dest="exp_command", required=True)
    r = x.add_parser("run", help="run or resume a plan")
    r.add_argument("plan")
    r.add_argument("--output-dir")
    r.set_defaults(func=cmd_exp_run)
    r = x.add_parser("report", help="render the report of a run directory")
    r.add_argument("run_dir")
    r.add_argument("--literature", help="JSON: {condition: {size: {column: value}}}")
    r.add_argument("--title", default="Results")
    r.add_argument("--out")
    r.set_defaults(func=cmd_exp_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (PseError, FileNotFoundError, argparse.ArgumentTypeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
