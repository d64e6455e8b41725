"""Command-line entry point: synth / train / track / eval / ablate.

One YAML config drives every command; flags override file values, unknown keys
are rejected up front, and the effective configuration is echoed into the
output directory so any run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import yaml

from . import data as data_mod
from . import evaluate as eval_mod
from .core import save_boxes
from .model import (ModelConfig, build_model, load_checkpoint, save_checkpoint)
from .proto import UpdatePolicy, save_decision_log
from .train import (JsonlLogger, ScheduleConfig, train_stage1, train_stage2)

DEFAULT_INTERVALS = (25, 50, 100, 200, 500)


@dataclass(frozen=True)
class EngineConfig:
    interval: int = 50
    variant: str = "full"
    exclude_invisible: bool = False

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("engine.interval must be >= 1")
        UpdatePolicy.from_variant(self.variant)  # validates the name


@dataclass(frozen=True)
class SynthGenConfig:
    count: int = 5
    name_prefix: str = "seq"
    dwell: tuple[int, int] = (35, 70)
    occlusion_rate: float = 0.5
    base: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("synth.count must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/out"
    dataset: str | None = None
    checkpoint: str | None = None
    intervals: tuple[int, ...] = DEFAULT_INTERVALS
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    engine: EngineConfig = field(default_factory=EngineConfig)
    synth: SynthGenConfig = field(default_factory=SynthGenConfig)

    def to_dict(self) -> dict:
        raw = dataclasses.asdict(self)
        raw["intervals"] = list(self.intervals)
        raw["synth"]["dwell"] = list(self.synth.dwell)
        return raw


def _section(cls, data: dict, where: str):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ValueError(f"config section '{where}': unknown keys {unknown}")
    return cls(**data)


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Read the YAML config, apply CLI overrides, validate the whole schema."""
    raw: dict = {}
    if path:
        text = Path(path).read_text(encoding="utf-8")
        loaded = yaml.safe_load(text) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"config {path} must hold a mapping at top level")
        raw = loaded
    top_allowed = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = sorted(set(raw) - top_allowed)
    if unknown:
        raise ValueError(f"config: unknown top-level keys {unknown}")

    overrides = overrides or {}
    for key in ("seed", "out", "dataset", "checkpoint"):
        if overrides.get(key) is not None:
            raw[key] = overrides[key]
    if overrides.get("intervals") is not None:
        raw["intervals"] = overrides["intervals"]
    if overrides.get("variant") is not None:
        raw.setdefault("engine", {})
        raw["engine"] = dict(raw["engine"] or {})
        raw["engine"]["variant"] = overrides["variant"]

    seed = int(raw.get("seed", 0))
    model_raw = dict(raw.get("model") or {})
    model_raw.setdefault("seed", seed)
    engine_raw = dict(raw.get("engine") or {})
    synth_raw = dict(raw.get("synth") or {})
    if "dwell" in synth_raw:
        synth_raw["dwell"] = tuple(int(v) for v in synth_raw["dwell"])
    if "base" in synth_raw and synth_raw["base"]:
        data_mod.synth_spec_from_dict(dict(synth_raw["base"]), where="synth.base")

    cfg = RunConfig(
        seed=seed,
        out=str(raw.get("out", "runs/out")),
        dataset=raw.get("dataset"),
        checkpoint=raw.get("checkpoint"),
        intervals=tuple(int(v) for v in raw.get("intervals", DEFAULT_INTERVALS)),
        model=_section(ModelConfig, model_raw, "model"),
        schedule=_section(ScheduleConfig, dict(raw.get("schedule") or {}), "schedule"),
        engine=_section(EngineConfig, engine_raw, "engine"),
        synth=_section(SynthGenConfig, synth_raw, "synth"),
    )
    if not cfg.intervals or any(k < 1 for k in cfg.intervals):
        raise ValueError("intervals must be positive integers")
    return cfg


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config_effective.yaml").write_text(
        yaml.safe_dump(cfg.to_dict(), sort_keys=True), encoding="utf-8")


def _require(cfg: RunConfig, name: str) -> str:
    value = getattr(cfg, name)
    if not value:
        raise ValueError(f"--{name} (or config key '{name}') is required for this command")
    return value


def cmd_synth(cfg: RunConfig) -> Path:
    out_dir = Path(cfg.out)
    echo_config(cfg, out_dir)
    specs = data_mod.make_benchmark_specs(
        count=cfg.synth.count, seed=cfg.seed, base=dict(cfg.synth.base),
        dwell=cfg.synth.dwell, occlusion_rate=cfg.synth.occlusion_rate,
        name_prefix=cfg.synth.name_prefix)
    sequences = []
    for spec in specs:
        seq = data_mod.generate_sequence(spec)
        data_mod.write_sequence(seq, out_dir)
        sequences.append(seq)
    data_mod.write_manifest(out_dir, sequences, specs)
    print(f"wrote {len(sequences)} sequences to {out_dir}")
    return out_dir


def _train_state(stage: int, epoch: int, opt_arrays: dict) -> dict:
    state = {"progress:stage": np.asarray(stage), "progress:epoch": np.asarray(epoch)}
    state.update(opt_arrays)
    return state


def _resume_info(train_state: dict) -> tuple[int, int, dict]:
    stage = int(train_state.get("progress:stage", np.asarray(0)))
    epoch = int(train_state.get("progress:epoch", np.asarray(0)))
    arrays = {k: v for k, v in train_state.items() if k.startswith("opt:")}
    return stage, epoch, arrays


def cmd_train(cfg: RunConfig, stage: str = "all") -> dict[str, Path]:
    out_dir = Path(cfg.out)
    echo_config(cfg, out_dir)
    sequences = data_mod.load_dataset(_require(cfg, "dataset"))
    torch.manual_seed(cfg.seed)

    resume_stage, resume_epoch, resume_arrays = 0, 0, {}
    if cfg.checkpoint:
        # the archived config wins: training continues the architecture it started with
        model, train_state = load_checkpoint(cfg.checkpoint)
        resume_stage, resume_epoch, resume_arrays = _resume_info(train_state)
    else:
        if stage == "2":
            raise ValueError("--stage 2 needs a stage-1 checkpoint via --checkpoint")
        model = build_model(cfg.model)

    paths: dict[str, Path] = {}
    if stage in ("1", "all"):
        start = resume_epoch + 1 if resume_stage == 1 else 1
        arrays = resume_arrays if resume_stage == 1 else {}
        if start <= cfg.schedule.stage1_epochs:
            log = JsonlLogger(out_dir / "metrics_stage1.jsonl")
            try:
                result = train_stage1(model, sequences, cfg.schedule, seed=cfg.seed,
                                      log=log, start_epoch=start, resume_arrays=arrays)
            finally:
                log.close()
            save_checkpoint(out_dir / "stage1.ckpt", model,
                            _train_state(1, result.last_epoch, result.optimizer_arrays))
        else:
            save_checkpoint(out_dir / "stage1.ckpt", model,
                            _train_state(1, resume_epoch, arrays))
        paths["stage1"] = out_dir / "stage1.ckpt"
    if stage in ("2", "all"):
        start = resume_epoch + 1 if resume_stage == 2 else 1
        arrays = resume_arrays if resume_stage == 2 else {}
        log = JsonlLogger(out_dir / "metrics_stage2.jsonl")
        try:
            result = train_stage2(model, sequences, cfg.schedule, seed=cfg.seed,
                                  log=log, start_epoch=start, resume_arrays=arrays)
        finally:
            log.close()
        save_checkpoint(out_dir / "stage2.ckpt", model,
                        _train_state(2, result.last_epoch, result.optimizer_arrays))
        paths["stage2"] = out_dir / "stage2.ckpt"
    for name, p in paths.items():
        print(f"{name} checkpoint: {p}")
    return paths


def _load_model(cfg: RunConfig):
    model, _ = load_checkpoint(_require(cfg, "checkpoint"))
    model.eval()
    return model


def cmd_track(cfg: RunConfig) -> Path:
    out_dir = Path(cfg.out)
    echo_config(cfg, out_dir)
    sequences = data_mod.load_dataset(_require(cfg, "dataset"))
    model = _load_model(cfg)
    policy = UpdatePolicy.from_variant(cfg.engine.variant)
    records = eval_mod.track_dataset(model, sequences, cfg.engine.interval, policy)
    for sub in ("predictions", "scores", "decisions", "timing"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    for record in records:
        save_boxes(out_dir / "predictions" / f"{record.name}.txt", record.boxes)
        score_lines = [f"{i},{r!r},{c!r}\n" for i, (r, c) in
                       enumerate(zip(record.reliability, record.nir_prob))]
        (out_dir / "scores" / f"{record.name}.txt").write_text(
            "".join(score_lines), encoding="utf-8")
        save_decision_log(out_dir / "decisions" / f"{record.name}.txt", record.decisions)
        (out_dir / "timing" / f"{record.name}.txt").write_text(
            "".join(f"{t!r}\n" for t in record.frame_times), encoding="utf-8")
        if record.errors:
            (out_dir / "errors" ).mkdir(exist_ok=True)
            (out_dir / "errors" / f"{record.name}.txt").write_text(
                "".join(e + "\n" for e in record.errors), encoding="utf-8")
    n_err = sum(len(r.errors) for r in records)
    print(f"tracked {len(records)} sequences -> {out_dir}"
          + (f" ({n_err} frame errors)" if n_err else ""))
    return out_dir


def cmd_eval(cfg: RunConfig, predictions: str) -> Path:
    out_dir = Path(cfg.out)
    echo_config(cfg, out_dir)
    sequences = data_mod.load_dataset(_require(cfg, "dataset"))
    records = eval_mod.records_from_files(predictions, sequences)
    report = eval_mod.report_from_records(
        records, sequences, variant=cfg.engine.variant, interval=cfg.engine.interval,
        exclude_invisible=cfg.engine.exclude_invisible)
    eval_mod.save_report(report, out_dir)
    eval_mod.plot_curves(report, out_dir / "plots")
    for record, seq in list(zip(records, sequences))[:6]:
        if record.decisions:
            eval_mod.plot_update_timeline(
                record, seq, out_dir / "plots" / f"timeline_{seq.name}.png")
    print(f"PR {report.pr:.4f}  NPR {report.npr:.4f}  SR {report.sr:.4f}"
          f"  FPS {report.fps:.1f}")
    return out_dir


def cmd_ablate(cfg: RunConfig) -> Path:
    out_dir = Path(cfg.out)
    echo_config(cfg, out_dir)
    sequences = data_mod.load_dataset(_require(cfg, "dataset"))
    model = _load_model(cfg)
    variant_reports = eval_mod.run_variant_ablation(model, sequences,
                                                    interval=cfg.engine.interval)
    eval_mod.write_summary_csv(out_dir / "variants.csv",
                               [variant_reports[v] for v in eval_mod.VARIANTS])
    interval_reports = eval_mod.run_interval_ablation(model, sequences,
                                                      intervals=cfg.intervals)
    eval_mod.write_summary_csv(out_dir / "intervals.csv", interval_reports)
    eval_mod.save_report(variant_reports["full"], out_dir, stem="report_full")
    for v in eval_mod.VARIANTS:
        r = variant_reports[v]
        print(f"{v:>4}: PR {r.pr:.4f}  NPR {r.npr:.4f}  SR {r.sr:.4f}  FPS {r.fps:.1f}")
    for r in interval_reports:
        print(f"interval {r.interval:>3}: SR {r.sr:.4f}  FPS {r.fps:.1f}  "
              f"updates {r.applied_updates}")
    return out_dir


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prototrack",
        description="cross-modal prototype tracker: synthetic data, training, "
                    "tracking, evaluation, ablations")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, dataset=False, checkpoint=False):
        p.add_argument("--config", type=str, default=None, help="YAML config path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None, help="output directory")
        if dataset:
            p.add_argument("--dataset", type=str, default=None, help="sequence directory")
        if checkpoint:
            p.add_argument("--checkpoint", type=str, default=None)

    common(sub.add_parser("synth", help="generate a synthetic dataset"))
    p_train = sub.add_parser("train", help="run the two-stage training")
    common(p_train, dataset=True, checkpoint=True)
    p_train.add_argument("--stage", choices=("1", "2", "all"), default="all")
    p_track = sub.add_parser("track", help="track every sequence of a dataset")
    common(p_track, dataset=True, checkpoint=True)
    p_track.add_argument("--variant", choices=eval_mod.VARIANTS, default=None)
    p_eval = sub.add_parser("eval", help="score prediction files against ground truth")
    common(p_eval, dataset=True)
    p_eval.add_argument("--predictions", type=str, required=True,
                        help="directory written by 'track'")
    p_ablate = sub.add_parser("ablate", help="variant and update-interval tables")
    common(p_ablate, dataset=True, checkpoint=True)
    p_ablate.add_argument("--intervals", type=str, default=None,
                          help="comma-separated update intervals")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": getattr(args, "seed", None),
        "out": getattr(args, "out", None),
        "dataset": getattr(args, "dataset", None),
        "checkpoint": getattr(args, "checkpoint", None),
        "variant": getattr(args, "variant", None),
        "intervals": None,
    }
    if getattr(args, "intervals", None):
        overrides["intervals"] = [int(v) for v in args.intervals.split(",")]
    try:
        cfg = load_config(args.config, overrides)
        if args.command == "synth":
            cmd_synth(cfg)
        elif args.command == "train":
            cmd_train(cfg, stage=args.stage)
        elif args.command == "track":
            cmd_track(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, predictions=args.predictions)
        elif args.command == "ablate":
            cmd_ablate(cfg)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
