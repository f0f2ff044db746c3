"""Command-line interface.

Subcommands:
  info       print parameter and FLOP accounting for a model configuration
  synth      render synthetic sequences to disk
  train-toy  train a small model on synthetic data and save a checkpoint
  track      run the tracker over one sequence or a directory of sequences
  eval       score saved results against ground truth
  simmap     write the template/search similarity map for one frame

Exit codes: 0 success, 1 user error (bad arguments, config, or files),
2 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .backbone import ModelConfig, TrackerModel
from .costmodel import count_flops, count_params
from .tensor import ConfigError
from .tracking import (SynthSpec, TrackOptions, load_results, load_sequence,
                       metrics, save_results, save_sequence, similarity_map,
                       synth_sequence, track_sequence, crop_region)
from .train import TrainingDiverged, TrainSettings, make_fixed_pairs, train

__all__ = ["main", "RunConfig", "load_run_config"]


class UsageError(Exception):
    """Bad command line or inputs; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # route argparse failures through exit code 1
        raise UsageError(f"{self.prog}: {message}")


@dataclasses.dataclass
class RunConfig:
    """Validated contents of a --config JSON file."""

    model: ModelConfig
    training: TrainSettings
    tracking: TrackOptions
    paths: dict[str, str]


_PATH_KEYS = {"checkpoint", "sequences", "results", "out"}


def _section_from_dict(cls, data: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in '{section}' section: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


def load_run_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: invalid JSON: {e.msg}") from e
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(raw) - {"model", "training", "tracking", "paths"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections: {sorted(unknown)}")
    for key in ("model", "training", "tracking", "paths"):
        if key in raw and not isinstance(raw[key], dict):
            raise ConfigError(f"{path}: '{key}' section must be a JSON object")
    model = ModelConfig.from_dict(raw.get("model", {}))
    model.validate()
    training = _section_from_dict(TrainSettings, raw.get("training", {}), "training")
    training.validate()
    tracking = _section_from_dict(TrackOptions, raw.get("tracking", {}), "tracking")
    tracking.validate()
    paths = raw.get("paths", {})
    bad = set(paths) - _PATH_KEYS
    if bad:
        raise ConfigError(f"{path}: unknown keys in 'paths' section: {sorted(bad)}")
    for k, v in paths.items():
        if not isinstance(v, str):
            raise ConfigError(f"{path}: paths.{k} must be a string")
    return RunConfig(model=model, training=training, tracking=tracking, paths=paths)


def _run_config(args) -> RunConfig:
    if getattr(args, "config", None):
        return load_run_config(args.config)
    return RunConfig(model=ModelConfig(), training=TrainSettings(),
                     tracking=TrackOptions(), paths={})


def _sidecar(checkpoint) -> Path:
    return Path(checkpoint).with_suffix(".config.json")


def _load_model(checkpoint: str, cfg: RunConfig, args) -> TrackerModel:
    """Build the model for a checkpoint: model section of --config if given,
    else the checkpoint's .config.json sidecar."""
    model_cfg = cfg.model
    if not getattr(args, "config", None):
        side = _sidecar(checkpoint)
        if not side.exists():
            raise UsageError(f"no model config: pass --config or keep {side} "
                             f"next to the checkpoint")
        with open(side) as fh:
            model_cfg = ModelConfig.from_dict(json.load(fh))
        model_cfg.validate()
    model = TrackerModel(model_cfg, seed=0)
    model.load(checkpoint)
    return model


def _require(args, cfg: RunConfig, flag: str) -> str:
    value = getattr(args, flag, None) or cfg.paths.get(flag)
    if not value:
        raise UsageError(f"--{flag} is required (flag or paths.{flag} in --config)")
    return value


# -- subcommands ---------------------------------------------------------------


def _cmd_info(args) -> int:
    cfg = _run_config(args)
    report = count_flops(cfg.model)
    for line in report.lines():
        print(line)
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
        print(f"wrote {args.csv}")
    return 0


def _cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for k in range(args.count):
        seed = args.seed + k
        vel_rng = np.random.default_rng((seed, 9173))
        speed = vel_rng.uniform(1.0, 3.0)
        angle = vel_rng.uniform(0.0, 2.0 * np.pi)
        spec = SynthSpec(seed=seed, length=args.length,
                         frame_size=args.frame_size,
                         target_size=args.target_size,
                         velocity=(speed * float(np.cos(angle)),
                                   speed * float(np.sin(angle))),
                         motion=args.motion, distractor=args.distractor)
        seq = synth_sequence(spec)
        save_sequence(seq, out / seq.name)
        print(f"{seq.name}: {len(seq)} frames -> {out / seq.name}")
    return 0


def _cmd_train_toy(args) -> int:
    cfg = _run_config(args)
    model_cfg = cfg.model if args.config else ModelConfig.tiny()
    settings = cfg.training
    if args.steps is not None:
        settings.steps = args.steps
    if args.seed is not None:
        settings.seed = args.seed
    settings.validate()
    sequences = [synth_sequence(SynthSpec(seed=settings.seed * 1000 + k,
                                          length=8, frame_size=192,
                                          target_size=44.0,
                                          velocity=(1.5, -1.0)))
                 for k in range(args.sequences)]
    pairs = make_fixed_pairs(sequences, args.pairs, settings,
                             model_cfg.template_size, model_cfg.search_size)
    model = TrackerModel(model_cfg, seed=settings.seed)
    records = train(model, pairs, settings, log_every=args.log_every)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.npz"
    model.save(ckpt)
    _sidecar(ckpt).write_text(json.dumps(model_cfg.to_dict(), indent=2))
    with open(out / "loss.csv", "w") as fh:
        fh.write("step,loss,cls,reg,positives\n")
        for r in records:
            fh.write(f"{r.step},{r.loss:.6f},{r.cls:.6f},{r.reg:.6f},{r.positives}\n")
    print(f"final loss {records[-1].loss:.4f} after {settings.steps} steps; "
          f"checkpoint -> {ckpt}")
    return 0


def _discover_sequences(root: Path) -> list[Path]:
    if (root / "groundtruth.txt").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir()
                  if p.is_dir() and (p / "groundtruth.txt").exists())
    if not dirs:
        raise UsageError(f"{root}: no sequences found (need groundtruth.txt)")
    return dirs


def _cmd_track(args) -> int:
    cfg = _run_config(args)
    checkpoint = _require(args, cfg, "checkpoint")
    seq_root = Path(_require(args, cfg, "sequences"))
    out = Path(_require(args, cfg, "out"))
    model = _load_model(checkpoint, cfg, args)
    options = cfg.tracking
    if args.mode is not None:
        options.mode = args.mode
    options.validate()
    out.mkdir(parents=True, exist_ok=True)
    seq_dirs = _discover_sequences(seq_root)

    def run_one(d: Path) -> str:
        seq = load_sequence(d)
        results = track_sequence(model, seq, options)
        save_results(out / f"{seq.name}.txt", results)
        return f"{seq.name}: {len(seq)} frames"

    if args.jobs > 1 and len(seq_dirs) > 1:
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            for line in pool.map(run_one, seq_dirs):
                print(line)
    else:
        for d in seq_dirs:
            print(run_one(d))
    print(f"results -> {out}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _run_config(args)
    seq_root = Path(_require(args, cfg, "sequences"))
    res_root = Path(_require(args, cfg, "results"))
    seq_dirs = _discover_sequences(seq_root)
    scores = []
    for d in seq_dirs:
        res_file = res_root / f"{d.name}.txt"
        if not res_file.exists():
            raise UsageError(f"missing results file {res_file}")
        seq = load_sequence(d)
        results = load_results(res_file)
        m = metrics([b for b, _ in results], seq.boxes)
        scores.append(m)
        print(f"{d.name}: ao {m['ao']:.4f}  sr50 {m['sr50']:.4f}  "
              f"sr75 {m['sr75']:.4f}")
    ao = float(np.mean([m["ao"] for m in scores]))
    sr50 = float(np.mean([m["sr50"] for m in scores]))
    sr75 = float(np.mean([m["sr75"] for m in scores]))
    print(f"mean ({len(scores)} sequences): ao {ao:.4f}  sr50 {sr50:.4f}  "
          f"sr75 {sr75:.4f}")
    return 0


def _cmd_simmap(args) -> int:
    cfg = _run_config(args)
    checkpoint = _require(args, cfg, "checkpoint")
    model = _load_model(checkpoint, cfg, args)
    seq = load_sequence(args.sequence)
    if not 1 <= args.frame < len(seq):
        raise UsageError(f"--frame must be in [1, {len(seq) - 1}]")
    mcfg = model.config
    template, _ = crop_region(seq.frames[0], seq.boxes[0],
                              cfg.tracking.template_factor, mcfg.template_size)
    search, _ = crop_region(seq.frames[args.frame], seq.boxes[args.frame],
                            cfg.tracking.search_factor, mcfg.search_size)
    sims = similarity_map(model, template, search)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(out.with_suffix(".csv"), sims, delimiter=",", fmt="%.6f")
    gray = np.clip(np.round((sims + 1.0) * 127.5), 0, 255).astype(np.uint8)
    Image.fromarray(gray, mode="L").save(out.with_suffix(".png"))
    print(f"{sims.shape[0]}x{sims.shape[1]} map: min {sims.min():.4f} "
          f"max {sims.max():.4f} argmax {int(np.argmax(sims))}")
    print(f"wrote {out.with_suffix('.csv')} and {out.with_suffix('.png')}")
    return 0


# -- parser --------------------------------------------------------------------


def _build_parser() -> _Parser:
    parser = _Parser(prog="dualtrack",
                     description="Dual-branch transformer visual tracker.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("info", help="print parameter/FLOP accounting")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--csv", help="also write the report as CSV")
    p.set_defaults(func=_cmd_info)

    p = sub.add_parser("synth", help="render synthetic sequences")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--length", type=int, default=20)
    p.add_argument("--frame-size", type=int, default=256)
    p.add_argument("--target-size", type=float, default=48.0)
    p.add_argument("--motion", choices=("constant", "sinusoidal"),
                   default="constant")
    p.add_argument("--distractor", action="store_true")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train-toy", help="train a small model on synthetic data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--sequences", type=int, default=8)
    p.add_argument("--log-every", type=int, default=25)
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("track", help="run the tracker over sequences")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--checkpoint", help="model checkpoint (.npz)")
    p.add_argument("--sequences", help="sequence directory, or directory of them")
    p.add_argument("--out", help="directory for result files")
    p.add_argument("--mode", choices=("baseline", "st"), default=None)
    p.add_argument("--jobs", type=int, default=1,
                   help="worker threads across sequences")
    p.set_defaults(func=_cmd_track)

    p = sub.add_parser("eval", help="score results against ground truth")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--sequences", help="sequence directory, or directory of them")
    p.add_argument("--results", help="directory of result files from 'track'")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("simmap", help="write a template/search similarity map")
    p.add_argument("--config", help="run-config JSON file")
    p.add_argument("--checkpoint", help="model checkpoint (.npz)")
    p.add_argument("--sequence", required=True, help="one sequence directory")
    p.add_argument("--frame", type=int, default=1, help="search frame index")
    p.add_argument("--out", required=True,
                   help="output path prefix (.csv/.png appended)")
    p.set_defaults(func=_cmd_simmap)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except (UsageError, ConfigError, TrainingDiverged, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
