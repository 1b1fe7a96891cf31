"""Command-line front end: corpus synthesis, training, fine-tuning,
evaluation, and ROC sweeps.

Configuration precedence is CLI flags > --set overrides > JSON config file
> built-in defaults; all randomness flows from one --seed. Exit codes:
0 success, 2 config error, 3 data error, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .datagen import CorpusSpec, build_corpus
from .decode import SmoothingConfig, evaluate, roc_sweep
from .errors import ConfigError, DataError, DivergenceError
from .features import FrameConfig
from .losses import LossWeights
from .model import ModelConfig
from .training import MODE_HEADS, TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


def _parse_set_overrides(pairs: list[str]) -> dict:
    """--set key=value with dotted paths; values parse as JSON, falling
    back to plain strings."""
    overrides: dict = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, raw = pair.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = overrides
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return overrides


def _deep_update(base: dict, extra: dict) -> dict:
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def load_run_config(config_path: str | None, set_pairs: list[str]) -> dict:
    config: dict = {}
    if config_path:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            config = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise ConfigError(f"config file {path} is not valid JSON: {err}") from err
        if not isinstance(config, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    return _deep_update(config, _parse_set_overrides(set_pairs))


def _build_dataclass(cls, values: dict, section: str):
    try:
        return cls(**values)
    except TypeError as err:
        raise ConfigError(f"{section}: {err}") from err
    except ConfigError:
        raise
    except ValueError as err:
        raise ConfigError(f"{section}: {err}") from err


def build_train_setup(config: dict):
    """Split one flat-ish config dict into train/model/frame configs."""
    config = dict(config)
    model_values = config.pop("model", {})
    frame_values = config.pop("frame", {})
    config.pop("smoothing", None)  # decode-only section, allowed in shared files
    train_manifest = config.pop("train_manifest", None)
    valid_manifest = config.pop("valid_manifest", None)
    metrics_path = config.pop("metrics", None)
    if "loss_weights" in config and config["loss_weights"] is not None:
        weights = config["loss_weights"]
        if not isinstance(weights, (list, tuple)) or len(weights) != 4:
            raise ConfigError("loss_weights must be a list of four numbers")
        config["loss_weights"] = _build_dataclass(LossWeights, dict(
            alpha=weights[0], beta=weights[1], theta=weights[2], delta=weights[3]),
            "loss_weights")

    train_config = _build_dataclass(TrainConfig, config, "train config")
    frame_cfg = _build_dataclass(FrameConfig, frame_values, "frame config")

    model_cfg = None
    if model_values:
        model_values.setdefault("channels", train_config.channels)
        model_values.setdefault("n_mels", frame_cfg.n_mels)
        model_values.setdefault("n_map_heads", MODE_HEADS[train_config.mode])
        model_values.setdefault("dropout_keep", train_config.dropout_keep)
        model_cfg = _build_dataclass(ModelConfig, model_values, "model config")
    return train_config, model_cfg, frame_cfg, train_manifest, valid_manifest, metrics_path


def parse_threshold_range(spec: str) -> list[float]:
    """'start:stop:step' inclusive of stop (within half a step)."""
    parts = spec.split(":")
    if len(parts) != 3:
        raise ConfigError(f"--thresholds expects start:stop:step, got {spec!r}")
    try:
        start, stop, step = (float(p) for p in parts)
    except ValueError as err:
        raise ConfigError(f"--thresholds values must be numbers: {err}") from err
    if step <= 0 or stop < start:
        raise ConfigError("--thresholds needs step > 0 and stop >= start")
    return [float(t) for t in np.arange(start, stop + 0.5 * step, step)]


def cmd_synth_data(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise DataError(f"output directory {out} is not empty (use --force)")
    spec = _build_dataclass(CorpusSpec, dict(
        keywords=args.keywords, fillers=args.fillers, seed=args.seed,
        noisy_frac=args.noisy_frac, snr_train=args.snr_train,
        snr_eval_hard=args.snr_eval_hard, snr_eval_easy=args.snr_eval_easy,
        jitter_db=args.jitter_db, channels=args.channels,
        filler_duration_s=(args.filler_min, args.filler_max),
        eval_frac=args.eval_frac, valid_frac=args.valid_frac,
    ), "corpus spec")
    paths = build_corpus(spec, out)
    for name in sorted(paths):
        print(f"{name}: {paths[name]}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_run_config(args.config, args.set)
    if args.mode:
        config["mode"] = args.mode
    if args.init:
        config["init_checkpoint"] = args.init
    if args.seed is not None:
        config["seed"] = args.seed
    if args.train_manifest:
        config["train_manifest"] = args.train_manifest
    if args.valid_manifest:
        config["valid_manifest"] = args.valid_manifest

    (train_config, model_cfg, frame_cfg, train_manifest, valid_manifest,
     metrics_path) = build_train_setup(config)
    if not train_manifest or not valid_manifest:
        raise ConfigError("train_manifest and valid_manifest are required "
                          "(config keys or --train-manifest/--valid-manifest)")
    if args.metrics:
        metrics_path = args.metrics

    _, metrics = train(train_config, train_manifest, valid_manifest,
                       model_config=model_cfg, frame_cfg=frame_cfg,
                       checkpoint_path=args.out, metrics_path=metrics_path,
                       log=lambda msg: print(msg, flush=True))
    final_valid = [m for m in metrics if m["split"] == "valid"][-1]
    print(f"done: best checkpoint at {args.out} "
          f"(final valid loss {final_valid['total']:.6g})")
    return EXIT_OK


def _smoothing_from_args(args, threshold: float) -> SmoothingConfig:
    return SmoothingConfig(n=args.smooth_n, threshold=threshold,
                           hangover=args.hangover)


def cmd_eval(args) -> int:
    cfg = _smoothing_from_args(args, args.threshold)
    fa, wakeup = evaluate(args.ckpt, args.manifest, args.manifest, cfg,
                          frame_cfg=FrameConfig(), batch_size=args.batch_size,
                          threads=args.threads)
    print(f"fa_per_hour={fa:.6g} wakeup_rate={wakeup:.6g}")
    return EXIT_OK


def cmd_roc(args) -> int:
    thresholds = parse_threshold_range(args.thresholds)
    cfg = _smoothing_from_args(args, thresholds[0])
    curve = roc_sweep(args.ckpt, args.pos, args.neg, thresholds, cfg,
                      frame_cfg=FrameConfig(), csv_path=args.out,
                      batch_size=args.batch_size, threads=args.threads)
    print(f"wrote {len(curve.points)} operating points to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mckws",
        description="Multi-channel keyword spotting: synthesize a corpus, "
                    "train, fine-tune, and evaluate FA/hour vs wake-up rate.")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth-data", help="generate the synthetic corpus")
    synth.add_argument("--out", required=True)
    synth.add_argument("--keywords", type=int, required=True)
    synth.add_argument("--fillers", type=int, required=True)
    synth.add_argument("--noisy-frac", type=float, default=0.0)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--snr-train", type=float, default=-10.0)
    synth.add_argument("--snr-eval-hard", type=float, default=-20.0)
    synth.add_argument("--snr-eval-easy", type=float, default=-18.0)
    synth.add_argument("--jitter-db", type=float, default=0.0)
    synth.add_argument("--channels", type=int, default=6)
    synth.add_argument("--filler-min", type=float, default=2.0)
    synth.add_argument("--filler-max", type=float, default=3.5)
    synth.add_argument("--eval-frac", type=float, default=0.2)
    synth.add_argument("--valid-frac", type=float, default=0.1)
    synth.add_argument("--force", action="store_true")
    synth.set_defaults(func=cmd_synth_data)

    train_p = sub.add_parser("train", help="train or fine-tune a model")
    train_p.add_argument("--config", help="JSON config file")
    train_p.add_argument("--mode", choices=sorted(MODE_HEADS))
    train_p.add_argument("--init", help="checkpoint to fine-tune from")
    train_p.add_argument("--out", required=True, help="checkpoint output path")
    train_p.add_argument("--train-manifest")
    train_p.add_argument("--valid-manifest")
    train_p.add_argument("--metrics", help="metrics CSV output path")
    train_p.add_argument("--seed", type=int)
    train_p.add_argument("--set", action="append", metavar="KEY=VALUE",
                         help="override any config key (dotted paths allowed)")
    train_p.set_defaults(func=cmd_train)

    eval_p = sub.add_parser("eval", help="FA/hour and wake-up rate at one threshold")
    eval_p.add_argument("--ckpt", required=True)
    eval_p.add_argument("--manifest", required=True,
                        help="manifest holding keyword and filler records")
    eval_p.add_argument("--threshold", type=float, default=0.5)
    eval_p.set_defaults(func=cmd_eval)

    roc_p = sub.add_parser("roc", help="ROC sweep over a threshold range")
    roc_p.add_argument("--ckpt", required=True)
    roc_p.add_argument("--pos", required=True, help="manifest with keyword records")
    roc_p.add_argument("--neg", required=True, help="manifest with filler records")
    roc_p.add_argument("--thresholds", default="0.0:1.0:0.05",
                       metavar="START:STOP:STEP")
    roc_p.add_argument("--out", required=True, help="ROC CSV output path")
    roc_p.set_defaults(func=cmd_roc)

    for p in (eval_p, roc_p):
        p.add_argument("--smooth-n", type=int, default=12)
        p.add_argument("--hangover", type=float, default=100)
        p.add_argument("--batch-size", type=int, default=64)
    for p in (synth, train_p, eval_p, roc_p):
        p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DivergenceError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as err:  # ConfigError and other validation failures
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
