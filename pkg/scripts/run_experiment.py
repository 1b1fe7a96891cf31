#!/usr/bin/env python3
"""End-to-end comparison of the four training regimes on a synthetic
multi-channel corpus.

Synthesizes the corpus (clean + noisy variants), trains the attention
baseline and the single-target mapping model on clean data, fine-tunes
transfer and transfer+multi-target models on the noisy data, then sweeps
ROC curves on the clean/hard/easy eval splits and reports wake-up rates at
the 0.1 and 0.5 FA/hour operating points.

Example:
    python3 scripts/run_experiment.py --out runs/exp1 --keywords 2000 \
        --fillers 2000 --epochs 8 --finetune-epochs 5
"""

import argparse
import time
from pathlib import Path

import numpy as np

from mckws.datagen import CorpusSpec, build_corpus
from mckws.decode import SmoothingConfig, roc_sweep, wakeup_at_fa
from mckws.training import TrainConfig, train

REGIMES = ("attention", "mapping", "transfer", "transfer_multi_map")


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", required=True, type=Path)
    parser.add_argument("--keywords", type=int, default=2000)
    parser.add_argument("--fillers", type=int, default=2000)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--finetune-epochs", type=int, default=5)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--noisy-frac", type=float, default=0.5)
    parser.add_argument("--threads", type=int, default=2)
    args = parser.parse_args()

    out = args.out
    started = time.monotonic()

    def elapsed() -> str:
        return f"[{time.monotonic() - started:7.1f}s]"

    corpus_dir = out / "corpus"
    if (corpus_dir / "train.jsonl").exists():
        print(f"{elapsed()} reusing corpus at {corpus_dir}")
        names = ("train", "valid", "eval", "train_noisy", "valid_noisy",
                 "eval_hard", "eval_easy")
        paths = {n: corpus_dir / f"{n}.jsonl" for n in names}
    else:
        print(f"{elapsed()} synthesizing corpus ...")
        spec = CorpusSpec(keywords=args.keywords, fillers=args.fillers,
                          seed=args.seed, noisy_frac=args.noisy_frac)
        paths = build_corpus(spec, corpus_dir)

    checkpoints: dict[str, Path] = {}
    for regime in REGIMES:
        ckpt = out / f"{regime}.ckpt"
        checkpoints[regime] = ckpt
        if ckpt.exists():
            print(f"{elapsed()} reusing checkpoint {ckpt}")
            continue
        finetune = regime in ("transfer", "transfer_multi_map")
        config = TrainConfig(
            mode=regime,
            epochs=args.finetune_epochs if finetune else args.epochs,
            batch_size=args.batch_size, seed=args.seed,
            init_checkpoint=str(checkpoints["attention"]) if finetune else None,
        )
        split = "noisy" if finetune else "clean"
        train_manifest = paths["train_noisy" if finetune else "train"]
        valid_manifest = paths["valid_noisy" if finetune else "valid"]
        print(f"{elapsed()} training {regime} on {split} data "
              f"({config.epochs} epochs) ...")
        train(config, train_manifest, valid_manifest, checkpoint_path=ckpt,
              metrics_path=out / f"{regime}_metrics.csv",
              log=lambda msg: print(f"{elapsed()}   {msg}", flush=True))

    thresholds = [round(t, 4) for t in np.linspace(0.02, 0.98, 49)]
    smoothing = SmoothingConfig()
    print(f"\n{elapsed()} ROC sweeps (smoothing n={smoothing.n}, "
          f"hangover {smoothing.hangover} frames)")
    header = f"{'regime':18s} {'split':10s} " + " ".join(
        f"wake@{fa}FA/h" for fa in (0.1, 0.5))
    print(header)
    for split in ("eval", "eval_hard", "eval_easy"):
        for regime in REGIMES:
            csv_path = out / f"roc_{regime}_{split}.csv"
            curve = roc_sweep(checkpoints[regime], paths[split], paths[split],
                              thresholds, smoothing, csv_path=csv_path,
                              threads=args.threads)
            cells = []
            for fa_budget in (0.1, 0.5):
                point = wakeup_at_fa(curve, fa_budget)
                cells.append(f"{point.wakeup_rate:11.3f}" if point else
                             f"{'n/a':>11s}")
            print(f"{regime:18s} {split:10s} " + " ".join(cells))
    print(f"\n{elapsed()} ROC CSVs and metrics written under {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
