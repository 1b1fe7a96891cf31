"""Posterior smoothing, thresholded detection with hangover suppression,
and FA-per-hour / wake-up-rate evaluation with ROC sweeps.

Smoothing is a trailing (causal) window mean, shorter at the sequence
start. A detection fires at the first smoothed frame at or above the
threshold; the automaton then stays quiet so that an event at frame t
allows the next one no earlier than t + hangover. One keyword therefore
counts once, and event counts at threshold 0 close to ceil(frames/hangover)
per utterance.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Utterance, assemble_batch, batch_schedule, load_corpus
from .errors import DataError
from .features import FrameConfig
from .model import ModelParams, forward_batch
from .training import Checkpoint, load_checkpoint, params_from_checkpoint


@dataclass(frozen=True)
class SmoothingConfig:
    n: int = 12
    threshold: float = 0.5
    hangover: float = 100  # frames; math.inf allows one event per utterance

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"smoothing window must be >= 1, got {self.n}")
        if self.hangover < 0:
            raise ValueError(f"hangover must be >= 0, got {self.hangover}")


@dataclass(frozen=True)
class RocPoint:
    threshold: float
    fa_per_hour: float
    wakeup_rate: float


@dataclass
class RocCurve:
    """Operating points ordered by ascending threshold; both rates must be
    non-increasing along the sweep."""

    points: list[RocPoint]

    def __post_init__(self):
        thresholds = [p.threshold for p in self.points]
        if thresholds != sorted(thresholds):
            raise ValueError("ROC points must be ordered by ascending threshold")
        for prev, cur in zip(self.points, self.points[1:]):
            if cur.fa_per_hour > prev.fa_per_hour + 1e-12:
                raise ValueError(
                    f"fa_per_hour increased from {prev.fa_per_hour} to "
                    f"{cur.fa_per_hour} at threshold {cur.threshold}")
            if cur.wakeup_rate > prev.wakeup_rate + 1e-12:
                raise ValueError(
                    f"wakeup_rate increased from {prev.wakeup_rate} to "
                    f"{cur.wakeup_rate} at threshold {cur.threshold}")

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        lines = ["threshold,fa_per_hour,wakeup_rate"]
        lines += [f"{p.threshold:.6g},{p.fa_per_hour:.6g},{p.wakeup_rate:.6g}"
                  for p in self.points]
        path.write_text("\n".join(lines) + "\n")


def wakeup_at_fa(curve: RocCurve, max_fa_per_hour: float) -> RocPoint | None:
    """Best operating point with fa_per_hour <= the given budget, or None
    if even the highest threshold exceeds it."""
    feasible = [p for p in curve.points if p.fa_per_hour <= max_fa_per_hour]
    if not feasible:
        return None
    return max(feasible, key=lambda p: p.wakeup_rate)


def smooth(posteriors, n: int) -> np.ndarray:
    """Trailing mean over the last n frames (shorter at the start)."""
    if n < 1:
        raise ValueError(f"smoothing window must be >= 1, got {n}")
    p = np.asarray(posteriors, dtype=np.float64)
    if p.size == 0:
        return np.zeros(0)
    return np.array([np.mean(p[max(0, t - n + 1):t + 1]) for t in range(p.size)])


def detect(smoothed, cfg: SmoothingConfig) -> list[int]:
    """Frame indices of detection events after hangover suppression."""
    events: list[int] = []
    next_allowed = 0.0
    for t, value in enumerate(np.asarray(smoothed, dtype=np.float64)):
        if t >= next_allowed and value >= cfg.threshold:
            events.append(t)
            next_allowed = t + cfg.hangover
    return events


def compute_posteriors(params: ModelParams, utterances: list[Utterance],
                       batch_size: int = 64, threads: int = 1
                       ) -> dict[str, np.ndarray]:
    """Eval-mode forward over all utterances; id -> per-frame p_keyword.

    Per-utterance results are independent, so threading over batches keeps
    outputs identical to the sequential run.
    """
    groups = batch_schedule(utterances, batch_size)

    def run(group: list[int]) -> list[tuple[str, np.ndarray]]:
        batch = assemble_batch(utterances, group)
        post, _ = forward_batch(batch.energies, params, "eval")
        return [(utterances[i].id, post.data[row, :utterances[i].frames].copy())
                for row, i in enumerate(group)]

    if threads > 1 and len(groups) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, groups))
    else:
        chunks = [run(g) for g in groups]
    return {uid: post for chunk in chunks for uid, post in chunk}


def _count_events(utterances: list[Utterance], smoothed: dict[str, np.ndarray],
                  cfg: SmoothingConfig) -> dict[str, int]:
    return {u.id: len(detect(smoothed[u.id], cfg)) for u in utterances}


def _resolve_params(checkpoint) -> ModelParams:
    if isinstance(checkpoint, ModelParams):
        return checkpoint
    if isinstance(checkpoint, Checkpoint):
        return params_from_checkpoint(checkpoint)
    return params_from_checkpoint(load_checkpoint(checkpoint))


def _load_eval_sets(positive_manifest, negative_manifest, frame_cfg: FrameConfig):
    """Keyword records from the positive manifest, filler records from the
    negative one; the same manifest may serve both roles."""
    pos_pool = load_corpus(positive_manifest, frame_cfg)
    if Path(positive_manifest) == Path(negative_manifest):
        neg_pool = pos_pool
    else:
        neg_pool = load_corpus(negative_manifest, frame_cfg)
    positives = [u for u in pos_pool if u.label == "keyword"]
    negatives = [u for u in neg_pool if u.label == "filler"]
    if not positives:
        raise DataError(f"no keyword utterances in {positive_manifest}")
    if not negatives:
        raise DataError(f"no filler utterances in {negative_manifest}")
    return positives, negatives


def _operating_point(positives, negatives, smoothed, cfg: SmoothingConfig
                     ) -> tuple[float, float]:
    negative_hours = sum(u.duration_s for u in negatives) / 3600.0
    if negative_hours <= 0:
        raise DataError("negative set has zero duration")
    pos_counts = _count_events(positives, smoothed, cfg)
    neg_counts = _count_events(negatives, smoothed, cfg)
    wakeup = sum(1 for c in pos_counts.values() if c > 0) / len(positives)
    fa_per_hour = sum(neg_counts.values()) / negative_hours
    return fa_per_hour, wakeup


def evaluate(checkpoint, positive_manifest, negative_manifest,
             cfg: SmoothingConfig, frame_cfg: FrameConfig | None = None,
             batch_size: int = 64, threads: int = 1) -> tuple[float, float]:
    """(fa_per_hour, wakeup_rate) at the configured threshold."""
    frame_cfg = frame_cfg or FrameConfig()
    params = _resolve_params(checkpoint)
    positives, negatives = _load_eval_sets(positive_manifest, negative_manifest,
                                           frame_cfg)
    posteriors = compute_posteriors(params, positives + negatives,
                                    batch_size=batch_size, threads=threads)
    smoothed = {uid: smooth(p, cfg.n) for uid, p in posteriors.items()}
    return _operating_point(positives, negatives, smoothed, cfg)


def roc_sweep(checkpoint, positive_manifest, negative_manifest,
              thresholds, cfg: SmoothingConfig | None = None,
              frame_cfg: FrameConfig | None = None, csv_path=None,
              batch_size: int = 64, threads: int = 1) -> RocCurve:
    """One operating point per threshold, sharing a single forward pass and
    a single smoothing pass across the whole sweep."""
    thresholds = [float(t) for t in thresholds]
    if thresholds != sorted(thresholds):
        raise ValueError("thresholds must be sorted ascending")
    cfg = cfg or SmoothingConfig()
    frame_cfg = frame_cfg or FrameConfig()
    params = _resolve_params(checkpoint)
    positives, negatives = _load_eval_sets(positive_manifest, negative_manifest,
                                           frame_cfg)
    posteriors = compute_posteriors(params, positives + negatives,
                                    batch_size=batch_size, threads=threads)
    smoothed = {uid: smooth(p, cfg.n) for uid, p in posteriors.items()}

    points = []
    for threshold in thresholds:
        point_cfg = SmoothingConfig(n=cfg.n, threshold=threshold,
                                    hangover=cfg.hangover)
        fa, wakeup = _operating_point(positives, negatives, smoothed, point_cfg)
        points.append(RocPoint(threshold, fa, wakeup))
    curve = RocCurve(points)
    if csv_path is not None:
        curve.to_csv(csv_path)
    return curve
