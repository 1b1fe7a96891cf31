"""Per-frame keyword loss, spectral-mapping regression losses, and their
weighted single-/multi-target combinations.

The keyword task fires on whole-keyword completion: frames from 15 before
the keyword-end frame through the end frame are labeled 1 (about 150 ms at
a 10 ms shift), everything else 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

PROB_FLOOR = 1e-7
WEIGHT_SUM_TOL = 1e-6
KEYWORD_TAIL_FRAMES = 15


@dataclass(frozen=True)
class LossWeights:
    """Task-mixing weights (alpha, beta, theta, delta); non-negative and
    summing to one."""

    alpha: float
    beta: float = 0.0
    theta: float = 0.0
    delta: float = 0.0

    def __post_init__(self):
        values = (self.alpha, self.beta, self.theta, self.delta)
        if any(v < 0 for v in values):
            raise ValueError(f"loss weights must be non-negative, got {values}")
        total = sum(values)
        if abs(total - 1.0) > WEIGHT_SUM_TOL:
            raise ValueError(
                f"loss weights must sum to 1, got {total} (residual {total - 1.0:+.3g})")

    @classmethod
    def single_target(cls, alpha: float) -> "LossWeights":
        if not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {alpha}")
        return cls(alpha=alpha, beta=1.0 - alpha)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.alpha, self.beta, self.theta, self.delta)


def frame_labels(n_frames: int, keyword_end_sample: int | None,
                 shift_samples: int, tail_frames: int = KEYWORD_TAIL_FRAMES) -> np.ndarray:
    """Per-frame binary keyword targets aligned to the feature frames."""
    labels = np.zeros(n_frames)
    if keyword_end_sample is None or n_frames == 0:
        return labels
    end_frame = min(n_frames - 1, int(keyword_end_sample) // int(shift_samples))
    labels[max(0, end_frame - tail_frames):end_frame + 1] = 1.0
    return labels


def _as_posterior_array(posteriors):
    if isinstance(posteriors, Tensor):
        return posteriors
    if isinstance(posteriors, (list, tuple)) and posteriors and hasattr(posteriors[0], "p_keyword"):
        return Tensor(np.array([f.p_keyword for f in posteriors]))
    return Tensor(np.asarray(posteriors, dtype=np.float64))


def kws_loss(posteriors, labels) -> Tensor:
    """Mean per-frame binary cross-entropy with probabilities clamped to
    [1e-7, 1 - 1e-7]."""
    p = _as_posterior_array(posteriors)
    y = np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise ValueError(f"posterior/label length mismatch: {p.shape} vs {y.shape}")
    p = ad.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -(Tensor(y) * ad.log(p) + Tensor(1.0 - y) * ad.log(1.0 - p)).mean()


def map_loss(predicted, target) -> Tensor:
    """Mean squared error between predicted and target feature frames."""
    pred = predicted if isinstance(predicted, Tensor) else Tensor(predicted)
    tgt = np.asarray(target, dtype=np.float64)
    if tgt.ndim == 3 and tgt.shape[1] == 1:  # single-channel FeatureTensor layout
        tgt = tgt[:, 0, :]
    if pred.shape != tgt.shape:
        raise ValueError(f"prediction/target shape mismatch: {pred.shape} vs {tgt.shape}")
    diff = pred - Tensor(tgt)
    return (diff * diff).mean()


def combine_single(kws, map_clean, alpha: float):
    """Two-task total: alpha * kws + (1 - alpha) * map_clean."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    return alpha * kws + (1.0 - alpha) * map_clean


def combine_multi(kws, map_clean, map_noise1, map_noise2, w: LossWeights):
    """Four-task total with weights summing to one."""
    total = sum(w.as_tuple())
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(
            f"loss weights must sum to 1, got {total} (residual {total - 1.0:+.3g})")
    return (w.alpha * kws + w.beta * map_clean
            + w.theta * map_noise1 + w.delta * map_noise2)


def masked_kws_loss(posteriors: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Batched keyword loss over padded [batch, frames] posteriors; padded
    frames (mask 0) contribute nothing."""
    y = np.asarray(labels, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    p = ad.clamp(posteriors, PROB_FLOOR, 1.0 - PROB_FLOOR)
    bce = -(Tensor(y * m) * ad.log(p) + Tensor((1.0 - y) * m) * ad.log(1.0 - p))
    return bce.sum() / m.sum()


def masked_map_loss(predicted: Tensor, target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Batched mapping loss over padded [batch, frames, bins] predictions."""
    tgt = np.asarray(target, dtype=np.float64)
    m = np.asarray(mask, dtype=np.float64)
    diff = predicted - Tensor(tgt)
    sq = diff * diff * Tensor(m[:, :, None])
    return sq.sum() / (m.sum() * tgt.shape[-1])
