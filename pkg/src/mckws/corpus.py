"""Manifest-driven utterance loading, feature caching, and padded batch
assembly.

Features are cached as float32 filterbank energies (PCEN is applied later,
inside the model, where its parameters live); batches are zero-padded to
the per-batch maximum length with a frame-validity mask.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import wavio
from .datagen import read_manifest
from .errors import DataError
from .features import FrameConfig, frame_and_filterbank
from .losses import frame_labels


@dataclass
class Utterance:
    id: str
    label: str
    energies: np.ndarray  # [frames, channels, bins] float32
    labels: np.ndarray  # [frames] binary keyword targets
    duration_s: float
    targets: dict[str, np.ndarray] = field(default_factory=dict)  # name -> [frames, bins]

    @property
    def frames(self) -> int:
        return self.energies.shape[0]


def load_utterance(entry: dict, root: Path, cfg: FrameConfig,
                   target_names: tuple[str, ...] = ()) -> Utterance:
    rate, wav = wavio.read_wav(root / entry["wav"])
    if rate != cfg.sample_rate:
        raise DataError(
            f"{entry['id']}: wav rate {rate} != configured {cfg.sample_rate}")
    fb = frame_and_filterbank(wav, cfg)
    labels = frame_labels(fb.frames, entry.get("keyword_end_sample"), cfg.shift_samples)

    targets: dict[str, np.ndarray] = {}
    for name in target_names:
        rel = (entry.get("targets") or {}).get(name)
        if rel is None:
            raise DataError(f"{entry['id']}: manifest lacks required target {name!r}")
        _, mono = wavio.read_wav(root / rel)
        tfb = frame_and_filterbank(mono, cfg)
        targets[name] = tfb.values[:, 0, :].astype(np.float32)

    return Utterance(
        id=entry["id"], label=entry["label"],
        energies=fb.values.astype(np.float32), labels=labels,
        duration_s=wav.shape[1] / rate, targets=targets,
    )


def load_corpus(manifest_path, cfg: FrameConfig,
                target_names: tuple[str, ...] = ()) -> list[Utterance]:
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    if not entries:
        raise DataError(f"manifest is empty: {manifest_path}")
    root = manifest_path.parent
    return [load_utterance(e, root, cfg, target_names) for e in entries]


@dataclass
class Batch:
    ids: list[str]
    energies: np.ndarray  # [batch, frames, channels, bins] float64, zero-padded
    labels: np.ndarray  # [batch, frames]
    mask: np.ndarray  # [batch, frames]; 1 on real frames
    targets: dict[str, np.ndarray]  # name -> [batch, frames, bins] float64


def batch_schedule(utterances: list[Utterance], batch_size: int) -> list[list[int]]:
    """Deterministic length-bucketed groups: sort by (frames, id), chunk."""
    order = sorted(range(len(utterances)),
                   key=lambda i: (utterances[i].frames, utterances[i].id))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def assemble_batch(utterances: list[Utterance], indices: list[int],
                   target_names: tuple[str, ...] = (),
                   max_frames: int | None = None) -> Batch:
    """Pad (and optionally truncate) the selected utterances to a common
    frame count; padded frames carry mask 0 and contribute no loss."""
    chosen = [utterances[i] for i in indices]
    frames = [u.frames if max_frames is None else min(u.frames, max_frames)
              for u in chosen]
    t_max = max(frames)
    b = len(chosen)
    _, channels, bins = chosen[0].energies.shape

    energies = np.zeros((b, t_max, channels, bins))
    labels = np.zeros((b, t_max))
    mask = np.zeros((b, t_max))
    targets = {name: np.zeros((b, t_max, bins)) for name in target_names}
    for row, (u, t) in enumerate(zip(chosen, frames)):
        energies[row, :t] = u.energies[:t]
        labels[row, :t] = u.labels[:t]
        mask[row, :t] = 1.0
        for name in target_names:
            targets[name][row, :t] = u.targets[name][:t]
    return Batch(ids=[u.id for u in chosen], energies=energies, labels=labels,
                 mask=mask, targets=targets)
