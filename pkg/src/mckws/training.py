"""Adam training loop over the four regimes (keyword-only attention,
single-target mapping, transfer fine-tuning, transfer + multi-target
mapping), with length-bucketed padded batches, loss masking, best-validation
checkpoint retention, and a versioned binary checkpoint format.

Mapping targets are regressed in the PCEN domain: each step converts the
target filterbank energies with the current PCEN parameter values, detached
from the tape, so the model chases targets in its own input domain without
a gradient shortcut through the target path.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import GradTape, Tensor, backward
from .corpus import Batch, Utterance, assemble_batch, batch_schedule, load_corpus
from .errors import ConfigError, DivergenceError
from .features import FrameConfig, pcen_smoother
from .losses import LossWeights, combine_multi, combine_single, masked_kws_loss, \
    masked_map_loss
from .model import ModelConfig, ModelParams, forward_batch

CHECKPOINT_MAGIC = b"MCKWSCK\x01"
CHECKPOINT_VERSION = 1

MODE_HEADS = {"attention": 0, "mapping": 1, "transfer": 0, "transfer_multi_map": 3}
MODE_TARGETS = {
    "attention": (),
    "mapping": ("clean",),
    "transfer": (),
    "transfer_multi_map": ("clean", "noise1", "noise2"),
}
MAP_COMPONENTS = ("map_clean", "map_noise1", "map_noise2")

# sub-stream tags off the master seed
_TAG_INIT, _TAG_SHUFFLE, _TAG_DROPOUT = 100, 101, 102


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "attention"
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 0.001
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    dropout_keep: float = 0.9
    alpha: float = 0.5  # single-target KWS/mapping mix
    loss_weights: LossWeights | None = None
    init_checkpoint: str | None = None
    max_frames: int | None = None
    channels: int = 6

    def __post_init__(self):
        if self.mode not in MODE_HEADS:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of "
                              f"{sorted(MODE_HEADS)}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.mode in ("transfer", "transfer_multi_map") and not self.init_checkpoint:
            raise ConfigError(f"mode {self.mode!r} requires init_checkpoint")
        if self.mode == "mapping" and self.loss_weights is not None:
            if self.loss_weights.theta or self.loss_weights.delta:
                raise ConfigError("single-target mode requires theta = delta = 0")

    def resolved_loss_weights(self) -> LossWeights:
        if self.loss_weights is not None:
            return self.loss_weights
        if self.mode == "mapping":
            return LossWeights.single_target(self.alpha)
        if self.mode == "transfer_multi_map":
            return LossWeights(0.5, 0.2, 0.2, 0.1)
        return LossWeights(1.0)


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    model_config: ModelConfig
    train_config: dict
    rng_state: dict
    pcen_s: float = 0.025
    pcen_eps: float = 1e-6
    version: int = CHECKPOINT_VERSION


def _write_tensor(fh, name: str, data: np.ndarray):
    encoded = name.encode()
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", data.ndim))
    for dim in data.shape:
        fh.write(struct.pack("<Q", dim))
    fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def _read_tensor(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", fh.read(4))
    name = fh.read(name_len).decode()
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = tuple(struct.unpack("<Q", fh.read(8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape)
    return name, data.astype(np.float64)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Header (magic, version, tensor count), one record per tensor
    (params, then Adam moments under adam_m/ and adam_v/), then a JSON
    trailer with step, configs, PCEN constants and the RNG state."""
    import json

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries: list[tuple[str, np.ndarray]] = list(ckpt.params.items())
    entries += [(f"adam_m/{k}", v) for k, v in ckpt.adam_m.items()]
    entries += [(f"adam_v/{k}", v) for k, v in ckpt.adam_v.items()]
    meta = {
        "step": ckpt.step,
        "model_config": dataclasses.asdict(ckpt.model_config),
        "train_config": ckpt.train_config,
        "rng_state": ckpt.rng_state,
        "pcen_s": ckpt.pcen_s,
        "pcen_eps": ckpt.pcen_eps,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        fh.write(struct.pack("<I", len(entries)))
        for name, data in entries:
            _write_tensor(fh, name, np.asarray(data, dtype=np.float64))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    import json

    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic)")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (count,) = struct.unpack("<I", fh.read(4))
        params: dict[str, np.ndarray] = {}
        adam_m: dict[str, np.ndarray] = {}
        adam_v: dict[str, np.ndarray] = {}
        for _ in range(count):
            name, data = _read_tensor(fh)
            if name.startswith("adam_m/"):
                adam_m[name[len("adam_m/"):]] = data
            elif name.startswith("adam_v/"):
                adam_v[name[len("adam_v/"):]] = data
            else:
                params[name] = data
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        meta = json.loads(fh.read(blob_len).decode())
    return Checkpoint(
        params=params, adam_m=adam_m, adam_v=adam_v, step=meta["step"],
        model_config=ModelConfig(**meta["model_config"]),
        train_config=meta["train_config"], rng_state=meta["rng_state"],
        pcen_s=meta["pcen_s"], pcen_eps=meta["pcen_eps"], version=version,
    )


def params_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    params = ModelParams(ckpt.model_config, np.random.default_rng(0))
    params.pcen.s = ckpt.pcen_s
    params.pcen.eps = ckpt.pcen_eps
    named = params.named_parameters()
    missing = set(named) - set(ckpt.params)
    if missing:
        raise ValueError(f"checkpoint lacks parameters: {sorted(missing)}")
    for name, tensor in named.items():
        tensor.data = np.array(ckpt.params[name], dtype=np.float64)
    return params


def transfer_init(base: Checkpoint, model_config: ModelConfig,
                  rng: np.random.Generator) -> ModelParams:
    """Initialize from a trained checkpoint: shared parameters are copied
    exactly, parameters absent from the base (new mapping heads) keep their
    fresh initialization; optimizer moments start from zero."""
    params = ModelParams(model_config, rng)
    params.pcen.s = base.pcen_s
    params.pcen.eps = base.pcen_eps
    for name, tensor in params.named_parameters().items():
        source = base.params.get(name)
        if source is None:
            continue
        if source.shape != tensor.data.shape:
            raise ValueError(
                f"shape mismatch for shared parameter {name!r}: checkpoint "
                f"{source.shape} vs model {tensor.data.shape}")
        tensor.data = np.array(source, dtype=np.float64)
    return params


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              m: dict[str, np.ndarray], v: dict[str, np.ndarray], t: int,
              lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place; absent gradients count as
    zero (moments decay, parameter barely moves)."""
    if t < 1:
        raise ValueError(f"Adam step index must be >= 1, got {t}")
    for name, tensor in params.items():
        g = grads.get(name)
        g = np.zeros_like(tensor.data) if g is None else np.asarray(g)
        m[name] = beta1 * m[name] + (1.0 - beta1) * g
        v[name] = beta2 * v[name] + (1.0 - beta2) * g * g
        m_hat = m[name] / (1.0 - beta1 ** t)
        v_hat = v[name] / (1.0 - beta2 ** t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)


def pcen_target_features(energies: np.ndarray, params: ModelParams) -> np.ndarray:
    """Convert target filterbank energies [batch, frames, bins] to the PCEN
    domain with the current parameter values, detached from the tape."""
    p = params.pcen
    m = pcen_smoother(energies, p.s, axis=1)
    g, d, r = p.g.item(), p.d.item(), p.r.item()
    return (energies / (p.eps + m) ** g + d) ** r - d ** r


def batch_loss(batch: Batch, params: ModelParams, mode: str, weights: LossWeights,
               rng: np.random.Generator | None, training: bool):
    """Mode-dependent total loss plus per-component values for logging."""
    post, maps = forward_batch(batch.energies, params,
                               "train" if training else "eval", rng)
    kws = masked_kws_loss(post, batch.labels, batch.mask)
    components = {"kws": float(kws.data)}
    if mode == "mapping":
        target = pcen_target_features(batch.targets["clean"], params)
        map_clean = masked_map_loss(maps[0], target, batch.mask)
        total = combine_single(kws, map_clean, weights.alpha)
        components["map_clean"] = float(map_clean.data)
    elif mode == "transfer_multi_map":
        map_losses = []
        for i, name in enumerate(("clean", "noise1", "noise2")):
            target = pcen_target_features(batch.targets[name], params)
            map_losses.append(masked_map_loss(maps[i], target, batch.mask))
        total = combine_multi(kws, *map_losses, weights)
        for comp, value in zip(MAP_COMPONENTS, map_losses):
            components[comp] = float(value.data)
    else:
        total = kws
    components["total"] = float(total.data)
    return total, components


def _mean_components(rows: list[dict]) -> dict:
    keys = {k for row in rows for k in row}
    return {k: float(np.mean([row[k] for row in rows if k in row])) for k in keys}


def _split_loss(utterances: list[Utterance], groups: list[list[int]],
                params: ModelParams, config: TrainConfig, weights: LossWeights,
                target_names: tuple[str, ...]) -> dict:
    rows = []
    for group in groups:
        batch = assemble_batch(utterances, group, target_names, config.max_frames)
        _, components = batch_loss(batch, params, config.mode, weights, None,
                                   training=False)
        rows.append(components)
    return _mean_components(rows)


METRIC_COLUMNS = ("epoch", "split", "total", "kws", "map_clean", "map_noise1",
                  "map_noise2")


def write_metrics_csv(rows: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        cells = []
        for col in METRIC_COLUMNS:
            value = row.get(col)
            cells.append("" if value is None else
                         (str(value) if col in ("epoch", "split") else repr(float(value))))
        lines.append(",".join(cells))
    path.write_text("\n".join(lines) + "\n")


def train(config: TrainConfig, train_manifest, valid_manifest,
          model_config: ModelConfig | None = None,
          frame_cfg: FrameConfig | None = None,
          checkpoint_path=None, metrics_path=None,
          log=None) -> tuple[Checkpoint, list[dict]]:
    """Train per the configured regime; returns the best-validation
    checkpoint and the per-epoch metrics rows (also written as CSV when
    metrics_path is given). Fully deterministic for a fixed seed."""
    frame_cfg = frame_cfg or FrameConfig()
    heads = MODE_HEADS[config.mode]
    if model_config is None:
        model_config = ModelConfig(channels=config.channels, n_mels=frame_cfg.n_mels,
                                   n_map_heads=heads,
                                   dropout_keep=config.dropout_keep)
    elif model_config.n_map_heads != heads:
        raise ConfigError(
            f"mode {config.mode!r} needs {heads} map heads, model config has "
            f"{model_config.n_map_heads}")
    weights = config.resolved_loss_weights()
    target_names = MODE_TARGETS[config.mode]

    train_utts = load_corpus(train_manifest, frame_cfg, target_names)
    valid_utts = load_corpus(valid_manifest, frame_cfg, target_names)

    init_rng = np.random.default_rng(np.random.SeedSequence((config.seed, _TAG_INIT)))
    if config.mode in ("transfer", "transfer_multi_map"):
        base = load_checkpoint(config.init_checkpoint)
        params = transfer_init(base, model_config, init_rng)
    else:
        params = ModelParams(model_config, init_rng)

    named = params.named_parameters()
    adam_m = {k: np.zeros_like(t.data) for k, t in named.items()}
    adam_v = {k: np.zeros_like(t.data) for k, t in named.items()}
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((config.seed, _TAG_SHUFFLE)))
    dropout_rng = np.random.default_rng(np.random.SeedSequence((config.seed, _TAG_DROPOUT)))

    groups = batch_schedule(train_utts, config.batch_size)
    valid_groups = batch_schedule(valid_utts, config.batch_size)

    metrics: list[dict] = []
    best: Checkpoint | None = None
    best_loss = np.inf
    step = 0
    for epoch in range(1, config.epochs + 1):
        epoch_rows = []
        for group_index in shuffle_rng.permutation(len(groups)):
            batch = assemble_batch(train_utts, groups[int(group_index)],
                                   target_names, config.max_frames)
            step += 1
            with GradTape() as tape:
                total, components = batch_loss(batch, params, config.mode, weights,
                                               dropout_rng, training=True)
            if not np.isfinite(components["total"]):
                raise DivergenceError(step)
            grads = backward(total, tape)
            adam_step(named, {k: g.data for k, g in grads.items()}, adam_m, adam_v,
                      step, config.learning_rate, config.adam_beta1,
                      config.adam_beta2, config.adam_eps)
            params.pcen.clamp_()
            epoch_rows.append(components)

        train_row = {"epoch": epoch, "split": "train", **_mean_components(epoch_rows)}
        valid_row = {"epoch": epoch, "split": "valid",
                     **_split_loss(valid_utts, valid_groups, params, config, weights,
                                   target_names)}
        metrics.extend([train_row, valid_row])
        if log is not None:
            log(f"epoch {epoch}: train {train_row['total']:.5f} "
                f"valid {valid_row['total']:.5f}")

        if valid_row["total"] < best_loss:
            best_loss = valid_row["total"]
            best = Checkpoint(
                params={k: t.data.copy() for k, t in named.items()},
                adam_m={k: a.copy() for k, a in adam_m.items()},
                adam_v={k: a.copy() for k, a in adam_v.items()},
                step=step, model_config=model_config,
                train_config=_config_snapshot(config),
                rng_state=dropout_rng.bit_generator.state,
                pcen_s=params.pcen.s, pcen_eps=params.pcen.eps,
            )

    assert best is not None
    if checkpoint_path is not None:
        save_checkpoint(best, checkpoint_path)
    if metrics_path is not None:
        write_metrics_csv(metrics, metrics_path)
    return best, metrics


def _config_snapshot(config: TrainConfig) -> dict:
    snap = dataclasses.asdict(config)
    if config.loss_weights is not None:
        snap["loss_weights"] = list(config.loss_weights.as_tuple())
    return snap
