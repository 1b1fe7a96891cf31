"""Channel-attention front end and GRU encoder with per-frame keyword
posteriors and optional spectral-mapping heads.

Per frame: score each channel with v . tanh(x_c W + b), softmax the scores
into attention weights, fuse the channels as a convex combination, then
run the fused feature through two GRU layers, a tanh FC layer, a 2-class
softmax keyword head, and zero/one/three linear mapping heads. Dropout
(inverted, keep-probability semantics) is applied to the GRU and FC
outputs in train mode only, never to the recurrent state.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .features import FeatureTensor, PcenParams, pcen_smoother, pcen_graph


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 6
    n_mels: int = 40
    att_proj: int = 128
    hidden: int = 128
    n_map_heads: int = 0
    dropout_keep: float = 0.9

    def __post_init__(self):
        if self.n_map_heads not in (0, 1, 3):
            raise ValueError(f"n_map_heads must be 0, 1 or 3, got {self.n_map_heads}")
        if not 0.0 < self.dropout_keep <= 1.0:
            raise ValueError(f"dropout_keep must be in (0,1], got {self.dropout_keep}")
        for name in ("channels", "n_mels", "att_proj", "hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


def _uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int,
                  name: str) -> Tensor:
    k = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-k, k, shape), requires_grad=True, name=name)


def _zeros(shape, name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)


class AttentionParams:
    """Soft channel attention: W projects a 40-dim channel feature to the
    scoring space, v reduces it to a scalar score."""

    def __init__(self, n_mels: int, proj: int, rng: np.random.Generator, prefix="att"):
        self.w = _uniform_init(rng, (n_mels, proj), n_mels, f"{prefix}.w")
        self.b = _zeros(proj, f"{prefix}.b")
        self.v = _uniform_init(rng, (proj,), proj, f"{prefix}.v")

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.w, self.b, self.v)}


class GruParams:
    """One GRU layer: update (z), reset (r) and candidate (h) gates."""

    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator, prefix="gru"):
        self.tensors: dict[str, Tensor] = {}
        for gate in ("z", "r", "h"):
            self.tensors[f"w_{gate}"] = _uniform_init(rng, (n_in, hidden), n_in,
                                                      f"{prefix}.w_{gate}")
            self.tensors[f"u_{gate}"] = _uniform_init(rng, (hidden, hidden), hidden,
                                                      f"{prefix}.u_{gate}")
            self.tensors[f"b_{gate}"] = _zeros(hidden, f"{prefix}.b_{gate}")

    def __getattr__(self, key):
        try:
            return self.__dict__["tensors"][key]
        except KeyError:
            raise AttributeError(key) from None

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.tensors.values()}


class ModelParams:
    """Every trainable tensor of the model, addressable by name."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        h, f = config.hidden, config.n_mels
        self.config = config
        self.attention = AttentionParams(f, config.att_proj, rng)
        self.gru1 = GruParams(f, h, rng, prefix="gru1")
        self.gru2 = GruParams(h, h, rng, prefix="gru2")
        self.fc_w = _uniform_init(rng, (h, h), h, "fc.w")
        self.fc_b = _zeros(h, "fc.b")
        self.out_w = _uniform_init(rng, (h, 2), h, "out.w")
        self.out_b = _zeros(2, "out.b")
        self.map_heads: list[tuple[Tensor, Tensor]] = [
            (_uniform_init(rng, (h, f), h, f"map{i}.w"), _zeros(f, f"map{i}.b"))
            for i in range(config.n_map_heads)
        ]
        self.pcen = PcenParams()

    def named_parameters(self) -> dict[str, Tensor]:
        named: dict[str, Tensor] = {}
        named.update(self.attention.named_parameters())
        named.update(self.gru1.named_parameters())
        named.update(self.gru2.named_parameters())
        for t in (self.fc_w, self.fc_b, self.out_w, self.out_b):
            named[t.name] = t
        for w, b in self.map_heads:
            named[w.name] = w
            named[b.name] = b
        named.update(self.pcen.named_parameters())
        return named

    def snapshot(self) -> "ModelParams":
        """Deep copy; safe to hand to other threads while training mutates
        the original in place."""
        return copy.deepcopy(self)


@dataclass
class PosteriorFrame:
    p_keyword: float
    p_filler: float
    map_predictions: list[np.ndarray] = field(default_factory=list)


def attend(x_t, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """Score and fuse one [channels, bins] frame.

    Returns (weights, fused): softmax channel weights summing to 1 and the
    weighted channel combination.
    """
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    if x.ndim != 2:
        raise ValueError(f"expected [channels, bins], got shape {x.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ValueError("attention input contains NaN/Inf")
    weights, fused = _attend_batch(x.reshape(1, *x.shape), params)
    return weights.reshape(x.shape[0]), fused.reshape(x.shape[1])


def _attend_batch(x: Tensor, params: AttentionParams) -> tuple[Tensor, Tensor]:
    """x: [batch, channels, bins] -> (weights [batch, channels],
    fused [batch, bins])."""
    b, c, f = x.shape
    flat = x.reshape(b * c, f)
    hidden = ad.tanh(ad.matmul(flat, params.w) + params.b)
    scores = ad.matmul(hidden, params.v.reshape(-1, 1)).reshape(b, c)
    weights = ad.softmax(scores, axis=1)
    fused = (weights.reshape(b, c, 1) * x).sum(axis=1)
    return weights, fused


def gru_step(x, h_prev, params: GruParams) -> Tensor:
    """One GRU update: h_new = (1 - z) * h_prev + z * h_candidate."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    h = h_prev if isinstance(h_prev, Tensor) else Tensor(h_prev)
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
        h = h.reshape(1, -1)
    z = ad.sigmoid(ad.matmul(x, params.w_z) + ad.matmul(h, params.u_z) + params.b_z)
    r = ad.sigmoid(ad.matmul(x, params.w_r) + ad.matmul(h, params.u_r) + params.b_r)
    cand = ad.tanh(ad.matmul(x, params.w_h) + ad.matmul(r * h, params.u_h) + params.b_h)
    h_new = (1.0 - z) * h + z * cand
    return h_new.reshape(-1) if squeeze else h_new


class _FusedGru:
    """Per-forward view of a GRU layer with the gate matmuls batched:
    one [in, 3H] input projection and one [H, 2H] state projection replace
    six separate products. Same arithmetic as gru_step, fewer BLAS calls."""

    def __init__(self, params: GruParams):
        self.hidden = params.u_h.shape[0]
        self.w_all = ad.concat([params.w_z, params.w_r, params.w_h], axis=1)
        self.u_zr = ad.concat([params.u_z, params.u_r], axis=1)
        self.b_zr = ad.concat([params.b_z, params.b_r], axis=0)
        self.u_h = params.u_h
        self.b_h = params.b_h

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        return self.step_projected(ad.matmul(x, self.w_all), h)

    def step_projected(self, xw: Tensor, h: Tensor) -> Tensor:
        """Advance from an already-projected input xw = x @ w_all; the
        projection has no recurrent dependency, so callers may compute it
        for a whole sequence in one product."""
        n = self.hidden
        gates = ad.sigmoid(xw[:, :2 * n] + ad.matmul(h, self.u_zr) + self.b_zr)
        z = gates[:, :n]
        r = gates[:, n:]
        cand = ad.tanh(xw[:, 2 * n:] + ad.matmul(r * h, self.u_h) + self.b_h)
        return (1.0 - z) * h + z * cand


def forward_batch(energies: np.ndarray, params: ModelParams, mode: str,
                  rng: np.random.Generator | None = None):
    """Run the full model over a padded batch of filterbank energies.

    energies: [batch, frames, channels, bins] (non-negative, zero-padded).
    Returns (posteriors [batch, frames], map_predictions list of
    [batch, frames, bins]) as autodiff tensors; record on a GradTape to
    train. Dropout draws from rng in train mode.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train"
    if training and params.config.dropout_keep < 1.0 and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    cfg = params.config
    batch, frames, channels, bins = energies.shape
    if channels != cfg.channels or bins != cfg.n_mels:
        raise ValueError(
            f"feature shape {channels}x{bins} does not match configured "
            f"{cfg.channels}x{cfg.n_mels}")

    empty_maps = [Tensor(np.zeros((batch, 0, bins))) for _ in params.map_heads]
    if frames == 0:
        return Tensor(np.zeros((batch, 0))), empty_maps

    if np.any(energies < 0):
        raise ValueError("filterbank energies must be non-negative")
    x = pcen_graph(energies, pcen_smoother(energies, params.pcen.s, axis=1), params.pcen)

    keep = cfg.dropout_keep
    gru1 = _FusedGru(params.gru1)
    gru2 = _FusedGru(params.gru2)
    h1 = Tensor(np.zeros((batch, cfg.hidden)))
    h2 = Tensor(np.zeros((batch, cfg.hidden)))
    post_parts: list[Tensor] = []
    map_parts: list[list[Tensor]] = [[] for _ in params.map_heads]

    for x_t in ad.unbind(x, axis=1):
        _, fused = _attend_batch(x_t, params.attention)
        h1 = gru1.step(fused, h1)
        h1_d = ad.dropout(h1, keep, rng, training)
        h2 = gru2.step(h1_d, h2)
        h2_d = ad.dropout(h2, keep, rng, training)
        fc = ad.tanh(ad.matmul(h2_d, params.fc_w) + params.fc_b)
        fc_d = ad.dropout(fc, keep, rng, training)
        probs = ad.softmax(ad.matmul(fc_d, params.out_w) + params.out_b, axis=1)
        post_parts.append(probs[:, 1:2])
        for head, (w, b) in enumerate(params.map_heads):
            pred = ad.matmul(fc_d, w) + b
            map_parts[head].append(pred.reshape(batch, 1, bins))

    posteriors = ad.concat(post_parts, axis=1)
    map_preds = [ad.concat(parts, axis=1) for parts in map_parts]
    return posteriors, map_preds


def forward_utterance(features: FeatureTensor, params: ModelParams, mode: str,
                      rng: np.random.Generator | None = None) -> list[PosteriorFrame]:
    """Run one utterance of filterbank energies through PCEN and the model,
    one PosteriorFrame per input frame."""
    values = features.values
    if values.shape[0] == 0:
        return []
    posteriors, map_preds = forward_batch(values[None, ...], params, mode, rng)
    p_kw = posteriors.data[0]
    maps = [m.data[0] for m in map_preds]
    return [
        PosteriorFrame(
            p_keyword=float(p_kw[t]),
            p_filler=float(1.0 - p_kw[t]),
            map_predictions=[m[t] for m in maps],
        )
        for t in range(values.shape[0])
    ]
