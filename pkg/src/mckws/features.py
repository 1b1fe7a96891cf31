"""Waveform-to-feature front end: framed mel filterbank energies plus
trainable per-channel energy normalization (PCEN).

All channels are framed synchronously, so a multi-channel waveform maps to
a [frames, channels, bins] FeatureTensor. PCEN's gain/bias/root exponents
are autodiff parameters; the energy smoother coefficient stays fixed so
the backward tape does not have to unroll the IIR filter.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class FrameConfig:
    sample_rate: int = 16000
    window: float = 0.025
    shift: float = 0.010
    n_mels: int = 40

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not self.window >= self.shift > 0:
            raise ValueError(
                f"need window >= shift > 0, got window={self.window}, shift={self.shift}")
        if self.n_mels < 1:
            raise ValueError(f"n_mels must be >= 1, got {self.n_mels}")

    @property
    def window_samples(self) -> int:
        return int(round(self.window * self.sample_rate))

    @property
    def shift_samples(self) -> int:
        return int(round(self.shift * self.sample_rate))

    @property
    def n_fft(self) -> int:
        return 1 << (self.window_samples - 1).bit_length()


@dataclass
class FeatureTensor:
    """[frames, channels, bins] feature array; all channels share one
    framing, values must stay finite."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ValueError(f"expected [frames, channels, bins], got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("feature values must be finite")

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    @property
    def bins(self) -> int:
        return self.values.shape[2]


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular HTK-mel filters spanning 0..Nyquist, area-normalized.

    Returns weights [n_mels, n_fft//2 + 1] applied to the power spectrum.
    """
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)

    edges_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)
    weights = np.zeros((n_mels, freqs.size))
    for m in range(n_mels):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rise = (freqs - lo) / (center - lo)
        fall = (hi - freqs) / (hi - center)
        tri = np.maximum(0.0, np.minimum(rise, fall))
        weights[m] = tri * (2.0 / (hi - lo))
    if np.any(weights.sum(axis=1) == 0):
        raise ValueError(f"n_mels={n_mels} too dense for n_fft={n_fft} at {sample_rate} Hz")
    return weights


def mel_center_frequencies(n_mels: int, sample_rate: int) -> np.ndarray:
    """Center frequency in Hz of each triangular filter."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    edges = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), n_mels + 2)
    return 700.0 * (10.0 ** (edges[1:-1] / 2595.0) - 1.0)


def frame_and_filterbank(pcm, cfg: FrameConfig) -> FeatureTensor:
    """Frame multi-channel PCM and extract mel filterbank energies.

    pcm is [channels, samples] (a 1-D array counts as one channel); Hann
    window, magnitude-squared spectrum, triangular mel filters. Produces
    floor((N - window)/shift) + 1 frames.
    """
    if isinstance(pcm, (list, tuple)):
        lengths = {len(ch) for ch in pcm}
        if len(lengths) > 1:
            raise ValueError(f"channel length mismatch: {sorted(lengths)}")
    pcm = np.atleast_2d(np.asarray(pcm, dtype=np.float64))
    if pcm.ndim != 2:
        raise ValueError(f"expected [channels, samples], got shape {pcm.shape}")
    win, hop = cfg.window_samples, cfg.shift_samples
    n = pcm.shape[1]
    if n < win:
        raise ValueError(f"input of {n} samples is shorter than one {win}-sample window")

    frames = np.lib.stride_tricks.sliding_window_view(pcm, win, axis=1)[:, ::hop]
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    spectrum = np.fft.rfft(frames * window, n=cfg.n_fft, axis=2)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    weights = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate)
    energies = power @ weights.T  # [channels, frames, n_mels]
    return FeatureTensor(np.ascontiguousarray(energies.transpose(1, 0, 2)))


class PcenParams:
    """Trainable PCEN: output = (E/(eps + M)^g + d)^r - d^r.

    g (gain), d (bias) and r (root) are autodiff scalars; the smoother
    coefficient s and the floor eps are fixed. clamp_() projects the
    trainables back into their valid ranges after an optimizer step.
    """

    def __init__(self, g: float = 0.98, d: float = 2.0, r: float = 0.5,
                 s: float = 0.025, eps: float = 1e-6, prefix: str = "pcen"):
        if not 0.0 < s < 1.0:
            raise ValueError(f"smoothing coefficient must be in (0,1), got {s}")
        if g <= 0.0:
            raise ValueError(f"gain exponent must be > 0, got {g}")
        if d < 0.0:
            raise ValueError(f"bias must be >= 0, got {d}")
        if not 0.0 < r <= 1.0:
            raise ValueError(f"root exponent must be in (0,1], got {r}")
        if eps <= 0.0:
            raise ValueError(f"eps must be positive, got {eps}")
        self.s = float(s)
        self.eps = float(eps)
        self.g = Tensor(float(g), requires_grad=True, name=f"{prefix}.g")
        self.d = Tensor(float(d), requires_grad=True, name=f"{prefix}.d")
        self.r = Tensor(float(r), requires_grad=True, name=f"{prefix}.r")

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in (self.g, self.d, self.r)}

    def clamp_(self) -> None:
        # strictly positive floor on d keeps d^r differentiable
        self.g.data = np.maximum(self.g.data, 1e-4)
        self.d.data = np.maximum(self.d.data, 1e-6)
        self.r.data = np.clip(self.r.data, 1e-4, 1.0)


def pcen_smoother(energies: np.ndarray, s: float, axis: int = 0) -> np.ndarray:
    """First-order IIR smoother along the frame axis, seeded at frame 0:
    M_t = (1-s) M_{t-1} + s E_t with M_0 = E_0."""
    energies = np.asarray(energies, dtype=np.float64)
    if energies.shape[axis] == 0:
        return energies.copy()
    zi = (1.0 - s) * np.take(energies, [0], axis=axis)
    smoothed, _ = lfilter([s], [1.0, -(1.0 - s)], energies, axis=axis, zi=zi)
    return smoothed


def pcen_graph(energies: np.ndarray, smoothed: np.ndarray, params: PcenParams) -> Tensor:
    """PCEN as an autodiff expression over constant energy arrays;
    gradients flow to params.g/d/r."""
    e = Tensor(energies)
    m = Tensor(smoothed)
    normalized = e / ad.power(Tensor(params.eps) + m, params.g)
    return ad.power(normalized + params.d, params.r) - ad.power(params.d, params.r)


def pcen(fb: FeatureTensor, params: PcenParams) -> FeatureTensor:
    """Apply PCEN to filterbank energies (plain-numpy forward path)."""
    energies = fb.values
    if np.any(energies < 0):
        raise ValueError("PCEN requires non-negative energies")
    smoothed = pcen_smoother(energies, params.s)
    g, d, r = params.g.item(), params.d.item(), params.r.item()
    out = (energies / (params.eps + smoothed) ** g + d) ** r - d ** r
    return FeatureTensor(out)
