"""Synthetic multi-channel corpus: keyword/filler synthesis through a
simulated microphone array, SNR-exact noise mixing, and the multi-target
construction (noisy input plus clean/+5dB/+10dB mapping targets).

Array geometry is simulated as a per-channel integer sample delay and
linear gain plus independent Gaussian sensor noise; "music" interference
is a sum of slowly amplitude-modulated tones over pink noise, placed to
overlap the keyword band so low-SNR conditions are genuinely hard. The
single-channel conversion undoes the known delays/gains and averages
(oracle delay-and-sum), standing in for a beamforming front end.

All randomness derives from integer seeds through named streams, so a
corpus regenerated from the same master seed is byte-identical.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import wavio

KEYWORD_BASE_AMP = 0.05
MUSIC_RMS = 0.02
SENSOR_SNR_DB = 40.0
WAV_PEAK = 0.97

# stream tags so one master seed feeds independent per-record generators
_TAG_KEYWORD, _TAG_FILLER, _TAG_MUSIC, _TAG_MIX = 1, 2, 3, 4


@dataclass(frozen=True)
class ArrayGeometry:
    """Per-channel integer sample delays (>= 0) and linear gains (> 0)."""

    delays: tuple[int, ...]
    gains: tuple[float, ...]

    def __post_init__(self):
        if len(self.delays) != len(self.gains):
            raise ValueError("delays and gains must have the same channel count")
        if any(d < 0 for d in self.delays):
            raise ValueError(f"delays must be >= 0, got {self.delays}")
        if any(g <= 0 for g in self.gains):
            raise ValueError(f"gains must be > 0, got {self.gains}")

    @property
    def channels(self) -> int:
        return len(self.delays)

    @property
    def max_delay(self) -> int:
        return max(self.delays)

    @classmethod
    def default(cls, channels: int = 6) -> "ArrayGeometry":
        delays = (0, 2, 4, 7, 9, 12, 14, 17)[:channels]
        gains = (1.0, 0.96, 1.04, 0.92, 1.05, 0.98, 0.94, 1.02)[:channels]
        if channels > 8:
            raise ValueError("default geometry supports up to 8 channels")
        return cls(delays, gains)


@dataclass(frozen=True)
class MixSpec:
    """Requested mixing SNR in dB, with optional uniform jitter half-range."""

    snr_db: float
    jitter_db: float = 0.0

    def __post_init__(self):
        if self.jitter_db < 0:
            raise ValueError(f"jitter_db must be >= 0, got {self.jitter_db}")


@dataclass
class UtteranceRecord:
    id: str
    waveforms: np.ndarray  # [channels, samples]
    label: str  # "keyword" | "filler"
    sample_rate: int
    keyword_end_sample: int | None = None
    targets: dict[str, np.ndarray] | None = None  # clean / noise1 / noise2, mono
    snr_db: float | None = None

    def __post_init__(self):
        self.waveforms = np.atleast_2d(np.asarray(self.waveforms, dtype=np.float64))
        if self.targets is not None:
            lengths = {t.shape[-1] for t in self.targets.values()}
            if len(lengths) > 1:
                raise ValueError(f"target lengths differ: {sorted(lengths)}")


def _rng(master_seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((master_seed, tag, index)))


def signal_power(x: np.ndarray) -> float:
    return float(np.mean(np.square(x)))


def render_to_channels(source: np.ndarray, geometry: ArrayGeometry,
                       rng: np.random.Generator | None = None,
                       sensor_snr_db: float | None = SENSOR_SNR_DB) -> np.ndarray:
    """Render a mono source through the array: delay, gain, and (optionally)
    independent per-channel Gaussian sensor noise at the given SNR."""
    n = source.shape[-1]
    out = np.zeros((geometry.channels, n))
    for c, (delay, gain) in enumerate(zip(geometry.delays, geometry.gains)):
        out[c, delay:] = gain * source[:n - delay if delay else None]
        if sensor_snr_db is not None and rng is not None:
            power = signal_power(out[c])
            if power > 0:
                sigma = np.sqrt(power * 10.0 ** (-sensor_snr_db / 10.0))
                out[c] += rng.normal(0.0, sigma, n)
    return out


def delay_and_sum(waveforms: np.ndarray, geometry: ArrayGeometry) -> np.ndarray:
    """Oracle single-channel conversion: undo the known per-channel
    delay/gain and average, attenuating independent noise by ~sqrt(M)."""
    waveforms = np.atleast_2d(waveforms)
    if waveforms.shape[0] != geometry.channels:
        raise ValueError(
            f"waveforms have {waveforms.shape[0]} channels, geometry expects "
            f"{geometry.channels}")
    n = waveforms.shape[1]
    aligned = np.zeros_like(waveforms)
    for c, (delay, gain) in enumerate(zip(geometry.delays, geometry.gains)):
        aligned[c, :n - delay if delay else None] = waveforms[c, delay:] / gain
    return aligned.mean(axis=0)


def _chirp(f0: float, f1: float, n: int, sample_rate: int) -> np.ndarray:
    t = np.arange(n) / sample_rate
    dur = n / sample_rate
    phase = 2.0 * np.pi * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)
    # rounding can push sin() a hair below zero at the endpoints
    envelope = np.sqrt(np.maximum(np.sin(np.pi * np.arange(n) / max(n - 1, 1)), 0.0))
    return envelope * np.sin(phase)


def _pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    spectrum = np.fft.rfft(rng.normal(0.0, 1.0, n))
    freqs = np.arange(spectrum.size, dtype=np.float64)
    freqs[0] = 1.0
    spectrum /= np.sqrt(freqs)
    spectrum[0] = 0.0
    x = np.fft.irfft(spectrum, n)
    return x / max(np.sqrt(signal_power(x)), 1e-12)


def synth_keyword(seed: int, geometry: ArrayGeometry, sample_rate: int = 16000,
                  utterance_s: float = 1.0) -> UtteranceRecord:
    """A deterministic three-segment chirp keyword with seed-dependent
    duration warp (+-10%), pitch shift (+-2 semitones) and gain, rendered
    through the array with 40 dB sensor noise."""
    rng = _rng(seed, _TAG_KEYWORD, 0)
    warp = rng.uniform(0.9, 1.1)
    pitch = 2.0 ** (rng.uniform(-2.0, 2.0) / 12.0)
    gain = rng.uniform(0.5, 1.0)

    seg_len = int(round(0.2 * warp * sample_rate))
    sweeps = ((420.0, 980.0), (930.0, 470.0), (640.0, 1310.0))
    pattern = np.concatenate([
        _chirp(f0 * pitch, f1 * pitch, seg_len, sample_rate) for f0, f1 in sweeps])
    pattern *= KEYWORD_BASE_AMP * gain

    n = int(round(utterance_s * sample_rate))
    tail_margin = geometry.max_delay + sample_rate // 100
    max_start = n - pattern.size - tail_margin
    if max_start <= 0:
        raise ValueError(f"utterance of {utterance_s}s too short for the keyword pattern")
    start = int(rng.integers(sample_rate // 20, max_start + 1))
    source = np.zeros(n)
    source[start:start + pattern.size] = pattern

    waveforms = render_to_channels(source, geometry, rng)
    return UtteranceRecord(id=f"kw{seed:06d}", waveforms=waveforms, label="keyword",
                           sample_rate=sample_rate,
                           keyword_end_sample=start + pattern.size)


def synth_filler(seed: int, geometry: ArrayGeometry, duration_s: float,
                 sample_rate: int = 16000) -> UtteranceRecord:
    """Tone/noise babble negative example; structurally unlike the keyword
    (steady random tones with slow onsets, no chirp sweeps)."""
    rng = _rng(seed, _TAG_FILLER, 0)
    n = int(round(duration_s * sample_rate))
    source = 0.006 * _pink_noise(rng, n)
    for _ in range(int(rng.integers(3, 8))):
        freq = rng.uniform(150.0, 3400.0)
        length = int(rng.uniform(0.2, 0.6) * sample_rate)
        start = int(rng.integers(0, max(n - length, 1)))
        t = np.arange(length) / sample_rate
        env = np.sin(np.pi * np.arange(length) / max(length - 1, 1))
        source[start:start + length] += rng.uniform(0.005, 0.03) * env * np.sin(
            2.0 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    if geometry.max_delay:
        source[-geometry.max_delay:] = 0.0  # keep delay-and-sum exact at the tail

    waveforms = render_to_channels(source, geometry, rng)
    return UtteranceRecord(id=f"fl{seed:06d}", waveforms=waveforms, label="filler",
                           sample_rate=sample_rate)


def synth_music(seed: int, n_samples: int, sample_rate: int = 16000) -> np.ndarray:
    """Interference clip: slowly amplitude-modulated tones over pink noise,
    overlapping the keyword band."""
    rng = _rng(seed, _TAG_MUSIC, 0)
    x = 0.4 * _pink_noise(rng, n_samples)
    t = np.arange(n_samples) / sample_rate
    for _ in range(4):
        freq = rng.uniform(250.0, 2600.0)
        am_rate = rng.uniform(0.3, 2.0)
        depth = rng.uniform(0.3, 1.0)
        am = 1.0 - depth * 0.5 * (1.0 + np.sin(2.0 * np.pi * am_rate * t + rng.uniform(0, 6.3)))
        x += am * np.sin(2.0 * np.pi * freq * t + rng.uniform(0, 6.3))
    return MUSIC_RMS * x / np.sqrt(signal_power(x))


def _snr_scale(signal: np.ndarray, noise: np.ndarray, snr_db: float) -> float:
    p_signal = signal_power(signal)
    p_noise = signal_power(noise)
    if p_signal == 0.0:
        raise ValueError("cannot mix at an SNR against a zero-power signal")
    if p_noise == 0.0:
        raise ValueError("cannot mix zero-power noise at an SNR")
    return float(np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0))))


def mix_at_snr(signal: np.ndarray, noise: np.ndarray, spec: MixSpec,
               rng: np.random.Generator | None = None) -> np.ndarray:
    """Add noise to signal scaled for an exact target SNR.

    The noise (at least as long as the signal) is cropped at a random
    offset when an rng is given, otherwise at 0; powers are measured over
    the full signal extent. Optional jitter widens the requested SNR by a
    uniform draw in [-jitter_db, +jitter_db].
    """
    signal = np.asarray(signal, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] < signal.shape[-1]:
        raise ValueError(
            f"noise ({noise.shape[-1]} samples) shorter than signal "
            f"({signal.shape[-1]} samples)")
    if spec.jitter_db > 0 and rng is None:
        raise ValueError("SNR jitter requires an rng")
    offset = int(rng.integers(0, noise.shape[-1] - signal.shape[-1] + 1)) if rng is not None else 0
    cropped = noise[offset:offset + signal.shape[-1]]
    snr = spec.snr_db
    if spec.jitter_db > 0:
        snr += float(rng.uniform(-spec.jitter_db, spec.jitter_db))
    return signal + _snr_scale(signal, cropped, snr) * cropped


def mix_music_multichannel(waveforms: np.ndarray, music: np.ndarray,
                           geometry: ArrayGeometry, snr_db: float,
                           rng: np.random.Generator | None = None
                           ) -> tuple[np.ndarray, np.ndarray]:
    """Render a music clip through the array and add it to each channel at
    exactly snr_db (per channel). Returns (mixed, scaled_music_channels)."""
    waveforms = np.atleast_2d(waveforms)
    n = waveforms.shape[1]
    if music.shape[-1] < n:
        raise ValueError("music clip shorter than the utterance")
    offset = int(rng.integers(0, music.shape[-1] - n + 1)) if rng is not None else 0
    rendered = render_to_channels(music[offset:offset + n], geometry,
                                  rng=None, sensor_snr_db=None)
    scaled = np.empty_like(rendered)
    for c in range(geometry.channels):
        scaled[c] = _snr_scale(waveforms[c], rendered[c], snr_db) * rendered[c]
    return waveforms + scaled, scaled


def make_multitarget(record: UtteranceRecord, music: np.ndarray,
                     geometry: ArrayGeometry, spec: MixSpec = MixSpec(-10.0),
                     rng: np.random.Generator | None = None,
                     target_snrs: tuple[float, float] = (5.0, 10.0)) -> UtteranceRecord:
    """Multi-target construction: music is mixed into every input channel
    at the requested SNR; Target 1 is the clean single-channel conversion,
    and Targets 2/3 re-add the converted music at +5/+10 dB."""
    if geometry is None:
        raise ValueError("make_multitarget requires the synthesis geometry")
    if record.waveforms.shape[0] != geometry.channels:
        raise ValueError(
            f"record has {record.waveforms.shape[0]} channels, geometry expects "
            f"{geometry.channels}")
    snr = spec.snr_db
    if spec.jitter_db > 0:
        if rng is None:
            raise ValueError("SNR jitter requires an rng")
        snr += float(rng.uniform(-spec.jitter_db, spec.jitter_db))

    mixed, scaled_music = mix_music_multichannel(record.waveforms, music, geometry,
                                                 snr, rng)
    clean = delay_and_sum(record.waveforms, geometry)
    converted_music = delay_and_sum(scaled_music, geometry)
    noise1 = mix_at_snr(clean, converted_music, MixSpec(target_snrs[0]))
    noise2 = mix_at_snr(clean, converted_music, MixSpec(target_snrs[1]))

    return UtteranceRecord(
        id=record.id, waveforms=mixed, label=record.label,
        sample_rate=record.sample_rate,
        keyword_end_sample=record.keyword_end_sample,
        targets={"clean": clean, "noise1": noise1, "noise2": noise2},
        snr_db=snr,
    )


def write_manifest(entries: list[dict], path) -> None:
    """One JSON object per line, stable key order, records pre-sorted by id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps(entry, sort_keys=True) for entry in entries]
    path.write_text("\n".join(lines) + ("\n" if lines else ""))


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# --- corpus assembly ---


@dataclass(frozen=True)
class CorpusSpec:
    keywords: int
    fillers: int
    seed: int = 0
    noisy_frac: float = 0.0
    snr_train: float = -10.0
    snr_eval_hard: float = -20.0
    snr_eval_easy: float = -18.0
    jitter_db: float = 0.0
    sample_rate: int = 16000
    keyword_utterance_s: float = 1.0
    filler_duration_s: tuple[float, float] = (2.0, 3.5)
    eval_frac: float = 0.2
    valid_frac: float = 0.1
    channels: int = 6

    def __post_init__(self):
        if self.keywords < 0 or self.fillers < 0:
            raise ValueError("keyword/filler counts must be >= 0")
        if not 0.0 <= self.noisy_frac <= 1.0:
            raise ValueError(f"noisy_frac must be in [0,1], got {self.noisy_frac}")


def _hash_fraction(key: str) -> float:
    return (zlib.crc32(key.encode()) % 10_000) / 10_000.0


def _split_for(record_id: str, spec: CorpusSpec) -> str:
    if _hash_fraction(record_id + "/eval") < spec.eval_frac:
        return "eval"
    if _hash_fraction(record_id + "/valid") < spec.valid_frac:
        return "valid"
    return "train"


def _normalized_for_wav(arrays: list[np.ndarray]) -> list[np.ndarray]:
    """Scale a record's input+target waveforms by one common factor so the
    PCM16 write never clips; a uniform gain preserves every mixing SNR."""
    peak = max(float(np.max(np.abs(a))) for a in arrays)
    if peak <= WAV_PEAK:
        return arrays
    scale = WAV_PEAK / peak
    return [a * scale for a in arrays]


def _write_record(out_dir: Path, sub: str, record: UtteranceRecord) -> dict:
    arrays = [record.waveforms]
    target_names = list(record.targets) if record.targets else []
    arrays += [record.targets[k] for k in target_names]
    arrays = _normalized_for_wav(arrays)

    wav_rel = f"wav/{sub}/{record.id}.wav"
    wavio.write_wav(out_dir / wav_rel, record.sample_rate, arrays[0])
    targets_rel = None
    if target_names:
        targets_rel = {}
        for name, data in zip(target_names, arrays[1:]):
            rel = f"wav/{sub}/{record.id}.{name}.wav"
            wavio.write_wav(out_dir / rel, record.sample_rate, data)
            targets_rel[name] = rel
    return {
        "id": record.id,
        "label": record.label,
        "wav": wav_rel,
        "keyword_end_sample": record.keyword_end_sample,
        "targets": targets_rel,
        "snr_db": record.snr_db,
    }


def build_corpus(spec: CorpusSpec, out_dir, geometry: ArrayGeometry | None = None
                 ) -> dict[str, Path]:
    """Generate WAVs plus train/valid/eval manifests under out_dir.

    Clean train/valid records carry a clean mapping target. When
    noisy_frac > 0, that fraction of train/valid records additionally get
    the multi-target treatment (music at snr_train, three targets) in
    train_noisy/valid_noisy, and the eval split is re-rendered at the hard
    and easy eval SNRs. Returns manifest name -> path.
    """
    out_dir = Path(out_dir)
    geometry = geometry or ArrayGeometry.default(spec.channels)
    manifests: dict[str, list[dict]] = {
        "train": [], "valid": [], "eval": [],
        "train_noisy": [], "valid_noisy": [], "eval_hard": [], "eval_easy": [],
    }

    def corpus_records():
        for i in range(spec.keywords):
            yield synth_keyword(spec.seed * 1_000_000 + i, geometry,
                                spec.sample_rate, spec.keyword_utterance_s)
        for i in range(spec.fillers):
            dur_rng = _rng(spec.seed, _TAG_FILLER, i + 1)
            duration = float(dur_rng.uniform(*spec.filler_duration_s))
            yield synth_filler(spec.seed * 1_000_000 + i, geometry, duration,
                               spec.sample_rate)

    for index, record in enumerate(corpus_records()):
        split = _split_for(record.id, spec)
        mix_rng = _rng(spec.seed, _TAG_MIX, index)
        music_len = record.waveforms.shape[1] + spec.sample_rate // 4

        if split in ("train", "valid"):
            clean_target = delay_and_sum(record.waveforms, geometry)
            with_target = UtteranceRecord(
                id=record.id, waveforms=record.waveforms, label=record.label,
                sample_rate=record.sample_rate,
                keyword_end_sample=record.keyword_end_sample,
                targets={"clean": clean_target})
            entry = _write_record(out_dir, "clean", with_target)
            entry["split"] = split
            manifests[split].append(entry)

            if spec.noisy_frac > 0 and _hash_fraction(record.id + "/noisy") < spec.noisy_frac:
                music = synth_music(spec.seed * 1_000_000 + index, music_len,
                                    spec.sample_rate)
                noisy = make_multitarget(
                    record, music, geometry,
                    MixSpec(spec.snr_train, spec.jitter_db), mix_rng)
                entry = _write_record(out_dir, "noisy", noisy)
                entry["split"] = split
                manifests[f"{split}_noisy"].append(entry)
        else:
            entry = _write_record(out_dir, "clean", record)
            entry["split"] = "eval"
            manifests["eval"].append(entry)

            if spec.noisy_frac > 0:
                music = synth_music(spec.seed * 1_000_000 + index, music_len,
                                    spec.sample_rate)
                for name, snr in (("eval_hard", spec.snr_eval_hard),
                                  ("eval_easy", spec.snr_eval_easy)):
                    mixed, _ = mix_music_multichannel(
                        record.waveforms, music, geometry, snr, mix_rng)
                    noisy_eval = UtteranceRecord(
                        id=record.id, waveforms=mixed, label=record.label,
                        sample_rate=record.sample_rate,
                        keyword_end_sample=record.keyword_end_sample, snr_db=snr)
                    entry = _write_record(out_dir, name, noisy_eval)
                    entry["split"] = name
                    manifests[name].append(entry)

    paths: dict[str, Path] = {}
    for name, entries in manifests.items():
        if not entries and name not in ("train", "valid", "eval"):
            continue
        entries.sort(key=lambda e: e["id"])
        path = out_dir / f"{name}.jsonl"
        write_manifest(entries, path)
        paths[name] = path
    return paths
