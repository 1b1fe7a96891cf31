"""16-bit PCM WAV reading and writing for any channel count.

Samples are exchanged as float64 arrays shaped [channels, samples],
normalized to [-1, 1) by dividing by 32768 on read and quantized by
rounding on write.
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np


def read_wav(path) -> tuple[int, np.ndarray]:
    """Read a PCM16 WAV file; returns (sample_rate, [channels, samples])."""
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM supported, got {8 * w.getsampwidth()}-bit")
        if w.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV not supported")
        channels = w.getnchannels()
        rate = w.getframerate()
        raw = w.readframes(w.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return rate, samples.reshape(-1, channels).T.copy()


def write_wav(path, sample_rate: int, data: np.ndarray) -> None:
    """Write [channels, samples] floats in [-1, 1] as PCM16 little-endian."""
    data = np.atleast_2d(np.asarray(data, dtype=np.float64))
    quantized = np.clip(np.rint(data * 32768.0), -32768, 32767).astype("<i2")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(data.shape[0])
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(quantized.T.tobytes())
