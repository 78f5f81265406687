"""WAV file I/O: RIFF, PCM 16-bit signed little-endian, mono.

Quantization is round-to-nearest with clipping to [-1, 1]; ``pcm16_bytes``
is also the canonical byte form used for content hashing (mock clients key
ground-truth lookups on it so it survives a disk round trip).
"""

from __future__ import annotations

import wave
from pathlib import Path

import numpy as np

from .errors import ContractError
from .schema import Waveform

_SCALE = 32767.0


def pcm16_bytes(w: Waveform) -> bytes:
    clipped = np.clip(w.samples, -1.0, 1.0)
    return (np.round(clipped * _SCALE).astype("<i2")).tobytes()


def write_wav(path: str | Path, w: Waveform) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(pcm16_bytes(w))


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ContractError(f"{path}: expected mono, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ContractError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / _SCALE
    return Waveform(samples=samples, sample_rate=rate)


def wav_duration_s(path: str | Path) -> float:
    """Duration from the header alone, without decoding samples."""
    with wave.open(str(path), "rb") as fh:
        return fh.getnframes() / fh.getframerate()
