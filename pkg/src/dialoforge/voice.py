"""Turning turn scripts into waveforms: TTS clients, resampling, assembly.

Everything downstream of :func:`resample_16k` operates at the 16 kHz pipeline
canon; :func:`assemble_dialogue_track` asserts it at the module boundary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np

from .errors import ContractError, SynthesisError
from .rng import stable_hash64
from .schema import (
    PIPELINE_SAMPLE_RATE,
    DialogueScript,
    Pitch,
    Speed,
    StyleSpec,
    VerificationRecord,
    Waveform,
)

# ---------------------------------------------------------------------------
# TTS client interface
# ---------------------------------------------------------------------------


class TtsClient(Protocol):
    def synthesize(self, content: str, style: StyleSpec, speaker_id: int, seed: int) -> Waveform:
        """Render one utterance. Implementations declare their thread-safety."""
        ...


_PITCH_AMPLITUDE = {Pitch.LOW: 0.3, Pitch.NORMAL: 0.5, Pitch.HIGH: 0.7}
_SPEED_WPS = {Speed.SLOW: 2.0, Speed.NORMAL: 3.0, Speed.FAST: 4.0}


class MockTtsClient:
    """Deterministic tone/noise surrogate for a controllable TTS model.

    The signal structure is chosen so downstream gates have something real
    to measure: the carrier frequency is keyed by ``speaker_id`` (timbre),
    amplitude by pitch, duration by word count over a speed-dependent rate,
    and the emotion selects a weak overtone. Pure function of its inputs;
    safe to share across threads.
    """

    def __init__(self, native_rate: int = PIPELINE_SAMPLE_RATE, noise_level: float = 0.02):
        self.native_rate = native_rate
        self.noise_level = noise_level

    def carrier_hz(self, speaker_id: int) -> float:
        return 120.0 + 37.0 * (speaker_id % 40)

    def synthesize(self, content: str, style: StyleSpec, speaker_id: int, seed: int) -> Waveform:
        words = content.split()
        if not words:
            raise ContractError("mock TTS requires non-empty content")
        duration_s = max(0.3, len(words) / _SPEED_WPS[style.speed])
        n = int(round(duration_s * self.native_rate))
        t = np.arange(n, dtype=np.float64) / self.native_rate

        f0 = self.carrier_hz(speaker_id)
        amp = _PITCH_AMPLITUDE[style.pitch]
        mix_seed = stable_hash64(content.encode("utf-8"), seed)
        phase = 2.0 * math.pi * ((mix_seed >> 32) / 2.0 ** 32)
        emotion_idx = stable_hash64(style.emotion.encode("utf-8")) % 5

        signal = amp * np.sin(2.0 * math.pi * f0 * t + phase)
        signal += 0.06 * (emotion_idx + 1) / 5.0 * np.sin(2.0 * math.pi * 2.5 * f0 * t)
        rng = np.random.default_rng(mix_seed)
        signal += self.noise_level * rng.standard_normal(n)
        peak = np.max(np.abs(signal))
        if peak > 1.0:
            signal /= peak
        return Waveform(samples=signal, sample_rate=self.native_rate)


class HttpTtsClient:
    """Live TTS transport: POST text + style, receive raw PCM16 samples."""

    def __init__(self, url: str, api_key: str = "", timeout: float = 60.0):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def synthesize(self, content: str, style: StyleSpec, speaker_id: int, seed: int) -> Waveform:
        import httpx

        try:
            resp = httpx.post(
                self.url,
                json={
                    "text": content,
                    "style": style.to_json_dict(),
                    "speaker_id": speaker_id,
                    "seed": seed,
                },
                headers={"Authorization": f"Bearer {self.api_key}"} if self.api_key else {},
                timeout=self.timeout,
            )
            resp.raise_for_status()
            payload = resp.json()
        except Exception as exc:
            raise SynthesisError(f"TTS request failed: {exc}") from exc
        samples = np.asarray(payload["samples"], dtype=np.float64)
        return Waveform(samples=samples, sample_rate=int(payload["sample_rate"]))


def synthesize_turn(client: TtsClient, turn, speaker_id: int, seed: int) -> Waveform:
    """Render one turn at the client's native rate."""
    if not turn.content.split():
        raise ContractError("turn content is empty")
    try:
        wave = client.synthesize(turn.content, turn.style, speaker_id, seed)
    except (ContractError, SynthesisError):
        raise
    except Exception as exc:
        raise SynthesisError(f"TTS client failed: {exc}") from exc
    if len(wave) == 0:
        raise SynthesisError("TTS client returned an empty waveform")
    return wave


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

_KAISER_BETA = 8.6
_SINC_ZEROS = 32  # zero crossings of the scaled sinc on each side
_BLOCK = 1 << 16


def _kaiser(x: np.ndarray) -> np.ndarray:
    # I0-based Kaiser window evaluated at fractional positions in [-1, 1].
    inside = np.clip(1.0 - np.square(x), 0.0, None)
    return np.i0(_KAISER_BETA * np.sqrt(inside)) / np.i0(_KAISER_BETA)


def resample_16k(w: Waveform, target_rate: int = PIPELINE_SAMPLE_RATE) -> Waveform:
    """Band-limited resample to the 16 kHz pipeline canon.

    Windowed-sinc interpolation (Kaiser window, 32 zero crossings per side);
    output length is ``round(len * target / source)`` so duration is preserved
    to within one sample period.
    """
    if w.sample_rate <= 0:
        raise ContractError("input sample rate must be positive")
    if w.sample_rate == target_rate:
        return w
    ratio = target_rate / w.sample_rate
    out_len = int(round(len(w) * ratio))
    if out_len == 0 or len(w) == 0:
        return Waveform(samples=np.zeros(0), sample_rate=target_rate)

    fc = 0.5 * min(1.0, ratio)  # cutoff in cycles per input sample
    half = _SINC_ZEROS / (2.0 * fc)
    n_taps = 2 * int(math.ceil(half)) + 1
    x = w.samples
    out = np.empty(out_len, dtype=np.float64)

    for start in range(0, out_len, _BLOCK):
        stop = min(start + _BLOCK, out_len)
        t = np.arange(start, stop, dtype=np.float64) / ratio
        base = np.ceil(t - half).astype(np.int64)
        idx = base[:, None] + np.arange(n_taps, dtype=np.int64)[None, :]
        tau = idx - t[:, None]
        keep = np.abs(tau) <= half
        kernel = 2.0 * fc * np.sinc(2.0 * fc * tau) * _kaiser(tau / half)
        kernel[~keep] = 0.0
        valid = (idx >= 0) & (idx < len(x))
        gathered = np.where(valid, x[np.clip(idx, 0, len(x) - 1)], 0.0)
        norm = kernel.sum(axis=1)
        out[start:stop] = (kernel * gathered).sum(axis=1) / norm
    return Waveform(samples=out, sample_rate=target_rate)


# ---------------------------------------------------------------------------
# Track assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrackLayout:
    """Where each utterance sits on the assembled track.

    ``segments`` are (turn_index, start_s, end_s), non-overlapping and
    monotonically increasing; ``gaps`` are the inter-turn silences in seconds.
    """

    segments: tuple[tuple[int, float, float], ...]
    gaps: tuple[float, ...]

    def shifted(self, offset_s: float) -> "TrackLayout":
        return TrackLayout(
            segments=tuple((i, s + offset_s, e + offset_s) for i, s, e in self.segments),
            gaps=self.gaps,
        )

    @property
    def first_voice_start_s(self) -> float:
        return self.segments[0][1] if self.segments else 0.0


def assemble_dialogue_track(
    utterances: Sequence[Waveform], gaps: Sequence[float]
) -> tuple[Waveform, TrackLayout]:
    """Concatenate utterances with silence gaps into one dialogue track.

    Sample-exact: track length equals the sum of utterance lengths plus the
    rounded gap lengths.
    """
    if not utterances:
        raise ContractError("at least one utterance required")
    if len(gaps) != len(utterances) - 1:
        raise ContractError(
            f"gap count {len(gaps)} != utterance count {len(utterances)} - 1"
        )
    for k, u in enumerate(utterances):
        if u.sample_rate != PIPELINE_SAMPLE_RATE:
            raise ContractError(
                f"utterance {k} at {u.sample_rate} Hz; expected {PIPELINE_SAMPLE_RATE}"
            )
    for g in gaps:
        if g < 0:
            raise ContractError(f"negative gap {g}")

    pieces: list[np.ndarray] = []
    segments: list[tuple[int, float, float]] = []
    cursor = 0
    for k, u in enumerate(utterances):
        start = cursor
        pieces.append(u.samples)
        cursor += len(u)
        segments.append((k, start / PIPELINE_SAMPLE_RATE, cursor / PIPELINE_SAMPLE_RATE))
        if k < len(gaps):
            gap_n = int(round(gaps[k] * PIPELINE_SAMPLE_RATE))
            pieces.append(np.zeros(gap_n))
            cursor += gap_n
    track = Waveform(samples=np.concatenate(pieces), sample_rate=PIPELINE_SAMPLE_RATE)
    return track, TrackLayout(segments=tuple(segments), gaps=tuple(float(g) for g in gaps))


# ---------------------------------------------------------------------------
# Rendered dialogue value
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SpokenDialogue:
    """A fully rendered dialogue: per-turn waveforms plus the assembled track."""

    script: DialogueScript
    waveforms: tuple[Waveform, ...]
    speaker_ids: tuple[int, ...]
    track: Waveform
    layout: TrackLayout
    verification: Optional[VerificationRecord] = None
