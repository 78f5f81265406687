"""Audio event and music integration for dialogue tracks.

Temporary events are spliced before the first voice segment; continuous
events loop under the whole conversation. Music is combined by one of two
methods drawn at random per dialogue: a looped full-length background, or a
short faded intro segment before the first voice segment. All overlays mix
at a controlled speech-to-background SNR with a peak guard that rescales
(never clips) the mix.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ContractError, InvalidRmsError
from .rng import SplitMix64, derive_seed
from .schema import PIPELINE_SAMPLE_RATE, EventClass, MixPlanRecord, Waveform
from .scriptgen import ChatClient, heuristic_event_class
from .voice import TrackLayout

MixPlan = MixPlanRecord

DEFAULT_SNR_RANGE_DB = (5.0, 20.0)
DEFAULT_CROSSFADE_MS = 10.0

CLASSIFY_TEMPLATE = (
    "Decide whether the following audio event is temporary or continuous.\n"
    "A temporary event is a short-lived sound that occurs briefly; a continuous\n"
    "event is a prolonged sound that persists over time.\n"
    'Event: "{caption}"\n'
    "Answer with exactly one word: temporary or continuous."
)


@dataclass(frozen=True)
class EventClassification:
    """Classifier outcome; ``via_fallback`` marks a keyword-heuristic answer."""

    value: EventClass
    via_fallback: bool = False


def classify_event_duration(
    caption: str, client: ChatClient, seed: int = 0
) -> EventClassification:
    """Ask the chat client whether an event is temporary or continuous.

    Total: an unparseable answer falls back to the keyword heuristic and the
    result is flagged.
    """
    if not caption.strip():
        raise ContractError("caption must be non-empty")
    reply = client.complete(CLASSIFY_TEMPLATE.format(caption=caption), seed)
    lowered = reply.lower()
    hits = [
        (m.start(), m.group(0))
        for m in re.finditer(r"\b(temporary|continuous)\b", lowered)
    ]
    if hits:
        return EventClassification(value=EventClass(hits[0][1]), via_fallback=False)
    return EventClassification(
        value=EventClass(heuristic_event_class(caption)), via_fallback=True
    )


# ---------------------------------------------------------------------------
# Splicing and looping
# ---------------------------------------------------------------------------


def _require_16k(*waves: Waveform) -> None:
    for w in waves:
        if w.sample_rate != PIPELINE_SAMPLE_RATE:
            raise ContractError(
                f"expected {PIPELINE_SAMPLE_RATE} Hz input, got {w.sample_rate}"
            )


def splice_temporary(
    event: Waveform, track: Waveform, layout: TrackLayout, gap_s: float = 0.0
) -> tuple[Waveform, TrackLayout]:
    """Prepend a short event (plus a silence gap) before the first voice segment."""
    _require_16k(event, track)
    if gap_s < 0:
        raise ContractError("gap_s must be >= 0")
    gap_n = int(round(gap_s * PIPELINE_SAMPLE_RATE))
    if len(event) == 0 and gap_n == 0:
        return track, layout
    samples = np.concatenate([event.samples, np.zeros(gap_n), track.samples])
    shift = (len(event) + gap_n) / PIPELINE_SAMPLE_RATE
    return Waveform(samples=samples, sample_rate=PIPELINE_SAMPLE_RATE), layout.shifted(shift)


def _loop_to_samples(bg: np.ndarray, target_n: int, crossfade_n: int) -> np.ndarray:
    """Tile ``bg`` to exactly ``target_n`` samples with linear seam crossfades."""
    if target_n <= len(bg):
        return bg[:target_n].copy()
    crossfade_n = max(0, min(crossfade_n, len(bg) - 1))
    out = bg.copy()
    if crossfade_n == 0:
        reps = math.ceil(target_n / len(bg))
        return np.tile(bg, reps)[:target_n]
    ramp = np.linspace(0.0, 1.0, crossfade_n + 2)[1:-1]
    while len(out) < target_n:
        seam = out[-crossfade_n:] * (1.0 - ramp) + bg[:crossfade_n] * ramp
        out = np.concatenate([out[:-crossfade_n], seam, bg[crossfade_n:]])
    return out[:target_n]


def loop_continuous(
    bg: Waveform, duration_s: float, crossfade_ms: float = DEFAULT_CROSSFADE_MS
) -> Waveform:
    """Loop (or truncate) a background sound to an exact duration.

    Output length is ``round(duration_s * 16000)`` samples; consecutive
    repeats are joined by a linear crossfade of ``crossfade_ms``.
    """
    _require_16k(bg)
    if len(bg) == 0:
        raise ContractError("background must be non-empty")
    if duration_s <= 0:
        raise ContractError("duration_s must be > 0")
    if crossfade_ms < 0:
        raise ContractError("crossfade_ms must be >= 0")
    target_n = int(round(duration_s * PIPELINE_SAMPLE_RATE))
    crossfade_n = int(round(crossfade_ms * PIPELINE_SAMPLE_RATE / 1000.0))
    return Waveform(
        samples=_loop_to_samples(bg.samples, target_n, crossfade_n),
        sample_rate=PIPELINE_SAMPLE_RATE,
    )


# ---------------------------------------------------------------------------
# SNR overlay
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class OverlayResult:
    """Mix output plus the applied background gain and any peak-guard rescale."""

    mix: Waveform
    background_gain: float
    peak_rescale: Optional[float] = None


def overlay_at_snr(
    speech: Waveform, background: Waveform, target_snr_db: float
) -> OverlayResult:
    """Mix ``background`` under ``speech`` at a target speech/background SNR.

    The background gain is ``(rms(speech)/rms(background)) * 10^(-snr/20)``.
    If the mix peaks above 1.0 the whole mix is rescaled by 1/peak (shape-
    preserving) and the rescale factor is reported.
    """
    _require_16k(speech, background)
    if len(speech) != len(background):
        raise ContractError(
            f"length mismatch: speech {len(speech)} vs background {len(background)}"
        )
    if not math.isfinite(target_snr_db):
        raise ContractError("target_snr_db must be finite")
    speech_rms = speech.rms()
    background_rms = background.rms()
    if speech_rms == 0.0 or background_rms == 0.0:
        raise InvalidRmsError("speech and background must both have non-zero RMS")
    gain = (speech_rms / background_rms) * 10.0 ** (-target_snr_db / 20.0)
    mixed = speech.samples + gain * background.samples
    peak = float(np.max(np.abs(mixed)))
    rescale = None
    if peak > 1.0:
        rescale = 1.0 / peak
        mixed = mixed * rescale
    return OverlayResult(
        mix=Waveform(samples=mixed, sample_rate=PIPELINE_SAMPLE_RATE),
        background_gain=gain,
        peak_rescale=rescale,
    )


# ---------------------------------------------------------------------------
# Event and music integration
# ---------------------------------------------------------------------------


def apply_audio_event(
    track: Waveform,
    layout: TrackLayout,
    event: Waveform,
    event_class: EventClass,
    plan_seed: int,
    snr_range_db: tuple[float, float] = DEFAULT_SNR_RANGE_DB,
    crossfade_ms: float = DEFAULT_CROSSFADE_MS,
) -> tuple[Waveform, TrackLayout, MixPlan]:
    """Integrate one classified audio event into a dialogue track."""
    rng = SplitMix64(derive_seed(plan_seed, "event-plan"))
    target_snr = rng.uniform_in(*snr_range_db)
    if event_class == EventClass.TEMPORARY:
        gap_s = rng.uniform_in(0.0, 0.3)
        scaled = _match_level(event, track, target_snr)
        mixed, layout = splice_temporary(scaled, track, layout, gap_s)
        plan = MixPlan(method="splice_prefix", target_snr_db=target_snr, crossfade_ms=crossfade_ms)
        return mixed, layout, plan
    bg = loop_continuous(event, len(track) / PIPELINE_SAMPLE_RATE, crossfade_ms)
    result = overlay_at_snr(track, bg, target_snr)
    plan = MixPlan(method="loop_background", target_snr_db=target_snr, crossfade_ms=crossfade_ms)
    return result.mix, layout, plan


def _match_level(piece: Waveform, reference: Waveform, target_snr_db: float) -> Waveform:
    """Scale a prefix piece to the target level relative to the reference, peak-guarded."""
    piece_rms = piece.rms()
    ref_rms = reference.rms()
    if piece_rms == 0.0 or ref_rms == 0.0:
        raise InvalidRmsError("prefix piece and track must both have non-zero RMS")
    gain = (ref_rms / piece_rms) * 10.0 ** (-target_snr_db / 20.0)
    samples = piece.samples * gain
    peak = float(np.max(np.abs(samples)))
    if peak > 1.0:
        samples = samples / peak
    return Waveform(samples=samples, sample_rate=piece.sample_rate)


def integrate_music(
    track: Waveform,
    layout: TrackLayout,
    music: Waveform,
    plan_seed: int,
    snr_range_db: tuple[float, float] = DEFAULT_SNR_RANGE_DB,
    crossfade_ms: float = DEFAULT_CROSSFADE_MS,
) -> tuple[Waveform, TrackLayout, MixPlan]:
    """Combine music with a dialogue by one of two seeded methods.

    ``music_full_background``: loop/truncate the music to the track duration
    and overlay at the drawn SNR. ``music_intro_segment``: prepend a 2-5 s
    music segment (level-matched to the drawn SNR) before the first voice
    segment and fade it out over ``crossfade_ms``.
    """
    _require_16k(track, music)
    rng = SplitMix64(derive_seed(plan_seed, "music-plan"))
    use_full = rng.uniform() < 0.5
    target_snr = rng.uniform_in(*snr_range_db)
    intro_len_s = rng.uniform_in(2.0, 5.0)

    if use_full:
        bg = loop_continuous(music, len(track) / PIPELINE_SAMPLE_RATE, crossfade_ms)
        result = overlay_at_snr(track, bg, target_snr)
        plan = MixPlan(
            method="music_full_background", target_snr_db=target_snr, crossfade_ms=crossfade_ms
        )
        return result.mix, layout, plan

    segment = loop_continuous(music, intro_len_s, crossfade_ms)
    segment = _match_level(segment, track, target_snr)
    fade_n = min(int(round(crossfade_ms * PIPELINE_SAMPLE_RATE / 1000.0)), len(segment))
    samples = segment.samples.copy()
    if fade_n > 0:
        samples[-fade_n:] *= np.linspace(1.0, 0.0, fade_n)
    faded = Waveform(samples=samples, sample_rate=PIPELINE_SAMPLE_RATE)
    mixed, layout = splice_temporary(faded, track, layout, gap_s=0.0)
    plan = MixPlan(
        method="music_intro_segment", target_snr_db=target_snr, crossfade_ms=crossfade_ms
    )
    return mixed, layout, plan


# ---------------------------------------------------------------------------
# Procedural source audio (hermetic stand-in for asset directories)
# ---------------------------------------------------------------------------


def procedural_source_audio(source_id: str, duration_s: float = 3.0) -> Waveform:
    """Deterministic event/music audio derived from a source id.

    Used when no asset directory provides ``<source_id>.wav``: band-limited
    noise plus a couple of id-keyed partials, so mixes have plausible spectra.
    """
    seed = derive_seed("source-audio", source_id)
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * PIPELINE_SAMPLE_RATE))
    t = np.arange(n) / PIPELINE_SAMPLE_RATE
    signal = 0.08 * rng.standard_normal(n)
    # smooth the noise to keep adjacent-sample jumps moderate
    kernel = np.ones(8) / 8.0
    signal = np.convolve(signal, kernel, mode="same")
    for k in range(3):
        freq = 180.0 + (seed >> (8 * k)) % 900
        signal += 0.12 * np.sin(2.0 * np.pi * freq * t + (seed % 7) * 0.9)
    peak = np.max(np.abs(signal))
    if peak > 0:
        signal = 0.6 * signal / peak
    return Waveform(samples=signal, sample_rate=PIPELINE_SAMPLE_RATE)
