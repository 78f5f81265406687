"""Dual verification of rendered dialogues: ASR word-error-rate gate plus
speaker-timbre consistency, the bounded resynthesis loop, and the manual
review bookkeeping.

The WER bound is applied per utterance by default (every utterance must stay
at or under the threshold); ``GateConfig.wer_scope`` switches to a
dialogue-average reading.
"""

from __future__ import annotations

import string
import threading
from dataclasses import dataclass, replace
from typing import Optional, Protocol, Sequence

import numpy as np

from .audio_io import pcm16_bytes
from .errors import ContractError, GateError, RejectionError, StateError
from .rng import SplitMix64, derive_seed, stable_hash64
from .schema import DialogueScript, ManifestEntry, VerificationRecord, Waveform
from .voice import SpokenDialogue, TtsClient, assemble_dialogue_track, resample_16k, synthesize_turn

# ---------------------------------------------------------------------------
# Text normalization and WER
# ---------------------------------------------------------------------------

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_words(text: str) -> list[str]:
    """Lowercase, strip punctuation, collapse whitespace; return word tokens."""
    return text.lower().translate(_PUNCT_TABLE).split()


def word_edit_distance(ref: Sequence[str], hyp: Sequence[str]) -> int:
    """Minimum edit distance (substitution/deletion/insertion, unit costs)."""
    if not ref:
        return len(hyp)
    if not hyp:
        return len(ref)
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i]
        for j, h in enumerate(hyp, start=1):
            if r == h:
                cur.append(prev[j - 1])
            else:
                cur.append(1 + min(prev[j - 1], prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def wer(reference: str, hypothesis: str) -> float:
    """Word error rate: (substitutions + deletions + insertions) / |ref words|.

    Texts are normalized (lowercase, punctuation stripped) before alignment.
    Can exceed 1.0 for insertion-heavy hypotheses.
    """
    ref = normalize_words(reference)
    if not ref:
        raise ContractError("reference must contain at least one word token")
    hyp = normalize_words(hypothesis)
    return word_edit_distance(ref, hyp) / len(ref)


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------


class AsrClient(Protocol):
    def transcribe(self, w: Waveform) -> str: ...


class SpeakerEmbedClient(Protocol):
    def embed(self, w: Waveform) -> np.ndarray:
        """Unit-norm embedding of the speaker's timbre."""
        ...


class TranscriptRegistry:
    """Ground-truth lookup for mock ASR clients.

    Keys are content hashes of the canonical PCM16 byte form, so a waveform
    written to WAV and read back resolves to the same transcript. The render
    loop (and the resume path) registers utterances as they are produced.
    """

    def __init__(self):
        self._by_hash: dict[int, str] = {}
        self._lock = threading.Lock()

    @staticmethod
    def key(w: Waveform) -> int:
        return stable_hash64(pcm16_bytes(w))

    def register(self, w: Waveform, transcript: str) -> None:
        with self._lock:
            self._by_hash[self.key(w)] = transcript

    def lookup(self, w: Waveform) -> Optional[str]:
        with self._lock:
            return self._by_hash.get(self.key(w))


_JUNK_WORDS = ("gribble", "snarf", "quib", "blat", "yonder")


def _corrupt_words(text: str, seed: int) -> str:
    """Substitute roughly a third of the words, always at least one."""
    words = text.split()
    rng = SplitMix64(seed)
    hit = False
    out = []
    for w in words:
        if rng.uniform() < 0.34:
            out.append(_JUNK_WORDS[rng.randint(len(_JUNK_WORDS))])
            hit = True
        else:
            out.append(w)
    if not hit and out:
        out[0] = _JUNK_WORDS[0]
    return " ".join(out)


class MockAsrClient:
    """Returns registered ground truth, corrupted at a seeded error rate.

    Pure given (waveform, seed, corruption_rate): the corruption decision is
    a hash draw on the waveform content, so re-synthesizing with a fresh seed
    redraws it.
    """

    def __init__(
        self,
        registry: TranscriptRegistry,
        corruption_rate: float = 0.0,
        seed: int = 0,
    ):
        if not (0.0 <= corruption_rate <= 1.0):
            raise ContractError("corruption_rate must be in [0, 1]")
        self.registry = registry
        self.corruption_rate = corruption_rate
        self.seed = seed

    def transcribe(self, w: Waveform) -> str:
        text = self.registry.lookup(w)
        if text is None:
            raise GateError("mock ASR has no transcript registered for this waveform")
        if self.corruption_rate > 0.0:
            draw_seed = stable_hash64(pcm16_bytes(w), self.seed)
            if SplitMix64(draw_seed).uniform() < self.corruption_rate:
                return _corrupt_words(text, draw_seed)
        return text


class ScheduledAsrClient:
    """Mock ASR that corrupts whole verification rounds by schedule.

    Counts ``transcribe`` calls; round r covers calls
    [(r-1)*turns_per_round, r*turns_per_round). Deterministic for the
    sequential single-dialogue verification it is meant to drive; not
    thread-safe.
    """

    def __init__(self, registry: TranscriptRegistry, corrupt_rounds: set[int], turns_per_round: int):
        self.registry = registry
        self.corrupt_rounds = set(corrupt_rounds)
        self.turns_per_round = turns_per_round
        self.calls = 0

    def transcribe(self, w: Waveform) -> str:
        text = self.registry.lookup(w)
        if text is None:
            raise GateError("mock ASR has no transcript registered for this waveform")
        round_no = self.calls // self.turns_per_round + 1
        self.calls += 1
        if round_no in self.corrupt_rounds:
            return _corrupt_words(text, stable_hash64(pcm16_bytes(w)))
        return text


class MockSpeakerEmbedClient:
    """Timbre embedding surrogate keyed on the dominant carrier frequency.

    Estimates the carrier from a zero-padded spectrum, snaps it to the mock
    TTS speaker grid (120 + 37k Hz), and emits a fixed unit vector for that
    bucket plus a tiny length-keyed jitter. Same speaker, different content
    -> cosine above 0.999; different speakers -> unrelated directions.
    """

    def __init__(self, dim: int = 32, n_fft: int = 16384):
        self.dim = dim
        self.n_fft = n_fft

    def embed(self, w: Waveform) -> np.ndarray:
        n = min(len(w), self.n_fft)
        if n == 0:
            raise GateError("cannot embed an empty waveform")
        frame = np.zeros(self.n_fft)
        frame[:n] = w.samples[:n] * np.hanning(n)
        spectrum = np.abs(np.fft.rfft(frame))
        peak_hz = float(np.argmax(spectrum)) * w.sample_rate / self.n_fft
        bucket = int(round((peak_hz - 120.0) / 37.0))
        base_rng = np.random.default_rng(derive_seed("speaker-embed", bucket))
        base = base_rng.standard_normal(self.dim)
        jitter_rng = np.random.default_rng(stable_hash64(len(w).to_bytes(8, "big")))
        vec = base / np.linalg.norm(base) + 0.004 * jitter_rng.standard_normal(self.dim)
        return vec / np.linalg.norm(vec)


class HttpAsrClient:
    def __init__(self, url: str, api_key: str = "", timeout: float = 60.0):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def transcribe(self, w: Waveform) -> str:
        import httpx

        try:
            resp = httpx.post(
                self.url,
                content=pcm16_bytes(w),
                headers={
                    "Content-Type": "application/octet-stream",
                    "X-Sample-Rate": str(w.sample_rate),
                    **({"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}),
                },
                timeout=self.timeout,
            )
            resp.raise_for_status()
            return resp.json()["text"]
        except Exception as exc:
            raise GateError(f"ASR request failed: {exc}") from exc


class HttpSpeakerEmbedClient:
    def __init__(self, url: str, api_key: str = "", timeout: float = 60.0):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def embed(self, w: Waveform) -> np.ndarray:
        import httpx

        try:
            resp = httpx.post(
                self.url,
                content=pcm16_bytes(w),
                headers={
                    "Content-Type": "application/octet-stream",
                    "X-Sample-Rate": str(w.sample_rate),
                    **({"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}),
                },
                timeout=self.timeout,
            )
            resp.raise_for_status()
            vec = np.asarray(resp.json()["vector"], dtype=np.float64)
        except Exception as exc:
            raise GateError(f"speaker-embedding request failed: {exc}") from exc
        return vec / np.linalg.norm(vec)


# ---------------------------------------------------------------------------
# Gate configuration and checks
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GateConfig:
    """Thresholds for the machine gate and the resynthesis budget."""

    wer_threshold: float = 0.05
    cosine_threshold: float = 0.75
    max_attempts: int = 10
    wer_scope: str = "per_utterance"  # or "dialogue_average"

    def __post_init__(self):
        if not (0.0 <= self.wer_threshold):
            raise ContractError("wer_threshold must be >= 0")
        if not (-1.0 <= self.cosine_threshold <= 1.0):
            raise ContractError("cosine_threshold must be in [-1, 1]")
        if self.max_attempts < 1:
            raise ContractError("max_attempts must be >= 1")
        if self.wer_scope not in ("per_utterance", "dialogue_average"):
            raise ContractError(f"unknown wer_scope {self.wer_scope!r}")


def check_speaker_consistency(
    groups: dict[int, Sequence[Waveform]], client: SpeakerEmbedClient
) -> dict[int, float]:
    """Minimum pairwise embedding cosine within each speaker's utterances.

    A single-utterance group is trivially consistent (1.0).
    """
    out: dict[int, float] = {}
    for speaker, waves in groups.items():
        if not waves:
            raise ContractError(f"speaker {speaker}: empty utterance group")
        try:
            vectors = [np.asarray(client.embed(w), dtype=np.float64) for w in waves]
        except GateError:
            raise
        except Exception as exc:
            raise GateError(f"embedding failed for speaker {speaker}: {exc}") from exc
        if len(vectors) == 1:
            out[speaker] = 1.0
            continue
        lo = 1.0
        for i in range(len(vectors)):
            for j in range(i + 1, len(vectors)):
                denom = np.linalg.norm(vectors[i]) * np.linalg.norm(vectors[j])
                lo = min(lo, float(np.dot(vectors[i], vectors[j]) / denom))
        out[speaker] = lo
    return out


def verify_dialogue(
    dialogue: SpokenDialogue,
    asr: AsrClient,
    embedder: SpeakerEmbedClient,
    cfg: GateConfig,
    attempts_used: int = 1,
) -> VerificationRecord:
    """Run the dual machine gate over a rendered dialogue.

    Passes iff the WER bound holds (per scope) for every utterance and every
    speaker's minimum intra-speaker cosine clears the threshold. The human
    verdict starts pending.
    """
    if len(dialogue.waveforms) != len(dialogue.script.turns):
        raise ContractError("dialogue has unrendered turns")

    rates: list[float] = []
    for k, (turn, wave) in enumerate(zip(dialogue.script.turns, dialogue.waveforms)):
        try:
            hypothesis = asr.transcribe(wave)
        except GateError:
            raise
        except Exception as exc:
            raise GateError(f"ASR failed on utterance {k}: {exc}") from exc
        rates.append(wer(turn.content, hypothesis))

    groups: dict[int, list[Waveform]] = {}
    for speaker, wave in zip(dialogue.speaker_ids, dialogue.waveforms):
        groups.setdefault(speaker, []).append(wave)
    cosines = check_speaker_consistency(groups, embedder)
    min_cosine = min(cosines.values())

    verdict, reason = "pass", None
    if cfg.wer_scope == "per_utterance":
        for k, rate in enumerate(rates):
            if rate > cfg.wer_threshold:
                verdict, reason = "fail", f"wer_exceeded:{k}"
                break
    else:
        mean_rate = sum(rates) / len(rates)
        if mean_rate > cfg.wer_threshold:
            verdict, reason = "fail", "wer_exceeded:dialogue_average"
    if verdict == "pass":
        for speaker, cosine in cosines.items():
            if cosine < cfg.cosine_threshold:
                verdict, reason = "fail", f"timbre_inconsistent:{speaker}"
                break

    return VerificationRecord(
        per_utterance_wer=tuple(min(1.0, r) for r in rates),
        speaker_min_cosine=min_cosine,
        attempts_used=attempts_used,
        machine_verdict=verdict,
        machine_reason=reason,
    )


def synthesize_with_retry(
    script: DialogueScript,
    tts: TtsClient,
    asr: AsrClient,
    embedder: SpeakerEmbedClient,
    cfg: GateConfig,
    seed: int = 0,
    gap_range: tuple[float, float] = (0.2, 0.5),
    speaker_ids: Optional[tuple[int, int]] = None,
) -> SpokenDialogue:
    """Render a dialogue, re-synthesizing with a fresh seed until it gates.

    Makes at most ``cfg.max_attempts`` full render+verify rounds; on
    exhaustion raises ``RejectionError`` carrying the last record. Gaps and
    speaker assignment derive from ``seed`` and stay fixed across attempts.
    """
    if speaker_ids is None:
        rng = SplitMix64(derive_seed(seed, "speakers"))
        human = rng.randint(40)
        assistant = (human + 1 + rng.randint(39)) % 40
        speaker_ids = (human, assistant)
    per_turn_speaker = tuple(
        speaker_ids[0] if k % 2 == 0 else speaker_ids[1] for k in range(len(script.turns))
    )
    gap_rng = SplitMix64(derive_seed(seed, "gaps"))
    gaps = tuple(gap_rng.uniform_in(*gap_range) for _ in range(len(script.turns) - 1))
    registry = getattr(asr, "registry", None)

    last_record: Optional[VerificationRecord] = None
    last_dialogue: Optional[SpokenDialogue] = None
    for attempt in range(1, cfg.max_attempts + 1):
        attempt_seed = derive_seed(seed, "attempt", attempt)
        waveforms = []
        for k, turn in enumerate(script.turns):
            raw = synthesize_turn(tts, turn, per_turn_speaker[k], derive_seed(attempt_seed, "turn", k))
            wave = resample_16k(raw)
            if registry is not None:
                registry.register(wave, turn.content)
            waveforms.append(wave)
        track, layout = assemble_dialogue_track(waveforms, gaps)
        dialogue = SpokenDialogue(
            script=script,
            waveforms=tuple(waveforms),
            speaker_ids=per_turn_speaker,
            track=track,
            layout=layout,
        )
        record = verify_dialogue(dialogue, asr, embedder, cfg, attempts_used=attempt)
        if record.machine_verdict == "pass":
            return replace(dialogue, verification=record)
        last_record = record
        last_dialogue = replace(dialogue, verification=record)

    raise RejectionError(
        f"dialogue {script.id!r} failed machine verification after "
        f"{cfg.max_attempts} attempts ({last_record.machine_reason})",
        record=last_record,
        dialogue=last_dialogue,
    )


# ---------------------------------------------------------------------------
# Manual review
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReviewSummary:
    """Queue row for the manual-inspection stage."""

    entry_id: str
    subset: str
    turn_count: int
    max_wer: float
    min_cosine: float
    attempts_used: int

    @classmethod
    def from_entry(cls, entry: ManifestEntry) -> "ReviewSummary":
        v = entry.verification
        return cls(
            entry_id=entry.id,
            subset=entry.script.subset.value,
            turn_count=len(entry.script.turns),
            max_wer=max(v.per_utterance_wer) if v.per_utterance_wer else 0.0,
            min_cosine=v.speaker_min_cosine,
            attempts_used=v.attempts_used,
        )


def list_pending_reviews(entries: Sequence[ManifestEntry]) -> list[ReviewSummary]:
    """Machine-passed entries still awaiting a human verdict, oldest first."""
    return [
        ReviewSummary.from_entry(e)
        for e in entries
        if e.verification.machine_verdict == "pass"
        and e.verification.human_verdict == "pending"
    ]


def record_review_verdict(
    entries: Sequence[ManifestEntry],
    entry_id: str,
    verdict: str,
    reviewer: str,
    reason: Optional[str] = None,
) -> tuple[list[ManifestEntry], VerificationRecord]:
    """Apply one human verdict; pure compare-and-set on ``human_verdict``.

    Returns the updated entry list and the updated record. Persistence and
    locking belong to the owning store (see pipeline.ManifestStore).
    """
    if verdict not in ("approved", "rejected"):
        raise StateError(f"unknown verdict {verdict!r}")
    if verdict == "rejected" and not reason:
        raise StateError("rejection requires a reason")
    if not reviewer:
        raise StateError("reviewer must be named")

    updated: list[ManifestEntry] = []
    record: Optional[VerificationRecord] = None
    for entry in entries:
        if entry.id != entry_id:
            updated.append(entry)
            continue
        if entry.verification.human_verdict != "pending":
            raise StateError(f"already_decided: entry {entry_id!r}")
        new_entry = entry.with_verdict(verdict, reason, reviewer)
        record = new_entry.verification
        updated.append(new_entry)
    if record is None:
        raise StateError(f"unknown entry {entry_id!r}")
    return updated, record


def export_finalized(entries: Sequence[ManifestEntry]) -> list[ManifestEntry]:
    """Entries admitted to the corpus: machine pass and human approved."""
    return [
        e
        for e in entries
        if e.verification.machine_verdict == "pass"
        and e.verification.human_verdict == "approved"
    ]
