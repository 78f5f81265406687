"""Shared domain types, style vocabularies, and the corpus manifest format.

The manifest is line-delimited JSON (one dialogue per line, UTF-8, extension
``.manifest.jsonl``) with a fixed field order so that serialization is
byte-stable; golden files pin the layout. Audio referenced from a manifest is
RIFF/WAV, PCM 16-bit signed little-endian, mono, 16000 Hz.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import IO, Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, ManifestParseError, ValidationError

PIPELINE_SAMPLE_RATE = 16000
MANIFEST_SUFFIX = ".manifest.jsonl"

DEFAULT_EMOTIONS: tuple[str, ...] = (
    "neutral",
    "happy",
    "sad",
    "angry",
    "surprised",
    "fearful",
    "disgusted",
)


class Gender(str, Enum):
    MALE = "male"
    FEMALE = "female"


class Pitch(str, Enum):
    LOW = "low"
    NORMAL = "normal"
    HIGH = "high"


class Speed(str, Enum):
    SLOW = "slow"
    NORMAL = "normal"
    FAST = "fast"


class Role(str, Enum):
    HUMAN = "human"
    ASSISTANT = "assistant"


class Subset(str, Enum):
    EMOTION = "emotion"
    AUDIO = "audio"
    MUSIC = "music"


class EventClass(str, Enum):
    TEMPORARY = "temporary"
    CONTINUOUS = "continuous"


class Stage(str, Enum):
    SCRIPTED = "scripted"
    RENDERED = "rendered"
    GATED = "gated"
    MIXED = "mixed"
    FINALIZED = "finalized"


STAGE_ORDER = (Stage.SCRIPTED, Stage.RENDERED, Stage.GATED, Stage.MIXED, Stage.FINALIZED)


def check_emotion_vocabulary(labels: Sequence[str]) -> tuple[str, ...]:
    """Validate a configured emotion label set: non-empty, unique, lowercase."""
    if not labels:
        raise ValidationError("emotion vocabulary must be non-empty")
    seen = set()
    for name in labels:
        if name != name.lower():
            raise ValidationError(f"emotion label not lowercase: {name!r}")
        if name in seen:
            raise ValidationError(f"duplicate emotion label: {name!r}")
        seen.add(name)
    return tuple(labels)


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StyleSpec:
    """Per-utterance speaking style: gender, pitch, speed, emotion."""

    gender: Gender
    pitch: Pitch
    speed: Speed
    emotion: str

    def violations(self, emotions: Sequence[str] = DEFAULT_EMOTIONS) -> list[str]:
        out = []
        if self.emotion not in emotions:
            out.append(f"unknown emotion {self.emotion!r}")
        return out

    def to_json_dict(self) -> dict:
        return {
            "gender": self.gender.value,
            "pitch": self.pitch.value,
            "speed": self.speed.value,
            "emotion": self.emotion,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "StyleSpec":
        return cls(
            gender=Gender(d["gender"]),
            pitch=Pitch(d["pitch"]),
            speed=Speed(d["speed"]),
            emotion=d["emotion"],
        )


@dataclass(frozen=True)
class TurnScript:
    """One scripted turn: who speaks, how, and what."""

    role: Role
    style: StyleSpec
    content: str

    def violations(self, emotions: Sequence[str] = DEFAULT_EMOTIONS) -> list[str]:
        out = self.style.violations(emotions)
        if not self.content.split():
            out.append("empty content")
        return out

    def to_json_dict(self) -> dict:
        return {
            "role": self.role.value,
            "style": self.style.to_json_dict(),
            "content": self.content,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "TurnScript":
        return cls(
            role=Role(d["role"]),
            style=StyleSpec.from_json_dict(d["style"]),
            content=d["content"],
        )


@dataclass(frozen=True)
class SceneSeed:
    """Subset-specific scene metadata: exactly one seeding field is set.

    ``event_class`` is populated only for the audio subset, after the
    temporary/continuous classification step.
    """

    topic: Optional[str] = None
    caption: Optional[str] = None
    aspect_list: Optional[tuple[str, ...]] = None
    event_class: Optional[EventClass] = None

    def seed_text(self) -> str:
        """The scene text embedded verbatim into prompts."""
        if self.topic is not None:
            return self.topic
        if self.caption is not None:
            return self.caption
        if self.aspect_list is not None:
            return ", ".join(self.aspect_list)
        return ""

    def violations(self, subset: Subset) -> list[str]:
        out = []
        populated = {
            Subset.EMOTION: self.topic,
            Subset.AUDIO: self.caption,
            Subset.MUSIC: self.aspect_list,
        }
        for sub, value in populated.items():
            if sub == subset and value is None:
                out.append(f"seed missing {sub.value} field")
            if sub != subset and value is not None:
                out.append(f"seed field for {sub.value} set on {subset.value} script")
        if self.event_class is not None and subset != Subset.AUDIO:
            out.append("event_class set outside audio subset")
        return out

    def to_json_dict(self) -> dict:
        return {
            "topic": self.topic,
            "caption": self.caption,
            "aspect_list": list(self.aspect_list) if self.aspect_list is not None else None,
            "event_class": self.event_class.value if self.event_class else None,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "SceneSeed":
        return cls(
            topic=d.get("topic"),
            caption=d.get("caption"),
            aspect_list=tuple(d["aspect_list"]) if d.get("aspect_list") is not None else None,
            event_class=EventClass(d["event_class"]) if d.get("event_class") else None,
        )


@dataclass(frozen=True)
class DialogueScript:
    """A parsed multi-turn script: alternating turns, human first."""

    id: str
    subset: Subset
    seed: SceneSeed
    turns: tuple[TurnScript, ...]

    def to_json_dict(self) -> dict:
        return {
            "id": self.id,
            "subset": self.subset.value,
            "seed": self.seed.to_json_dict(),
            "turns": [t.to_json_dict() for t in self.turns],
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DialogueScript":
        return cls(
            id=d["id"],
            subset=Subset(d["subset"]),
            seed=SceneSeed.from_json_dict(d["seed"]),
            turns=tuple(TurnScript.from_json_dict(t) for t in d["turns"]),
        )


def validate_script(
    script: DialogueScript, emotions: Sequence[str] = DEFAULT_EMOTIONS
) -> list[str]:
    """Return every violated invariant of ``script`` (empty list means pass).

    Total: never raises, regardless of how malformed the script is.
    """
    violations: list[str] = []
    if not script.id:
        violations.append("empty id")
    violations.extend(script.seed.violations(script.subset))
    if len(script.turns) < 2:
        violations.append(f"turn count {len(script.turns)} < 2")
    for k, turn in enumerate(script.turns):
        expected = Role.HUMAN if k % 2 == 0 else Role.ASSISTANT
        if turn.role != expected:
            violations.append(f"non-alternating at index {k}")
        for v in turn.violations(emotions):
            violations.append(f"turn {k}: {v}")
    return violations


# ---------------------------------------------------------------------------
# Audio value type
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono audio: float64 samples in [-1, 1] at a known sample rate.

    Treated as an immutable value; operations return new instances.
    """

    samples: np.ndarray
    sample_rate: int = PIPELINE_SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ContractError(f"sample_rate must be positive, got {self.sample_rate}")
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ContractError(f"samples must be 1-D, got shape {arr.shape}")
        if arr.size and not np.all(np.isfinite(arr)):
            raise ContractError("samples must be finite")
        object.__setattr__(self, "samples", arr)

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate

    def peak(self) -> float:
        return float(np.max(np.abs(self.samples))) if self.samples.size else 0.0

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples)))) if self.samples.size else 0.0


# ---------------------------------------------------------------------------
# Manifest entry types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Utterance:
    """One rendered turn as persisted in the manifest."""

    turn_index: int
    audio_path: str
    duration_s: float
    transcript: str
    style: StyleSpec

    def violations(self, emotions: Sequence[str] = DEFAULT_EMOTIONS) -> list[str]:
        out = self.style.violations(emotions)
        if self.duration_s <= 0:
            out.append(f"utterance {self.turn_index}: duration_s must be > 0")
        if not self.transcript:
            out.append(f"utterance {self.turn_index}: empty transcript")
        return out

    def to_json_dict(self) -> dict:
        return {
            "turn_index": self.turn_index,
            "audio_path": self.audio_path,
            "duration_s": self.duration_s,
            "transcript": self.transcript,
            "style": self.style.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "Utterance":
        return cls(
            turn_index=d["turn_index"],
            audio_path=d["audio_path"],
            duration_s=d["duration_s"],
            transcript=d["transcript"],
            style=StyleSpec.from_json_dict(d["style"]),
        )


@dataclass(frozen=True)
class VerificationRecord:
    """Machine-gate outcome plus the manual review verdict for one dialogue.

    ``per_utterance_wer`` values are stored capped at 1.0 (raw WER can exceed
    1.0 for insertion-heavy hypotheses; gate decisions use the raw value).
    """

    per_utterance_wer: tuple[float, ...]
    speaker_min_cosine: float
    attempts_used: int
    machine_verdict: str  # "pass" | "fail"
    machine_reason: Optional[str] = None
    human_verdict: str = "pending"  # "pending" | "approved" | "rejected"
    human_reason: Optional[str] = None
    reviewer: Optional[str] = None

    def violations(self, max_attempts: int = 10) -> list[str]:
        out = []
        for i, w in enumerate(self.per_utterance_wer):
            if not (0.0 <= w <= 1.0):
                out.append(f"per_utterance_wer[{i}] outside [0, 1]: {w}")
        if not (-1.0 <= self.speaker_min_cosine <= 1.0):
            out.append(f"speaker_min_cosine outside [-1, 1]: {self.speaker_min_cosine}")
        if not (1 <= self.attempts_used <= max_attempts):
            out.append(f"attempts_used outside [1, {max_attempts}]: {self.attempts_used}")
        if self.machine_verdict not in ("pass", "fail"):
            out.append(f"unknown machine_verdict {self.machine_verdict!r}")
        if self.machine_verdict == "fail" and not self.machine_reason:
            out.append("machine fail verdict without reason")
        if self.human_verdict not in ("pending", "approved", "rejected"):
            out.append(f"unknown human_verdict {self.human_verdict!r}")
        if self.human_verdict == "rejected" and not self.human_reason:
            out.append("rejected verdict without reason")
        return out

    def to_json_dict(self) -> dict:
        return {
            "per_utterance_wer": list(self.per_utterance_wer),
            "speaker_min_cosine": self.speaker_min_cosine,
            "attempts_used": self.attempts_used,
            "machine_verdict": self.machine_verdict,
            "machine_reason": self.machine_reason,
            "human_verdict": self.human_verdict,
            "human_reason": self.human_reason,
            "reviewer": self.reviewer,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "VerificationRecord":
        return cls(
            per_utterance_wer=tuple(d["per_utterance_wer"]),
            speaker_min_cosine=d["speaker_min_cosine"],
            attempts_used=d["attempts_used"],
            machine_verdict=d["machine_verdict"],
            machine_reason=d.get("machine_reason"),
            human_verdict=d.get("human_verdict", "pending"),
            human_reason=d.get("human_reason"),
            reviewer=d.get("reviewer"),
        )


@dataclass(frozen=True)
class MixPlanRecord:
    """How background audio or music was combined into the mixed track."""

    method: str
    target_snr_db: float
    crossfade_ms: float

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "target_snr_db": self.target_snr_db,
            "crossfade_ms": self.crossfade_ms,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "MixPlanRecord":
        return cls(
            method=d["method"],
            target_snr_db=d["target_snr_db"],
            crossfade_ms=d["crossfade_ms"],
        )


@dataclass(frozen=True)
class ManifestEntry:
    """One manifest line: script, rendered utterances, track, gate results."""

    script: DialogueScript
    utterances: tuple[Utterance, ...]
    mixed_track_path: str
    track_duration_s: float
    verification: VerificationRecord
    stage: Stage = Stage.FINALIZED
    mix_plan: Optional[MixPlanRecord] = None

    @property
    def id(self) -> str:
        return self.script.id

    def violations(
        self,
        emotions: Sequence[str] = DEFAULT_EMOTIONS,
        max_attempts: int = 10,
    ) -> list[str]:
        out = validate_script(self.script, emotions)
        if len(self.utterances) != len(self.script.turns):
            out.append(
                f"utterance count {len(self.utterances)} != turn count {len(self.script.turns)}"
            )
        for utt in self.utterances:
            out.extend(utt.violations(emotions))
        out.extend(self.verification.violations(max_attempts))
        return out

    def to_json_dict(self) -> dict:
        return {
            "script": self.script.to_json_dict(),
            "utterances": [u.to_json_dict() for u in self.utterances],
            "mixed_track_path": self.mixed_track_path,
            "track_duration_s": self.track_duration_s,
            "verification": self.verification.to_json_dict(),
            "stage": self.stage.value,
            "mix_plan": self.mix_plan.to_json_dict() if self.mix_plan else None,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ManifestEntry":
        return cls(
            script=DialogueScript.from_json_dict(d["script"]),
            utterances=tuple(Utterance.from_json_dict(u) for u in d["utterances"]),
            mixed_track_path=d["mixed_track_path"],
            track_duration_s=d["track_duration_s"],
            verification=VerificationRecord.from_json_dict(d["verification"]),
            stage=Stage(d.get("stage", "finalized")),
            mix_plan=MixPlanRecord.from_json_dict(d["mix_plan"]) if d.get("mix_plan") else None,
        )

    def with_verdict(self, verdict: str, reason: Optional[str], reviewer: str) -> "ManifestEntry":
        return replace(
            self,
            verification=replace(
                self.verification,
                human_verdict=verdict,
                human_reason=reason,
                reviewer=reviewer,
            ),
        )


# ---------------------------------------------------------------------------
# Manifest serialization
# ---------------------------------------------------------------------------


def entry_to_line(entry: ManifestEntry) -> str:
    """Canonical single-line form of one entry (no trailing newline)."""
    return json.dumps(entry.to_json_dict(), ensure_ascii=False, separators=(",", ":"))


def serialize_manifest(
    entries: Iterable[ManifestEntry],
    emotions: Sequence[str] = DEFAULT_EMOTIONS,
    max_attempts: int = 10,
) -> bytes:
    """Serialize entries to the line-delimited manifest byte stream.

    Every entry is re-validated first; the error names the entry and the
    violated fields so bad records never reach disk.
    """
    lines = []
    for entry in entries:
        violations = entry.violations(emotions, max_attempts)
        if violations:
            raise ValidationError(
                f"entry {entry.id!r}: " + "; ".join(violations), violations
            )
        lines.append(entry_to_line(entry))
    return ("".join(line + "\n" for line in lines)).encode("utf-8")


def parse_manifest(
    stream: bytes | str | IO,
    emotions: Sequence[str] = DEFAULT_EMOTIONS,
    max_attempts: int = 10,
) -> list[ManifestEntry]:
    """Parse a manifest byte stream back into validated entries.

    Raises ``ManifestParseError`` with the 1-based line number for malformed
    lines and ``ValidationError`` for records that violate type invariants.
    """
    if isinstance(stream, bytes):
        text = stream.decode("utf-8")
    elif isinstance(stream, str):
        text = stream
    else:
        raw = stream.read()
        text = raw.decode("utf-8") if isinstance(raw, bytes) else raw

    entries: list[ManifestEntry] = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ManifestParseError(f"invalid JSON ({exc.msg})", number) from exc
        try:
            entry = ManifestEntry.from_json_dict(payload)
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestParseError(f"bad record structure ({exc})", number) from exc
        violations = entry.violations(emotions, max_attempts)
        if violations:
            raise ValidationError(
                f"entry {entry.id!r}: " + "; ".join(violations), violations
            )
        entries.append(entry)
    return entries


def iter_manifest_file(path) -> Iterator[ManifestEntry]:
    """Stream entries from a manifest file path."""
    with open(path, "rb") as fh:
        yield from parse_manifest(fh.read())
