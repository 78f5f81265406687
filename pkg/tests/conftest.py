from __future__ import annotations

from pathlib import Path

import pytest

from dialoforge.schema import (
    DialogueScript,
    Gender,
    ManifestEntry,
    Pitch,
    Role,
    SceneSeed,
    Speed,
    Stage,
    StyleSpec,
    Subset,
    TurnScript,
    Utterance,
    VerificationRecord,
)

DATA_DIR = Path(__file__).parent / "data"


def style(gender="female", pitch="normal", speed="fast", emotion="happy") -> StyleSpec:
    return StyleSpec(
        gender=Gender(gender), pitch=Pitch(pitch), speed=Speed(speed), emotion=emotion
    )


def two_turn_script(script_id="emotion-000000", topic="Artistic hobbies") -> DialogueScript:
    return DialogueScript(
        id=script_id,
        subset=Subset.EMOTION,
        seed=SceneSeed(topic=topic),
        turns=(
            TurnScript(
                role=Role.HUMAN,
                style=style(),
                content="I finally framed my first watercolor today.",
            ),
            TurnScript(
                role=Role.ASSISTANT,
                style=style(gender="male", speed="normal", emotion="neutral"),
                content="That is wonderful news for a new painter.",
            ),
        ),
    )


def minimal_entry(script_id="emotion-000000") -> ManifestEntry:
    script = two_turn_script(script_id)
    utterances = tuple(
        Utterance(
            turn_index=k,
            audio_path=f"audio/{script_id}/turn-{k:02d}.wav",
            duration_s=1.5 if k == 0 else 2.0,
            transcript=turn.content,
            style=turn.style,
        )
        for k, turn in enumerate(script.turns)
    )
    return ManifestEntry(
        script=script,
        utterances=utterances,
        mixed_track_path=f"audio/{script_id}/mixed.wav",
        track_duration_s=3.8,
        verification=VerificationRecord(
            per_utterance_wer=(0.0, 0.0),
            speaker_min_cosine=1.0,
            attempts_used=1,
            machine_verdict="pass",
        ),
        stage=Stage.FINALIZED,
    )


@pytest.fixture
def golden_line() -> bytes:
    return (DATA_DIR / "golden_entry.manifest.jsonl").read_bytes()
