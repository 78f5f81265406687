"""dialoforge: synthetic spoken-dialogue corpus crafting and evaluation.

Library + CLI for generating verified spoken dialogues (script generation,
controllable-TTS rendering, WER/timbre gating, audio-event and music mixing),
deterministic synthetic/real blend sampling, a response-metric battery, and a
numerically verified windowed query-attention fusion kernel.
"""

__version__ = "0.1.0"

from .schema import (  # noqa: F401
    DEFAULT_EMOTIONS,
    PIPELINE_SAMPLE_RATE,
    DialogueScript,
    ManifestEntry,
    SceneSeed,
    StyleSpec,
    Subset,
    TurnScript,
    VerificationRecord,
    Waveform,
    parse_manifest,
    serialize_manifest,
    validate_script,
)
