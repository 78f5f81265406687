"""Prompt rendering, chat-completion clients, and script parsing.

The chat model is asked to answer with a fenced block, one line per turn::

    ```dialogue
    role | gender | pitch | speed | emotion | text
    ```

A dialogue with ``n_history`` turns of prior conversation has
``n_history + 1`` lines: the history turns followed by one final response
turn. Roles strictly alternate starting with human, so the response is an
assistant turn exactly when ``n_history`` is odd; even values are accepted
for turn-count parity studies. Fixing this grammar is what makes parsing
testable; mock clients emit it.
"""

from __future__ import annotations

import ast
import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Protocol, Sequence

from .errors import (
    ContractError,
    GenerationFailedError,
    IngestionError,
    ScriptParseError,
    TemplateError,
)
from .rng import SplitMix64, derive_seed, stable_hash64
from .schema import (
    DEFAULT_EMOTIONS,
    DialogueScript,
    Gender,
    Pitch,
    Role,
    SceneSeed,
    Speed,
    StyleSpec,
    Subset,
    TurnScript,
    validate_script,
)

# ---------------------------------------------------------------------------
# Chat client interface
# ---------------------------------------------------------------------------


class ChatClient(Protocol):
    def complete(self, prompt: str, seed: int) -> str: ...


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

_GRAMMAR_FOOTER = """Return only a fenced block, one line per turn, fields separated by " | ":
```dialogue
role | gender | pitch | speed | emotion | text
```
Roles strictly alternate starting with human; the last line is the response turn."""

EMOTION_TEMPLATE_BODY = (
    "You are writing a natural spoken conversation between a human and an assistant.\n"
    "Topic: {topic}\n"
    "First generate {n_history} turns of prior conversation, strictly alternating and\n"
    "starting with the human, then write one final response turn that keeps the\n"
    "emotional flow of the exchange.\n"
    "Allowed emotions: {emotion_set}.\n"
    "Genders: male, female. Pitches: low, normal, high. Speeds: slow, normal, fast.\n"
    + _GRAMMAR_FOOTER
)

AUDIO_TEMPLATE_BODY = (
    "You are writing a natural spoken conversation between a human and an assistant that\n"
    "takes place while a sound is heard nearby.\n"
    "Scene sound: {caption}\n"
    "First generate {n_history} turns of prior conversation, strictly alternating and\n"
    "starting with the human, then write one final response turn. The speakers should\n"
    "react naturally to the sound.\n"
    "Allowed emotions: {emotion_set}.\n"
    "Genders: male, female. Pitches: low, normal, high. Speeds: slow, normal, fast.\n"
    + _GRAMMAR_FOOTER
)

MUSIC_TEMPLATE_BODY = (
    "You are writing a natural spoken conversation between a human and an assistant about\n"
    "a piece of music playing in the background.\n"
    "Music aspects: {aspect_list}\n"
    "First generate {n_history} turns of prior conversation, strictly alternating and\n"
    "starting with the human, then write one final response turn that engages with\n"
    "the music.\n"
    "Allowed emotions: {emotion_set}.\n"
    "Genders: male, female. Pitches: low, normal, high. Speeds: slow, normal, fast.\n"
    + _GRAMMAR_FOOTER
)

_SUBSET_PLACEHOLDER = {
    Subset.EMOTION: "topic",
    Subset.AUDIO: "caption",
    Subset.MUSIC: "aspect_list",
}


@dataclass(frozen=True)
class PromptTemplate:
    """A subset-specific prompt body with named placeholders."""

    subset: Subset
    body: str

    def __post_init__(self):
        for name in (_SUBSET_PLACEHOLDER[self.subset], "n_history", "emotion_set"):
            count = self.body.count("{" + name + "}")
            if count != 1:
                raise TemplateError(
                    f"{self.subset.value} template must reference {{{name}}} exactly once, "
                    f"found {count}"
                )


DEFAULT_TEMPLATES = {
    Subset.EMOTION: PromptTemplate(Subset.EMOTION, EMOTION_TEMPLATE_BODY),
    Subset.AUDIO: PromptTemplate(Subset.AUDIO, AUDIO_TEMPLATE_BODY),
    Subset.MUSIC: PromptTemplate(Subset.MUSIC, MUSIC_TEMPLATE_BODY),
}


def render_prompt(
    template: PromptTemplate,
    seed_data: SceneSeed,
    n_history: int,
    emotions: Sequence[str] = DEFAULT_EMOTIONS,
) -> str:
    """Fill a template; the seed text is embedded verbatim."""
    if n_history < 1:
        raise ContractError("n_history must be >= 1")
    values = {
        "topic": seed_data.topic,
        "caption": seed_data.caption,
        "aspect_list": ", ".join(seed_data.aspect_list) if seed_data.aspect_list else None,
    }
    key = _SUBSET_PLACEHOLDER[template.subset]
    if values[key] is None:
        raise TemplateError(f"scene seed is missing the {key} field required by the "
                            f"{template.subset.value} template")
    for other, value in values.items():
        if other != key and value is not None:
            raise TemplateError(
                f"scene seed carries a {other} field but the template subset is "
                f"{template.subset.value}"
            )
    out = template.body
    out = out.replace("{" + key + "}", values[key])
    out = out.replace("{n_history}", str(n_history))
    out = out.replace("{emotion_set}", ", ".join(emotions))
    return out


# ---------------------------------------------------------------------------
# Output grammar
# ---------------------------------------------------------------------------

_FENCE_RE = re.compile(r"```(?:dialogue)?[ \t]*\n(.*?)```", re.DOTALL)


def emit_script_block(script: DialogueScript) -> str:
    """Render a script in the exact output grammar (the mock emitter)."""
    lines = [
        f"{t.role.value} | {t.style.gender.value} | {t.style.pitch.value} | "
        f"{t.style.speed.value} | {t.style.emotion} | {t.content}"
        for t in script.turns
    ]
    return "```dialogue\n" + "\n".join(lines) + "\n```"


def _placeholder_seed(subset: Subset) -> SceneSeed:
    if subset == Subset.EMOTION:
        return SceneSeed(topic="(unspecified)")
    if subset == Subset.AUDIO:
        return SceneSeed(caption="(unspecified)")
    return SceneSeed(aspect_list=("unspecified",))


def parse_script_output(
    raw: str,
    subset: Subset,
    n_history: int,
    emotions: Sequence[str] = DEFAULT_EMOTIONS,
    scene_seed: Optional[SceneSeed] = None,
    script_id: Optional[str] = None,
) -> DialogueScript:
    """Parse chat-model output into a validated DialogueScript.

    Expects ``n_history + 1`` grammar lines inside a fenced block (the
    history turns plus the final response turn). Every structural problem
    raises ``ScriptParseError`` carrying the offending fragment.
    """
    match = _FENCE_RE.search(raw)
    if match is None:
        raise ScriptParseError("no fenced dialogue block found", fragment=raw[:160])
    lines = [ln.strip() for ln in match.group(1).splitlines() if ln.strip()]
    expected = n_history + 1
    if len(lines) != expected:
        raise ScriptParseError(
            f"expected {expected} turns, got {len(lines)}", fragment=match.group(1)[:160]
        )

    turns: list[TurnScript] = []
    for k, line in enumerate(lines):
        parts = [p.strip() for p in line.split("|", 5)]
        if len(parts) != 6:
            raise ScriptParseError(f"turn {k}: expected 6 fields", fragment=line)
        role_s, gender_s, pitch_s, speed_s, emotion_s, content = parts
        try:
            role = Role(role_s)
        except ValueError:
            raise ScriptParseError(f"turn {k}: unknown role {role_s!r}", fragment=line)
        expected_role = Role.HUMAN if k % 2 == 0 else Role.ASSISTANT
        if role != expected_role:
            raise ScriptParseError(f"turn {k}: non-alternating roles", fragment=line)
        if not emotion_s:
            raise ScriptParseError(f"turn {k}: missing style.emotion", fragment=line)
        if emotion_s not in emotions:
            raise ScriptParseError(f"turn {k}: unknown emotion {emotion_s!r}", fragment=line)
        try:
            style = StyleSpec(
                gender=Gender(gender_s), pitch=Pitch(pitch_s), speed=Speed(speed_s),
                emotion=emotion_s,
            )
        except ValueError as exc:
            raise ScriptParseError(f"turn {k}: {exc}", fragment=line)
        if not content.split():
            raise ScriptParseError(f"turn {k}: empty content", fragment=line)
        turns.append(TurnScript(role=role, style=style, content=content))

    script = DialogueScript(
        id=script_id or f"script-{stable_hash64(raw.encode('utf-8')) % 10 ** 8:08d}",
        subset=subset,
        seed=scene_seed if scene_seed is not None else _placeholder_seed(subset),
        turns=tuple(turns),
    )
    violations = validate_script(script, emotions)
    if violations:
        raise ScriptParseError("; ".join(violations), fragment=raw[:160])
    return script


def generate_script(
    client: ChatClient,
    template: PromptTemplate,
    seed_data: SceneSeed,
    n_history: int,
    max_parse_retries: int = 5,
    seed: int = 0,
    emotions: Sequence[str] = DEFAULT_EMOTIONS,
    script_id: Optional[str] = None,
) -> tuple[DialogueScript, int]:
    """Drive the chat client until its output parses; returns (script, attempts)."""
    if max_parse_retries < 1:
        raise ContractError("max_parse_retries must be >= 1")
    prompt = render_prompt(template, seed_data, n_history, emotions)
    last_error: Optional[ScriptParseError] = None
    for attempt in range(1, max_parse_retries + 1):
        raw = client.complete(prompt, derive_seed(seed, "gen-attempt", attempt))
        try:
            script = parse_script_output(
                raw, template.subset, n_history, emotions,
                scene_seed=seed_data, script_id=script_id,
            )
            return script, attempt
        except ScriptParseError as exc:
            last_error = exc
    raise GenerationFailedError(
        f"no parseable script after {max_parse_retries} attempts: {last_error}",
        attempts=max_parse_retries,
        last_error=last_error,
    )


# ---------------------------------------------------------------------------
# Caption corpora
# ---------------------------------------------------------------------------

DEFAULT_SPEECH_KEYWORDS = (
    "speaking",
    "speech",
    "talks",
    "talking",
    "man says",
    "woman says",
    "narration",
    "voice",
    "singing",
    "conversation",
)


@dataclass(frozen=True)
class CaptionRecord:
    """One retained caption row: an audio caption or a music aspect list."""

    source_id: str
    caption: str
    aspects: Optional[tuple[str, ...]] = None


_ID_COLUMNS = ("source_id", "id", "ytid", "youtube_id", "audiocap_id")


def _parse_aspects(raw: str) -> tuple[str, ...]:
    raw = raw.strip()
    if raw.startswith("["):
        try:
            parsed = ast.literal_eval(raw)
            return tuple(str(x).strip() for x in parsed if str(x).strip())
        except (ValueError, SyntaxError):
            pass
    return tuple(p.strip() for p in re.split(r"[;,]", raw) if p.strip())


def ingest_caption_corpus(
    path: str | Path,
    subset: Subset,
    speech_keywords: Sequence[str] = DEFAULT_SPEECH_KEYWORDS,
) -> list[CaptionRecord]:
    """Load a comma-separated caption export, dropping human-voice rows.

    Rows whose caption matches the speech-keyword denylist (case-insensitive
    substring) are filtered out; this stands in for a voice-event classifier.
    """
    path = Path(path)
    if not path.exists():
        raise IngestionError(f"caption file not found: {path}")
    text_column = "aspect_list" if subset == Subset.MUSIC else "caption"
    records: list[CaptionRecord] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise IngestionError("caption file has no header row")
        fields = [f.strip() for f in reader.fieldnames]
        id_col = next((c for c in _ID_COLUMNS if c in fields), None)
        if id_col is None:
            raise IngestionError(f"no id column among {_ID_COLUMNS}")
        col = text_column if text_column in fields else ("aspects" if "aspects" in fields else None)
        if col is None:
            raise IngestionError(f"missing {text_column!r} column")
        for row_number, row in enumerate(reader, start=2):  # header is row 1
            raw = (row.get(col) or "").strip()
            source_id = (row.get(id_col) or "").strip()
            if not raw or not source_id:
                raise IngestionError("empty id or caption", row_number=row_number)
            if subset == Subset.MUSIC:
                aspects = _parse_aspects(raw)
                if not aspects:
                    raise IngestionError("unparseable aspect list", row_number=row_number)
                caption = ", ".join(aspects)
                record = CaptionRecord(source_id=source_id, caption=caption, aspects=aspects)
            else:
                caption = raw
                record = CaptionRecord(source_id=source_id, caption=caption)
            lowered = caption.lower()
            if any(kw in lowered for kw in speech_keywords):
                continue
            records.append(record)
    return records


# ---------------------------------------------------------------------------
# Bundled assets
# ---------------------------------------------------------------------------


def _data_path(name: str) -> Path:
    return Path(__file__).parent / "data" / name


def load_topics() -> list[str]:
    """The bundled dialogue-topic list ('#' lines are comments)."""
    lines = _data_path("topics.txt").read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.startswith("#")]


def load_bundled_captions(subset: Subset) -> list[CaptionRecord]:
    name = "captions_music.csv" if subset == Subset.MUSIC else "captions_audio.csv"
    return ingest_caption_corpus(_data_path(name), subset)


# ---------------------------------------------------------------------------
# Clients
# ---------------------------------------------------------------------------

_MOCK_WORDS = (
    "well I think that sounds really interesting and we should talk more about it "
    "you know the way things change over time makes me feel curious about every "
    "little detail because people often find meaning in small moments together "
    "maybe we could try something new next weekend if the weather holds up nicely "
    "honestly this reminds me of a story my friend told me last winter evening"
).split()

_HISTORY_RE = re.compile(r"generate (\d+) turns")
_EMOTIONS_RE = re.compile(r"Allowed emotions: ([^.\n]+)")
_SEED_RE = re.compile(r"^(?:Topic|Scene sound|Music aspects): (.+)$", re.MULTILINE)


def heuristic_event_class(caption: str) -> str:
    """Keyword fallback for temporary/continuous classification."""
    lowered = caption.lower()
    temporary_markers = (
        "slam", "ring", "knock", "bang", "beep", "crash", "honk", "pop",
        "click", "thud", "sneeze", "cough", "clap", "shatter", "burst", "snap",
    )
    continuous_markers = (
        "noise", "rain", "chatter", "traffic", "hum", "wind", "crowd",
        "engine", "music", "ambience", "ambient", "waterfall", "stream",
        "static", "buzz", "drone", "idling", "murmur",
    )
    if any(m in lowered for m in temporary_markers):
        return "temporary"
    if any(m in lowered for m in continuous_markers):
        return "continuous"
    return "continuous"


class MockChatClient:
    """Deterministic stand-in for the chat model.

    Pure function of (prompt, seed). Recognizes the three prompt families
    this package issues: dialogue-script generation, temporary/continuous
    event classification, and response scoring.
    """

    def complete(self, prompt: str, seed: int) -> str:
        if "temporary or continuous" in prompt:
            return self._classify(prompt)
        if "Score: k" in prompt:
            return self._score(prompt, seed)
        return self._dialogue(prompt, seed)

    @staticmethod
    def _classify(prompt: str) -> str:
        match = re.search(r'Event: "(.*)"', prompt)
        caption = match.group(1) if match else prompt
        return f"The event is {heuristic_event_class(caption)}."

    @staticmethod
    def _score(prompt: str, seed: int) -> str:
        score = 3 + stable_hash64(prompt.encode("utf-8"), seed) % 3
        return f"The response fits the context. Score: {score}"

    def _dialogue(self, prompt: str, seed: int) -> str:
        history_m = _HISTORY_RE.search(prompt)
        n_history = int(history_m.group(1)) if history_m else 3
        emotions_m = _EMOTIONS_RE.search(prompt)
        emotions = (
            tuple(e.strip() for e in emotions_m.group(1).split(","))
            if emotions_m
            else DEFAULT_EMOTIONS
        )
        seed_m = _SEED_RE.search(prompt)
        topic_words = [w for w in re.findall(r"[A-Za-z]+", seed_m.group(1))] if seed_m else []

        rng = SplitMix64(stable_hash64(prompt.encode("utf-8"), seed))
        genders = {"human": rng.choice(list(Gender)), "assistant": rng.choice(list(Gender))}
        pitches = {"human": rng.choice(list(Pitch)), "assistant": rng.choice(list(Pitch))}
        speeds = {"human": rng.choice(list(Speed)), "assistant": rng.choice(list(Speed))}

        lines = []
        for k in range(n_history + 1):
            role = "human" if k % 2 == 0 else "assistant"
            n_words = 5 + rng.randint(5)
            words = [rng.choice(_MOCK_WORDS) for _ in range(n_words)]
            if topic_words and rng.uniform() < 0.6:
                words.insert(rng.randint(len(words)), rng.choice(topic_words).lower())
            emotion = rng.choice(emotions)
            lines.append(
                f"{role} | {genders[role].value} | {pitches[role].value} | "
                f"{speeds[role].value} | {emotion} | {' '.join(words)}"
            )
        return "Here is the conversation.\n```dialogue\n" + "\n".join(lines) + "\n```\n"


class SequencedChatClient:
    """Replays a fixed list of replies in order (test double; stateful)."""

    def __init__(self, replies: Sequence[str]):
        if not replies:
            raise ContractError("at least one reply required")
        self.replies = list(replies)
        self.calls = 0

    def complete(self, prompt: str, seed: int) -> str:
        reply = self.replies[min(self.calls, len(self.replies) - 1)]
        self.calls += 1
        return reply


class HttpChatClient:
    """Live chat transport: POST prompt, receive completion text."""

    def __init__(self, url: str, api_key: str = "", timeout: float = 120.0):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout

    def complete(self, prompt: str, seed: int) -> str:
        import httpx

        resp = httpx.post(
            self.url,
            json={"prompt": prompt, "seed": seed},
            headers={"Authorization": f"Bearer {self.api_key}"} if self.api_key else {},
            timeout=self.timeout,
        )
        resp.raise_for_status()
        return resp.json()["text"]
