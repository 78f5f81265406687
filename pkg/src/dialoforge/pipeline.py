"""End-to-end corpus crafting: script -> render -> gate -> mix -> manifest.

Persistence is directory-based and inspectable::

    <output_dir>/
      corpus.manifest.jsonl    # one dialogue per line (written last, sorted)
      audio/<id>/turn-NN.wav   # per-utterance audio
      audio/<id>/mixed.wav     # assembled (and scene-mixed) track
      checkpoints/<id>.json    # per-dialogue stage checkpoint, resumable
      failures.jsonl           # dialogues that died outside the gate

All writes go through temp-file-then-rename. Dialogue jobs run on a bounded
worker pool; every per-dialogue random decision derives from
(config seed, dialogue index), so mock-mode runs are bit-reproducible
regardless of scheduling, and a failing dialogue never aborts the run.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

from . import audio_io
from .blend import BlendConfig
from .errors import ConfigurationError, DialoforgeError, RejectionError, StateError
from .gate import (
    AsrClient,
    GateConfig,
    MockAsrClient,
    MockSpeakerEmbedClient,
    HttpAsrClient,
    HttpSpeakerEmbedClient,
    SpeakerEmbedClient,
    TranscriptRegistry,
    list_pending_reviews,
    record_review_verdict,
    synthesize_with_retry,
    verify_dialogue,
)
from .mixer import apply_audio_event, classify_event_duration, integrate_music, procedural_source_audio
from .rng import SplitMix64, derive_seed
from .schema import (
    DEFAULT_EMOTIONS,
    DialogueScript,
    EventClass,
    ManifestEntry,
    MixPlanRecord,
    SceneSeed,
    Stage,
    Subset,
    Utterance,
    VerificationRecord,
    Waveform,
    parse_manifest,
    serialize_manifest,
)
from .scriptgen import (
    ChatClient,
    DEFAULT_TEMPLATES,
    HttpChatClient,
    MockChatClient,
    CaptionRecord,
    generate_script,
    ingest_caption_corpus,
    load_bundled_captions,
    load_topics,
)
from .voice import HttpTtsClient, MockTtsClient, SpokenDialogue, TtsClient, assemble_dialogue_track

MANIFEST_NAME = "corpus.manifest.jsonl"
FAILURES_NAME = "failures.jsonl"

ENV_ENDPOINTS = {
    "chat": ("DIALOFORGE_LLM_URL", "DIALOFORGE_LLM_KEY"),
    "tts": ("DIALOFORGE_TTS_URL", "DIALOFORGE_TTS_KEY"),
    "asr": ("DIALOFORGE_ASR_URL", "DIALOFORGE_ASR_KEY"),
    "embed": ("DIALOFORGE_EMBED_URL", "DIALOFORGE_EMBED_KEY"),
}


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a run needs; in mock mode the seed fully determines it."""

    subset: Subset = Subset.EMOTION
    corpus_size: int = 5
    n_history_choices: tuple[int, ...] = (5,)  # history turns; dialogue = n + 1 turns
    gate: GateConfig = field(default_factory=GateConfig)
    snr_range_db: tuple[float, float] = (5.0, 20.0)
    blend_alpha: float = 0.2
    seed: int = 0
    output_dir: str = "corpus-out"
    workers: int = 0  # 0 -> logical cores
    gap_range_s: tuple[float, float] = (0.2, 0.5)
    emotions: tuple[str, ...] = DEFAULT_EMOTIONS
    max_parse_retries: int = 5
    crossfade_ms: float = 10.0
    caption_file: Optional[str] = None
    assets_dir: Optional[str] = None
    mock_asr_corruption: float = 0.0
    mock_always_fail_indices: tuple[int, ...] = ()
    halt_after: Optional[str] = None  # stage-name test hook

    def __post_init__(self):
        if self.corpus_size < 0:
            raise ConfigurationError("corpus_size must be >= 0")
        if not self.n_history_choices or any(n < 1 for n in self.n_history_choices):
            raise ConfigurationError("n_history_choices must be positive")
        if self.halt_after is not None:
            Stage(self.halt_after)

    @property
    def expected_avg_turns(self) -> float:
        mean_n = sum(self.n_history_choices) / len(self.n_history_choices)
        return mean_n + 1.0


@dataclass
class Clients:
    chat: ChatClient
    tts: TtsClient
    asr: AsrClient
    embedder: SpeakerEmbedClient
    registry: Optional[TranscriptRegistry] = None
    mock_mode: bool = True


def resolve_clients(cfg: PipelineConfig, env: Optional[dict] = None) -> Clients:
    """Live clients from DIALOFORGE_* endpoints; absent vars imply mocks."""
    env = os.environ if env is None else env

    def endpoint(name: str):
        url_var, key_var = ENV_ENDPOINTS[name]
        url = env.get(url_var, "")
        return (url, env.get(key_var, "")) if url else None

    registry = TranscriptRegistry()
    chat_ep, tts_ep, asr_ep, embed_ep = (
        endpoint("chat"), endpoint("tts"), endpoint("asr"), endpoint("embed")
    )
    mock_mode = not any((chat_ep, tts_ep, asr_ep, embed_ep))
    return Clients(
        chat=HttpChatClient(*chat_ep) if chat_ep else MockChatClient(),
        tts=HttpTtsClient(*tts_ep) if tts_ep else MockTtsClient(),
        asr=HttpAsrClient(*asr_ep)
        if asr_ep
        else MockAsrClient(registry, corruption_rate=cfg.mock_asr_corruption, seed=cfg.seed),
        embedder=HttpSpeakerEmbedClient(*embed_ep) if embed_ep else MockSpeakerEmbedClient(),
        registry=None if asr_ep else registry,
        mock_mode=mock_mode,
    )


# ---------------------------------------------------------------------------
# Atomic file helpers
# ---------------------------------------------------------------------------


def atomic_write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=path.suffix)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, payload: dict) -> None:
    atomic_write_bytes(path, json.dumps(payload, ensure_ascii=False, indent=2).encode("utf-8"))


# ---------------------------------------------------------------------------
# Per-dialogue job
# ---------------------------------------------------------------------------


@dataclass
class _JobResult:
    index: int
    entry: Optional[ManifestEntry] = None
    failure: Optional[dict] = None
    halted: bool = False
    tts_calls: int = 0


class _Checkpoint:
    """Stage checkpoint for one dialogue; stages only ever advance."""

    def __init__(self, path: Path):
        self.path = path
        self.data: dict = {}
        if path.exists():
            self.data = json.loads(path.read_text(encoding="utf-8"))

    @property
    def stage(self) -> Optional[Stage]:
        return Stage(self.data["stage"]) if "stage" in self.data else None

    def advance(self, stage: Stage, **fields) -> None:
        order = [s.value for s in Stage]
        if self.stage is not None and order.index(stage.value) <= order.index(self.stage.value):
            raise StateError(f"checkpoint stage may only advance ({self.stage} -> {stage})")
        self.data.update(fields)
        self.data["stage"] = stage.value
        atomic_write_json(self.path, self.data)


class _CountingTts:
    """Wraps a TTS client to count synthesize calls (resume verification)."""

    def __init__(self, inner: TtsClient):
        self.inner = inner
        self.calls = 0
        self._lock = threading.Lock()

    def synthesize(self, content, style, speaker_id, seed):
        with self._lock:
            self.calls += 1
        return self.inner.synthesize(content, style, speaker_id, seed)


def _pick_scene(
    cfg: PipelineConfig,
    index: int,
    topics: Sequence[str],
    captions: Sequence[CaptionRecord],
    chat: ChatClient,
) -> tuple[SceneSeed, Optional[str]]:
    """Seeded scene choice; returns (scene seed, caption source id)."""
    rng = SplitMix64(derive_seed(cfg.seed, "scene", index))
    if cfg.subset == Subset.EMOTION:
        return SceneSeed(topic=topics[rng.randint(len(topics))]), None
    record = captions[rng.randint(len(captions))]
    if cfg.subset == Subset.MUSIC:
        return SceneSeed(aspect_list=record.aspects), record.source_id
    classification = classify_event_duration(
        record.caption, chat, seed=derive_seed(cfg.seed, "classify", index)
    )
    return (
        SceneSeed(caption=record.caption, event_class=classification.value),
        record.source_id,
    )


def _source_wave(cfg: PipelineConfig, source_id: Optional[str], duration_s: float) -> Waveform:
    if source_id and cfg.assets_dir:
        asset = Path(cfg.assets_dir) / f"{source_id}.wav"
        if asset.exists():
            return audio_io.read_wav(asset)
    return procedural_source_audio(source_id or "unknown", duration_s=duration_s)


def _utterance_rows(dialogue: SpokenDialogue, rel_dir: str) -> list[dict]:
    rows = []
    for k, (turn, wave) in enumerate(zip(dialogue.script.turns, dialogue.waveforms)):
        rows.append(
            {
                "turn_index": k,
                "audio_path": f"{rel_dir}/turn-{k:02d}.wav",
                "duration_s": wave.duration_s,
                "transcript": turn.content,
                "style": turn.style.to_json_dict(),
            }
        )
    return rows


def _run_dialogue(
    cfg: PipelineConfig,
    index: int,
    clients: Clients,
    out_dir: Path,
    topics: Sequence[str],
    captions: Sequence[CaptionRecord],
) -> _JobResult:
    dialogue_id = f"{cfg.subset.value}-{index:06d}"
    rel_audio_dir = f"audio/{dialogue_id}"
    checkpoint = _Checkpoint(out_dir / "checkpoints" / f"{dialogue_id}.json")
    tts = _CountingTts(clients.tts)
    asr = clients.asr
    if index in cfg.mock_always_fail_indices and clients.registry is not None:
        asr = MockAsrClient(clients.registry, corruption_rate=1.0, seed=cfg.seed)

    result = _JobResult(index=index)

    def halted_at(stage: Stage) -> bool:
        return cfg.halt_after == stage.value

    try:
        # --- stage: scripted
        if checkpoint.stage is None:
            scene, source_id = _pick_scene(cfg, index, topics, captions, clients.chat)
            n_history = cfg.n_history_choices[
                SplitMix64(derive_seed(cfg.seed, "n-history", index)).randint(
                    len(cfg.n_history_choices)
                )
            ]
            script, _ = generate_script(
                clients.chat,
                DEFAULT_TEMPLATES[cfg.subset],
                scene,
                n_history,
                max_parse_retries=cfg.max_parse_retries,
                seed=derive_seed(cfg.seed, "script", index),
                emotions=cfg.emotions,
                script_id=dialogue_id,
            )
            checkpoint.advance(
                Stage.SCRIPTED,
                id=dialogue_id,
                index=index,
                script=script.to_json_dict(),
                source_id=source_id,
            )
            if halted_at(Stage.SCRIPTED):
                result.halted = True
                return result
        script = DialogueScript.from_json_dict(checkpoint.data["script"])
        source_id = checkpoint.data.get("source_id")
        if checkpoint.stage == Stage.FINALIZED:
            result.entry = ManifestEntry.from_json_dict(checkpoint.data["entry"])
            return result

        # --- stage: rendered (+ verification inside the retry loop)
        verification: Optional[VerificationRecord] = None
        dialogue: Optional[SpokenDialogue] = None
        if checkpoint.stage == Stage.SCRIPTED:
            try:
                dialogue = synthesize_with_retry(
                    script,
                    tts,
                    asr,
                    clients.embedder,
                    cfg.gate,
                    seed=derive_seed(cfg.seed, "render", index),
                    gap_range=cfg.gap_range_s,
                )
                verification = dialogue.verification
            except RejectionError as exc:
                dialogue = exc.dialogue
                verification = exc.record
            for k, wave in enumerate(dialogue.waveforms):
                audio_io.write_wav(out_dir / rel_audio_dir / f"turn-{k:02d}.wav", wave)
            checkpoint.advance(
                Stage.RENDERED,
                utterances=_utterance_rows(dialogue, rel_audio_dir),
                speaker_ids=list(dialogue.speaker_ids),
                gaps=list(dialogue.layout.gaps),
                attempts_used=verification.attempts_used,
            )
            if halted_at(Stage.RENDERED):
                result.halted = True
                return result

        # resume path: rebuild waveforms (and the mock-ASR registry) from disk
        if dialogue is None and checkpoint.stage in (Stage.RENDERED, Stage.GATED):
            waves = [
                audio_io.read_wav(out_dir / row["audio_path"])
                for row in checkpoint.data["utterances"]
            ]
            if clients.registry is not None:
                for wave, turn in zip(waves, script.turns):
                    clients.registry.register(wave, turn.content)
            track, layout = assemble_dialogue_track(waves, checkpoint.data["gaps"])
            dialogue = SpokenDialogue(
                script=script,
                waveforms=tuple(waves),
                speaker_ids=tuple(checkpoint.data["speaker_ids"]),
                track=track,
                layout=layout,
            )

        # --- stage: gated
        if checkpoint.stage == Stage.RENDERED:
            if verification is None:
                verification = verify_dialogue(
                    dialogue,
                    asr,
                    clients.embedder,
                    cfg.gate,
                    attempts_used=checkpoint.data.get("attempts_used", 1),
                )
            checkpoint.advance(Stage.GATED, verification=verification.to_json_dict())
            if halted_at(Stage.GATED):
                result.halted = True
                return result
        verification = VerificationRecord.from_json_dict(checkpoint.data["verification"])

        # --- stage: mixed
        if checkpoint.stage == Stage.GATED:
            track, layout = dialogue.track, dialogue.layout
            plan: Optional[MixPlanRecord] = None
            if cfg.subset == Subset.AUDIO:
                event = _source_wave(cfg, source_id, duration_s=2.0)
                event_class = script.seed.event_class or EventClass.CONTINUOUS
                track, layout, plan = apply_audio_event(
                    track,
                    layout,
                    event,
                    event_class,
                    plan_seed=derive_seed(cfg.seed, "mix", index),
                    snr_range_db=cfg.snr_range_db,
                    crossfade_ms=cfg.crossfade_ms,
                )
            elif cfg.subset == Subset.MUSIC:
                music = _source_wave(cfg, source_id, duration_s=6.0)
                track, layout, plan = integrate_music(
                    track,
                    layout,
                    music,
                    plan_seed=derive_seed(cfg.seed, "mix", index),
                    snr_range_db=cfg.snr_range_db,
                    crossfade_ms=cfg.crossfade_ms,
                )
            audio_io.write_wav(out_dir / rel_audio_dir / "mixed.wav", track)
            checkpoint.advance(
                Stage.MIXED,
                mixed_track_path=f"{rel_audio_dir}/mixed.wav",
                track_duration_s=track.duration_s,
                mix_plan=plan.to_json_dict() if plan else None,
            )
            if halted_at(Stage.MIXED):
                result.halted = True
                return result

        # --- stage: finalized
        if checkpoint.stage == Stage.MIXED:
            entry = ManifestEntry(
                script=script,
                utterances=tuple(
                    Utterance.from_json_dict(row) for row in checkpoint.data["utterances"]
                ),
                mixed_track_path=checkpoint.data["mixed_track_path"],
                track_duration_s=checkpoint.data["track_duration_s"],
                verification=verification,
                stage=Stage.FINALIZED
                if verification.machine_verdict == "pass"
                else Stage.GATED,
                mix_plan=MixPlanRecord.from_json_dict(checkpoint.data["mix_plan"])
                if checkpoint.data.get("mix_plan")
                else None,
            )
            checkpoint.advance(Stage.FINALIZED, entry=entry.to_json_dict())
        result.entry = ManifestEntry.from_json_dict(checkpoint.data["entry"])
    except DialoforgeError as exc:
        result.failure = {
            "id": dialogue_id,
            "index": index,
            "error": type(exc).__name__,
            "message": str(exc),
        }
    finally:
        result.tts_calls = tts.calls
    return result


# ---------------------------------------------------------------------------
# Run orchestration
# ---------------------------------------------------------------------------


@dataclass
class RunResult:
    manifest_path: Path
    entries: list[ManifestEntry]
    failures: list[dict]
    halted: int
    tts_calls: int
    stats: "CorpusStats"


def run_pipeline(cfg: PipelineConfig, clients: Optional[Clients] = None) -> RunResult:
    """Craft a corpus end to end; resumable and per-dialogue isolated."""
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "checkpoints").mkdir(exist_ok=True)
    if clients is None:
        clients = resolve_clients(cfg)

    topics = load_topics() if cfg.subset == Subset.EMOTION else []
    captions: list[CaptionRecord] = []
    if cfg.subset != Subset.EMOTION:
        captions = (
            ingest_caption_corpus(cfg.caption_file, cfg.subset)
            if cfg.caption_file
            else load_bundled_captions(cfg.subset)
        )
        if not captions:
            raise ConfigurationError("caption corpus is empty after filtering")

    workers = cfg.workers or (os.cpu_count() or 1)
    results: list[_JobResult] = []
    if cfg.corpus_size:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_dialogue, cfg, i, clients, out_dir, topics, captions)
                for i in range(cfg.corpus_size)
            ]
            results = [f.result() for f in futures]
    results.sort(key=lambda r: r.index)

    entries = [r.entry for r in results if r.entry is not None]
    failures = [r.failure for r in results if r.failure is not None]
    atomic_write_bytes(
        out_dir / MANIFEST_NAME,
        serialize_manifest(entries, cfg.emotions, cfg.gate.max_attempts),
    )
    failure_lines = "".join(
        json.dumps(f, ensure_ascii=False, separators=(",", ":")) + "\n" for f in failures
    )
    atomic_write_bytes(out_dir / FAILURES_NAME, failure_lines.encode("utf-8"))

    return RunResult(
        manifest_path=out_dir / MANIFEST_NAME,
        entries=entries,
        failures=failures,
        halted=sum(1 for r in results if r.halted),
        tts_calls=sum(r.tts_calls for r in results),
        stats=corpus_stats(entries),
    )


# ---------------------------------------------------------------------------
# Corpus statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CorpusStats:
    """Manifest-level statistics in the Table-style convention
    (avg turns = total turns / dialogue count, exactly)."""

    dialogue_count: int
    turn_count: int
    avg_turns: float
    total_duration_s: float
    total_duration_hours: float
    emotion_counts: dict[str, int]
    machine_pass: int
    machine_fail: int
    human_pending: int
    human_approved: int
    human_rejected: int

    def to_json_dict(self) -> dict:
        return {
            "dialogue_count": self.dialogue_count,
            "turn_count": self.turn_count,
            "avg_turns": self.avg_turns,
            "total_duration_s": self.total_duration_s,
            "total_duration_hours": self.total_duration_hours,
            "emotion_counts": dict(sorted(self.emotion_counts.items())),
            "machine_pass": self.machine_pass,
            "machine_fail": self.machine_fail,
            "human_pending": self.human_pending,
            "human_approved": self.human_approved,
            "human_rejected": self.human_rejected,
        }


def corpus_stats(entries: Sequence[ManifestEntry]) -> CorpusStats:
    turn_count = sum(len(e.script.turns) for e in entries)
    emotion_counts: dict[str, int] = {}
    for e in entries:
        for turn in e.script.turns:
            emotion_counts[turn.style.emotion] = emotion_counts.get(turn.style.emotion, 0) + 1
    total_duration = sum(e.track_duration_s for e in entries)
    verdicts = [e.verification for e in entries]
    return CorpusStats(
        dialogue_count=len(entries),
        turn_count=turn_count,
        avg_turns=turn_count / len(entries) if entries else 0.0,
        total_duration_s=total_duration,
        total_duration_hours=total_duration / 3600.0,
        emotion_counts=emotion_counts,
        machine_pass=sum(1 for v in verdicts if v.machine_verdict == "pass"),
        machine_fail=sum(1 for v in verdicts if v.machine_verdict == "fail"),
        human_pending=sum(1 for v in verdicts if v.human_verdict == "pending"),
        human_approved=sum(1 for v in verdicts if v.human_verdict == "approved"),
        human_rejected=sum(1 for v in verdicts if v.human_verdict == "rejected"),
    )


# ---------------------------------------------------------------------------
# Manifest store (single writer; verdict CAS)
# ---------------------------------------------------------------------------


class ManifestStore:
    """File-backed manifest with serialized verdict writes.

    All mutations happen under one lock: compare-and-set on the entry's
    ``human_verdict``, then an atomic rewrite of the manifest file.
    """

    def __init__(self, manifest_path: str | Path):
        self.path = Path(manifest_path)
        if not self.path.exists():
            raise ConfigurationError(f"manifest not found: {self.path}")
        self.root = self.path.parent
        self._lock = threading.Lock()
        self._entries = parse_manifest(self.path.read_bytes())

    def entries(self) -> list[ManifestEntry]:
        with self._lock:
            return list(self._entries)

    def get(self, entry_id: str) -> Optional[ManifestEntry]:
        with self._lock:
            return next((e for e in self._entries if e.id == entry_id), None)

    def pending(self):
        with self._lock:
            return list_pending_reviews(self._entries)

    def stats(self) -> CorpusStats:
        with self._lock:
            return corpus_stats(self._entries)

    def apply_verdict(
        self, entry_id: str, verdict: str, reviewer: str, reason: Optional[str] = None
    ) -> VerificationRecord:
        with self._lock:
            updated, record = record_review_verdict(
                self._entries, entry_id, verdict, reviewer, reason
            )
            atomic_write_bytes(self.path, serialize_manifest(updated))
            self._entries = updated
            return record

    def audio_path(self, entry_id: str) -> Optional[Path]:
        entry = self.get(entry_id)
        if entry is None:
            return None
        return self.root / entry.mixed_track_path


def export_manifest(store_or_entries, out_path: str | Path) -> int:
    """Write the finalized corpus (machine pass + human approved) to a file."""
    from .gate import export_finalized

    entries = (
        store_or_entries.entries()
        if isinstance(store_or_entries, ManifestStore)
        else list(store_or_entries)
    )
    finalized = export_finalized(entries)
    atomic_write_bytes(Path(out_path), serialize_manifest(finalized))
    return len(finalized)


def demo_blend_config(cfg: PipelineConfig, manifest_path: Path) -> BlendConfig:
    """Blend configuration pairing this corpus with itself as the real pool."""
    from .blend import load_pool

    pool = load_pool(manifest_path)
    return BlendConfig(
        alpha=cfg.blend_alpha, seed=cfg.seed, synthetic_pool=pool, real_pool=pool
    )
