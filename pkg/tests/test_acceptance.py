"""Acceptance suite: one test per release criterion, at its stated tolerance.

Each test prints a single PASS line on success (run with ``pytest -v`` or
``-s`` to see them); the test name states the criterion.
"""

from __future__ import annotations

import math
import time
import numpy as np
import pytest

from dialoforge.blend import BlendConfig, BlendState, next_source
from dialoforge.cli import main
from dialoforge.fusion import (
    EXPERTS,
    FusionConfig,
    backward_and_gradcheck,
    init_params,
    mixformer_turn,
    random_instance,
)
from dialoforge.gate import (
    GateConfig,
    MockAsrClient,
    MockSpeakerEmbedClient,
    TranscriptRegistry,
    synthesize_with_retry,
    verify_dialogue,
    wer,
)
from dialoforge.mixer import overlay_at_snr
from dialoforge.metrics import bleu, meteor, rouge_l, weighted_f1
from dialoforge.errors import RejectionError
from dialoforge.schema import (
    DialogueScript,
    Role,
    SceneSeed,
    Subset,
    TurnScript,
    Waveform,
    parse_manifest,
)
from dialoforge.voice import MockTtsClient, assemble_dialogue_track, resample_16k

from .conftest import style, two_turn_script
from .test_gate import oracle_edit_distance
from .test_metrics import oracle_bleu, oracle_rouge_l, oracle_weighted_f1


def _report(line: str) -> None:
    print(f"PASS: {line}")


# ---------------------------------------------------------------------------
# Criterion 1: fusion gradient check
# ---------------------------------------------------------------------------


def test_fusion_gradient_check_50_instances_under_60s():
    started = time.perf_counter()
    worst = 0.0
    for seed in range(50):
        instance, params, cfg = random_instance(
            seed, max_frames=40, max_expert_dim=8, max_vocab=12, max_turns=3
        )
        assert cfg.window_len == 17 and cfg.queries_per_window == 1
        worst = max(worst, backward_and_gradcheck(params, instance, cfg))
    elapsed = time.perf_counter() - started
    assert worst < 1e-4, f"max relative gradient error {worst:.3e}"
    assert elapsed < 60.0, f"gradient check took {elapsed:.1f}s"
    _report(
        f"fusion gradcheck: 50 instances, max relative error {worst:.2e} < 1e-4 "
        f"in {elapsed:.1f}s < 60s"
    )


# ---------------------------------------------------------------------------
# Criterion 2: fusion shape law
# ---------------------------------------------------------------------------


def test_fusion_shape_law_1000_random_configurations():
    rng = np.random.default_rng(2024)
    checked = 0
    for _ in range(1000):
        n = int(rng.integers(1, 61))
        window_len = int(rng.integers(1, 26))
        k = int(rng.integers(1, 5))
        cfg = FusionConfig(window_len=window_len, queries_per_window=k, model_dim=6)
        params = init_params(int(rng.integers(0, 2 ** 31)), (3, 3, 3), cfg, vocab_size=4)
        features = {name: rng.standard_normal((n, 3)) for name in EXPERTS}
        z, cache = mixformer_turn(features, params, cfg)
        assert z.shape[0] == math.ceil(n / window_len) * k
        for name in EXPERTS:
            gates = cache.gates[name]
            assert np.all((gates > 0.0) & (gates < 1.0))
            assert np.allclose(cache.qf[name].attn.sum(axis=-1), 1.0, atol=1e-6)
        checked += 1
    _report(
        f"fusion shape law: {checked} random (N, L, K) give ceil(N/L)*K frames, "
        "gates in (0,1), attention rows sum to 1 +- 1e-6"
    )


# ---------------------------------------------------------------------------
# Criterion 3: WER oracle equivalence
# ---------------------------------------------------------------------------


def test_wer_equals_brute_force_oracle_on_1000_pairs():
    vocab = "the a cat dog sat ran blue sky".split()
    rng = np.random.default_rng(77)
    for _ in range(1000):
        ref = tuple(vocab[i] for i in rng.integers(0, len(vocab), size=rng.integers(1, 9)))
        hyp = tuple(vocab[i] for i in rng.integers(0, len(vocab), size=rng.integers(0, 9)))
        expected = oracle_edit_distance(ref, hyp)
        assert wer(" ".join(ref), " ".join(hyp)) * len(ref) == float(expected)
    _report("WER: wer * |ref| equals the brute-force edit-distance oracle exactly on 1000 pairs")


# ---------------------------------------------------------------------------
# Criterion 4: gate thresholds and the 10-attempt budget
# ---------------------------------------------------------------------------


def _dialogue_with_transcripts(n_ref_words: int):
    words = [f"w{k}" for k in range(n_ref_words)]
    content = " ".join(words)
    script = DialogueScript(
        id="gate-check",
        subset=Subset.EMOTION,
        seed=SceneSeed(topic="threshold check"),
        turns=(
            TurnScript(role=Role.HUMAN, style=style(), content=content),
            TurnScript(role=Role.ASSISTANT, style=style(emotion="neutral"), content=content),
        ),
    )
    tts = MockTtsClient()
    waves = [tts.synthesize(t.content, t.style, 1 + k, 0) for k, t in enumerate(script.turns)]
    track, layout = assemble_dialogue_track(waves, [0.2])
    from dialoforge.voice import SpokenDialogue

    return script, SpokenDialogue(
        script=script,
        waveforms=tuple(waves),
        speaker_ids=(1, 2),
        track=track,
        layout=layout,
    )


class _SubstitutingAsr:
    """Returns the reference with exactly n leading words substituted."""

    def __init__(self, script, n_errors):
        self.script = script
        self.n_errors = n_errors
        self.calls = 0

    def transcribe(self, w):
        words = self.script.turns[self.calls % 2].content.split()
        self.calls += 1
        for k in range(self.n_errors):
            words[k] = "xxx"
        return " ".join(words)


def test_gate_thresholds_and_exact_retry_budget():
    # 1000-word utterances: 51 errors -> WER 0.051 fails; 49 -> 0.049 passes
    script, dialogue = _dialogue_with_transcripts(1000)
    cfg = GateConfig()  # wer threshold 0.05

    failing = verify_dialogue(dialogue, _SubstitutingAsr(script, 51), MockSpeakerEmbedClient(), cfg)
    assert failing.per_utterance_wer[0] == pytest.approx(0.051)
    assert failing.machine_verdict == "fail"
    assert failing.machine_reason == "wer_exceeded:0"

    passing = verify_dialogue(dialogue, _SubstitutingAsr(script, 49), MockSpeakerEmbedClient(), cfg)
    assert passing.per_utterance_wer[0] == pytest.approx(0.049)
    assert passing.machine_verdict == "pass"

    # a permanently failing mock is rejected after exactly 10 attempts
    registry = TranscriptRegistry()
    always_bad = MockAsrClient(registry, corruption_rate=1.0, seed=3)
    calls = []

    class CountingTts(MockTtsClient):
        def synthesize(self, *args, **kwargs):
            calls.append(1)
            return super().synthesize(*args, **kwargs)

    retry_script = two_turn_script()
    with pytest.raises(RejectionError) as excinfo:
        synthesize_with_retry(
            retry_script, CountingTts(), always_bad, MockSpeakerEmbedClient(), cfg, seed=1
        )
    assert excinfo.value.record.attempts_used == 10
    assert len(calls) == 10 * len(retry_script.turns)  # 10 rounds, never 9 or 11
    _report(
        "gate thresholds: WER 0.051 fails and 0.049 passes at the 5% bound; "
        "permanent failure rejected after exactly 10 attempts"
    )


# ---------------------------------------------------------------------------
# Criterion 5: overlay SNR accuracy
# ---------------------------------------------------------------------------


def test_overlay_snr_within_tenth_db_on_100_pairs():
    rng = np.random.default_rng(55)
    kernel = np.ones(8) / 8.0
    checked_exact = 0
    for k in range(100):
        speech = np.convolve(rng.standard_normal(8000), kernel, mode="same")
        background = np.convolve(rng.standard_normal(8000), kernel, mode="same")
        speech = 0.5 * speech / np.max(np.abs(speech))
        background = 0.5 * background / np.max(np.abs(background))
        target = float(rng.uniform(5.0, 20.0))
        result = overlay_at_snr(
            Waveform(samples=speech, sample_rate=16000),
            Waveform(samples=background, sample_rate=16000),
            target,
        )
        assert result.mix.peak() <= 1.0 + 1e-12
        if result.peak_rescale is None:
            speech_rms = float(np.sqrt(np.mean(speech ** 2)))
            bg_rms = float(np.sqrt(np.mean((result.background_gain * background) ** 2)))
            measured = 20.0 * math.log10(speech_rms / bg_rms)
            assert abs(measured - target) <= 0.1
            checked_exact += 1
    assert checked_exact > 0
    _report(
        f"overlay SNR: measured within 0.1 dB of target on {checked_exact}/100 "
        "guard-inactive pairs; all outputs within [-1, 1]"
    )


# ---------------------------------------------------------------------------
# Criterion 6: blend sampler
# ---------------------------------------------------------------------------


def test_blend_sampler_million_draw_fraction_and_determinism():
    cfg = BlendConfig(alpha=0.2, seed=123, synthetic_pool=("s",), real_pool=("r",))
    state = BlendState.initialize(cfg)
    n = 1_000_000
    hits = sum(next_source(state) == "synthetic" for _ in range(n))
    fraction = hits / n
    assert 0.198 <= fraction <= 0.202

    zero = BlendState.initialize(
        BlendConfig(alpha=0.0, seed=5, synthetic_pool=(), real_pool=("r",))
    )
    assert all(next_source(zero) == "real" for _ in range(10_000))
    one = BlendState.initialize(
        BlendConfig(alpha=1.0, seed=5, synthetic_pool=("s",), real_pool=())
    )
    assert all(next_source(one) == "synthetic" for _ in range(10_000))

    replay_a = BlendState.initialize(cfg)
    replay_b = BlendState.initialize(cfg)
    seq_a = [next_source(replay_a) for _ in range(5000)]
    seq_b = [next_source(replay_b) for _ in range(5000)]
    assert seq_a == seq_b
    _report(
        f"blend sampler: alpha=0.2 fraction {fraction:.4f} in [0.198, 0.202] over 1e6 draws; "
        "alpha 0/1 exact; identical seed reproduces the identical sequence"
    )


# ---------------------------------------------------------------------------
# Criterion 7: metric oracle equivalence
# ---------------------------------------------------------------------------


def test_metrics_match_oracles():
    vocab = "the a cat dog sat ran blue sky tree bird".split()
    rng = np.random.default_rng(99)
    for _ in range(200):
        cand = [vocab[i] for i in rng.integers(0, len(vocab), size=rng.integers(1, 10))]
        ref = [vocab[i] for i in rng.integers(0, len(vocab), size=rng.integers(1, 10))]
        assert bleu([" ".join(cand)], [" ".join(ref)]) == pytest.approx(
            oracle_bleu([(cand, ref)]), abs=1e-9
        )
        assert rouge_l(" ".join(cand), " ".join(ref)) == pytest.approx(
            oracle_rouge_l(cand, ref), abs=1e-9
        )
    for n in range(1, 11):
        sentence = " ".join(f"word{k}" for k in range(n))
        assert meteor(sentence, sentence) == 1.0 - 0.5 * (1.0 / n) ** 3
    labels = "abcd"
    for _ in range(100):
        size = int(rng.integers(1, 40))
        pred = [labels[i] for i in rng.integers(0, 4, size=size)]
        gold = [labels[i] for i in rng.integers(0, 4, size=size)]
        assert weighted_f1(pred, gold) == pytest.approx(
            oracle_weighted_f1(pred, gold), abs=1e-12
        )
    _report(
        "metrics: BLEU and ROUGE-L match brute-force oracles to 1e-9 on 200 pairs; "
        "METEOR self-score equals 1 - 0.5*(1/n)^3 exactly; weighted F1 matches the "
        "confusion-matrix oracle on 100 labelings"
    )


# ---------------------------------------------------------------------------
# Criterion 8: end-to-end mock pipeline
# ---------------------------------------------------------------------------


def test_end_to_end_mock_pipeline_50_dialogues(tmp_path):
    args = [
        "forge", "run",
        "--subset", "emotion",
        "--size", "50",
        "--seed", "2025",
        "--n-history", "6,7",
    ]
    started = time.perf_counter()
    assert main(args + ["--out", str(tmp_path / "run-a")]) == 0
    elapsed = time.perf_counter() - started
    assert elapsed < 300.0, f"50-dialogue run took {elapsed:.1f}s"

    manifest_a = (tmp_path / "run-a" / "corpus.manifest.jsonl").read_bytes()
    entries = parse_manifest(manifest_a)
    assert len(entries) == 50
    assert all(e.verification.machine_verdict == "pass" for e in entries)

    assert main(args + ["--out", str(tmp_path / "run-b")]) == 0
    manifest_b = (tmp_path / "run-b" / "corpus.manifest.jsonl").read_bytes()
    assert manifest_a == manifest_b, "rerun with the same seed is not byte-identical"

    from dialoforge.pipeline import corpus_stats

    stats = corpus_stats(entries)
    configured_mean = (6 + 7) / 2 + 1  # n_history mean + response turn
    assert abs(stats.avg_turns - configured_mean) <= 0.5
    _report(
        f"end-to-end: 50 mock dialogues in {elapsed:.1f}s < 300s, 50 machine-pass "
        f"entries, byte-identical rerun, avg turns {stats.avg_turns:.2f} within 0.5 "
        f"of configured {configured_mean:.1f}"
    )


# ---------------------------------------------------------------------------
# Criterion 9: resampler spectral fidelity
# ---------------------------------------------------------------------------


def test_resampler_440hz_dominant_bin_within_two():
    t = np.arange(48000) / 48000.0
    tone = Waveform(samples=0.5 * np.sin(2 * np.pi * 440.0 * t), sample_rate=48000)
    out = resample_16k(tone)
    assert out.sample_rate == 16000
    spectrum = np.abs(np.fft.rfft(out.samples[:4096] * np.hanning(4096)))
    dominant = int(np.argmax(spectrum))
    expected = 440.0 * 4096 / 16000.0
    assert abs(dominant - expected) <= 2.0
    _report(
        f"resampler: 48 kHz -> 16 kHz, 440 Hz dominant bin {dominant} within "
        f"+-2 of {expected:.2f} under a 4096-point transform"
    )
