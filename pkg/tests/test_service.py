from __future__ import annotations

import wave as wave_mod
from io import BytesIO
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from dialoforge import audio_io
from dialoforge.schema import Waveform, parse_manifest, serialize_manifest
from dialoforge.service import create_app

from .conftest import minimal_entry


@pytest.fixture
def corpus(tmp_path: Path) -> Path:
    entries = [minimal_entry(f"emotion-{k:06d}") for k in range(3)]
    root = tmp_path / "corpus"
    root.mkdir()
    manifest = root / "corpus.manifest.jsonl"
    manifest.write_bytes(serialize_manifest(entries))
    rng = np.random.default_rng(0)
    for entry in entries:
        audio_io.write_wav(
            root / entry.mixed_track_path,
            Waveform(samples=0.2 * rng.standard_normal(1600), sample_rate=16000),
        )
    return manifest


def test_pending_lists_three(corpus):
    client = TestClient(create_app(corpus))
    body = client.get("/api/review/pending").json()
    assert [row["entry_id"] for row in body] == [
        "emotion-000000",
        "emotion-000001",
        "emotion-000002",
    ]


def test_approve_then_pending_shrinks(corpus):
    client = TestClient(create_app(corpus))
    resp = client.post(
        "/api/review/emotion-000000/verdict",
        json={"verdict": "approved", "reviewer": "rev1"},
    )
    assert resp.status_code == 200
    assert resp.json()["verification"]["human_verdict"] == "approved"
    assert len(client.get("/api/review/pending").json()) == 2
    # verdict visible on disk
    entries = parse_manifest(corpus.read_bytes())
    assert entries[0].verification.human_verdict == "approved"


def test_dialogue_detail(corpus):
    client = TestClient(create_app(corpus))
    body = client.get("/api/dialogue/emotion-000001").json()
    assert body["id"] == "emotion-000001"
    assert body["subset"] == "emotion"
    assert len(body["turns"]) == 2
    assert body["turns"][0]["role"] == "human"
    assert body["turns"][0]["style"]["emotion"] == "happy"
    assert body["gate"]["machine_verdict"] == "pass"
    assert body["audio_url"] == "/api/audio/emotion-000001"


def test_dialogue_not_found(corpus):
    client = TestClient(create_app(corpus))
    resp = client.get("/api/dialogue/nope")
    assert resp.status_code == 404
    assert resp.json() == {"code": "not_found", "message": "no entry 'nope'"}


def test_audio_served_as_wav(corpus):
    client = TestClient(create_app(corpus))
    resp = client.get("/api/audio/emotion-000000")
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "audio/wav"
    assert int(resp.headers["content-length"]) == len(resp.content)
    with wave_mod.open(BytesIO(resp.content), "rb") as fh:
        assert fh.getframerate() == 16000
        assert fh.getnchannels() == 1


def test_second_verdict_conflicts(corpus):
    client = TestClient(create_app(corpus))
    client.post(
        "/api/review/emotion-000000/verdict",
        json={"verdict": "approved", "reviewer": "rev1"},
    )
    resp = client.post(
        "/api/review/emotion-000000/verdict",
        json={"verdict": "rejected", "reason": "late", "reviewer": "rev2"},
    )
    assert resp.status_code == 409
    assert resp.json()["code"] == "already_decided"


def test_reject_requires_reason(corpus):
    client = TestClient(create_app(corpus))
    resp = client.post(
        "/api/review/emotion-000000/verdict",
        json={"verdict": "rejected", "reviewer": "rev1"},
    )
    assert resp.status_code == 400
    assert resp.json()["code"] == "missing_reason"


def test_bad_verdict_value(corpus):
    client = TestClient(create_app(corpus))
    resp = client.post(
        "/api/review/emotion-000000/verdict",
        json={"verdict": "maybe", "reviewer": "rev1"},
    )
    assert resp.status_code == 400
    assert resp.json()["code"] == "bad_verdict"


def test_finalized_only_blocks_rejected_audio(corpus):
    app = create_app(corpus, finalized_only=True)
    client = TestClient(app)
    client.post(
        "/api/review/emotion-000002/verdict",
        json={"verdict": "rejected", "reason": "unnatural reply", "reviewer": "rev1"},
    )
    resp = client.get("/api/audio/emotion-000002")
    assert resp.status_code == 403
    assert resp.json()["code"] == "rejected"
    # non-rejected entries still served
    assert client.get("/api/audio/emotion-000000").status_code == 200


def test_stats_endpoint(corpus):
    client = TestClient(create_app(corpus))
    body = client.get("/api/stats").json()
    assert body["dialogue_count"] == 3
    assert body["machine_pass"] == 3
    assert body["avg_turns"] == 2.0


def test_verdicts_visible_to_subsequent_reads(corpus):
    client = TestClient(create_app(corpus))
    client.post(
        "/api/review/emotion-000001/verdict",
        json={"verdict": "approved", "reviewer": "rev1"},
    )
    detail = client.get("/api/dialogue/emotion-000001").json()
    assert detail["gate"]["human_verdict"] == "approved"
    assert client.get("/api/stats").json()["human_approved"] == 1
