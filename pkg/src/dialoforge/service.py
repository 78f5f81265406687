"""HTTP API over a crafted corpus, serving the manual-review stage.

Endpoints (JSON bodies; errors are ``{"code", "message"}`` with matching
HTTP status codes):

    GET  /api/review/pending            queue of machine-pass, human-pending
    GET  /api/dialogue/{id}             script, transcripts, styles, gate data
    GET  /api/audio/{id}                mixed track as audio/wav
    POST /api/review/{id}/verdict       {"verdict", "reason"?, "reviewer"}
    GET  /api/stats                     corpus statistics

Verdict writes are atomic compare-and-set on ``human_verdict``; a second
verdict for the same entry answers 409.
"""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse, JSONResponse
from fastapi.staticfiles import StaticFiles

from .errors import StateError
from .pipeline import ManifestStore
from .schema import ManifestEntry


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        self.status = status
        self.code = code
        self.message = message


def _dialogue_detail(entry: ManifestEntry) -> dict:
    return {
        "id": entry.id,
        "subset": entry.script.subset.value,
        "stage": entry.stage.value,
        "seed": entry.script.seed.to_json_dict(),
        "turns": [
            {
                "turn_index": u.turn_index,
                "role": entry.script.turns[u.turn_index].role.value,
                "transcript": u.transcript,
                "style": u.style.to_json_dict(),
                "duration_s": u.duration_s,
                "wer": entry.verification.per_utterance_wer[u.turn_index],
            }
            for u in entry.utterances
        ],
        "gate": entry.verification.to_json_dict(),
        "mix_plan": entry.mix_plan.to_json_dict() if entry.mix_plan else None,
        "track_duration_s": entry.track_duration_s,
        "audio_url": f"/api/audio/{entry.id}",
    }


def create_app(
    manifest_path: str | Path,
    finalized_only: bool = False,
    ui_dir: Optional[str | Path] = None,
) -> FastAPI:
    store = ManifestStore(manifest_path)
    app = FastAPI(title="dialoforge review service")
    app.state.store = store
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status, content={"code": exc.code, "message": exc.message}
        )

    def lookup(entry_id: str) -> ManifestEntry:
        entry = store.get(entry_id)
        if entry is None:
            raise ApiError(404, "not_found", f"no entry {entry_id!r}")
        return entry

    @app.get("/api/review/pending")
    def pending():
        return [asdict(s) for s in store.pending()]

    @app.get("/api/dialogue/{entry_id}")
    def dialogue(entry_id: str):
        return _dialogue_detail(lookup(entry_id))

    @app.get("/api/audio/{entry_id}")
    def audio(entry_id: str):
        entry = lookup(entry_id)
        if finalized_only and entry.verification.human_verdict == "rejected":
            raise ApiError(403, "rejected", f"entry {entry_id!r} was rejected in review")
        path = store.root / entry.mixed_track_path
        if not path.exists():
            raise ApiError(404, "audio_missing", f"no audio file for {entry_id!r}")
        return FileResponse(path, media_type="audio/wav")

    @app.post("/api/review/{entry_id}/verdict")
    async def verdict(entry_id: str, request: Request):
        try:
            body = await request.json()
        except Exception:
            raise ApiError(400, "bad_request", "body must be JSON")
        verdict_value = body.get("verdict")
        if verdict_value not in ("approved", "rejected"):
            raise ApiError(400, "bad_verdict", "verdict must be 'approved' or 'rejected'")
        reviewer = (body.get("reviewer") or "").strip()
        if not reviewer:
            raise ApiError(400, "missing_reviewer", "reviewer must be named")
        reason = body.get("reason")
        if verdict_value == "rejected" and not (reason or "").strip():
            raise ApiError(400, "missing_reason", "rejection requires a reason")
        lookup(entry_id)
        try:
            record = store.apply_verdict(entry_id, verdict_value, reviewer, reason)
        except StateError as exc:
            if "already_decided" in str(exc):
                raise ApiError(409, "already_decided", str(exc))
            raise ApiError(400, "state_error", str(exc))
        return {"id": entry_id, "verification": record.to_json_dict()}

    @app.get("/api/stats")
    def stats():
        return store.stats().to_json_dict()

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app


def serve_api(
    manifest_path: str | Path,
    host: str = "127.0.0.1",
    port: int = 8321,
    finalized_only: bool = False,
    ui_dir: Optional[str | Path] = None,
) -> None:
    """Run the review service until interrupted."""
    import uvicorn

    app = create_app(manifest_path, finalized_only=finalized_only, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="warning")
