"""HTTP review service for engineer-in-the-loop sessions.

Read endpoints serve artifact snapshots straight from the store; decision
POSTs serialize through a per-session lock, so of two conflicting decisions
the first wins and the loser gets a 409 with the server's current stage.
"""

from __future__ import annotations

from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import session as sessions
from .errors import InvalidDecision, MissingDecision, UnknownSession
from .models import ModelCatalog, builtin_catalog
from .session import SessionStore, session_to_json


class DecisionBody(BaseModel):
    stage: str
    choice: str
    note: str = ""


class AdvanceBody(BaseModel):
    decision: Optional[str] = None
    note: str = ""


def make_app(store: SessionStore, catalog: Optional[ModelCatalog] = None,
             jobs: int = 1) -> FastAPI:
    catalog = catalog or builtin_catalog()
    app = FastAPI(title="modeldisc review service")

    def get_session(session_id: str) -> sessions.Session:
        try:
            return store.load(session_id)
        except UnknownSession:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")

    def artifact(session_id: str, key: str):
        doc = session_to_json(get_session(session_id))
        value = doc.get(key)
        if value is None or value == []:
            raise HTTPException(status_code=404, detail=f"{key} not ready")
        return value

    @app.get("/sessions")
    def list_sessions():
        return store.summaries()

    @app.get("/sessions/{session_id}")
    def show_session(session_id: str):
        return session_to_json(get_session(session_id))

    @app.get("/sessions/{session_id}/experiments")
    def experiments(session_id: str):
        return artifact(session_id, "experiments")

    @app.get("/sessions/{session_id}/mask-report")
    def mask_report(session_id: str):
        return artifact(session_id, "mask_report")

    @app.get("/sessions/{session_id}/sensitivity")
    def sensitivity(session_id: str):
        return artifact(session_id, "sensitivity")

    @app.get("/sessions/{session_id}/pareto")
    def pareto(session_id: str):
        doc = session_to_json(get_session(session_id))
        if doc.get("pareto") is None:
            raise HTTPException(status_code=404, detail="pareto not ready")
        return {"targets": doc["progress"].get("pareto_targets"),
                "fronts": doc["pareto"]}

    @app.post("/sessions/{session_id}/decisions")
    def post_decision(session_id: str, body: DecisionBody):
        with store.lock(session_id):
            s = get_session(session_id)
            if body.stage != s.stage:
                raise HTTPException(
                    status_code=409,
                    detail={"message": "stage conflict", "stage": s.stage})
            try:
                s = sessions.advance(s, store, decision=body.choice, note=body.note,
                                     catalog=catalog, jobs=jobs)
            except (InvalidDecision, MissingDecision) as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            return {"stage": s.stage}

    @app.post("/sessions/{session_id}/advance")
    def post_advance(session_id: str, body: AdvanceBody | None = None):
        body = body or AdvanceBody()
        with store.lock(session_id):
            s = get_session(session_id)
            try:
                s = sessions.advance(s, store, decision=body.decision, note=body.note,
                                     catalog=catalog, jobs=jobs)
            except MissingDecision as exc:
                raise HTTPException(status_code=400, detail=str(exc))
            except InvalidDecision as exc:
                raise HTTPException(status_code=409, detail=str(exc))
            return {"stage": s.stage}

    return app


def serve(store_dir: str, bind: str = "127.0.0.1:8731",
          catalog: Optional[ModelCatalog] = None, jobs: int = 1) -> None:
    """Run the review service until interrupted."""
    import uvicorn

    host, _, port = bind.partition(":")
    app = make_app(SessionStore(store_dir), catalog=catalog, jobs=jobs)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8731),
                log_level="warning")
