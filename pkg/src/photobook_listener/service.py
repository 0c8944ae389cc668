"""Live game-session service.

Manages rounds in progress over an HTTP API: a session is created with 6
context images and 3 highlighted targets, utterances stream in from the human
or the partner, and every post returns the listener's updated 3-way beliefs.
Marks are recorded with their dialogue position; closing requires all 3
targets marked and yields a score report. Sessions are journaled to
append-only log files; there is no persistence beyond that and no auth.
"""

from __future__ import annotations

import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .features import scorer_from_spec, image_features_from_spec
from .gamedata import ImageRef, Mark
from .listener import ListenerSession, SessionError, load_checkpoint
from .textalign import tokenizer_from_spec

UNIFORM_BELIEF = [1 / 3, 1 / 3, 1 / 3]


@dataclass
class ListenerBundle:
    """A loaded checkpoint plus the handles its inputs were produced with."""

    model: object
    tokenizer: object
    scorer: object
    image_features: object

    @classmethod
    def load(cls, path) -> "ListenerBundle":
        model, kind, extra = load_checkpoint(path)
        if kind != "listener":
            raise ValueError(f"service needs a listener checkpoint, got {kind}")
        return cls(
            model=model,
            tokenizer=tokenizer_from_spec(extra["tokenizer"]),
            scorer=scorer_from_spec(extra["scorer"]),
            image_features=image_features_from_spec(extra["image_features"]))


class ImagePayload(BaseModel):
    id: str
    uri: str = ""


class CreateSessionRequest(BaseModel):
    images: list[ImagePayload]
    target_indices: list[int]
    checkpoint_id: str
    theme: list[str] = Field(default_factory=lambda: ["unknown", "unknown"])
    gold_labels: dict[int, str] | None = None  # target index -> common/different


class UtteranceRequest(BaseModel):
    speaker: str  # "human" (perspective owner) or "partner"
    text: str


class MarkRequest(BaseModel):
    target_index: int
    mark: str  # common / different


@dataclass
class MarkRecord:
    mark: str
    position: int  # utterances preceding the action
    belief_at_mark: list[float]


@dataclass
class SessionRecord:
    session_id: str
    listener: ListenerSession
    images: tuple[ImageRef, ...]
    target_indices: tuple[int, ...]
    gold_labels: dict[int, str] | None
    status: str = "open"
    seq: int = 0
    dialogue: list[dict] = field(default_factory=list)
    marks: dict[int, MarkRecord] = field(default_factory=dict)
    beliefs: dict[int, list[float]] = field(default_factory=dict)
    report: dict | None = None
    lock: threading.Lock = field(default_factory=threading.Lock)

    def belief_payload(self) -> list[dict]:
        return [{"target_index": j, "probs": self.beliefs[j]}
                for j in self.target_indices]


class SessionRegistry:
    """In-process session store; per-session operations are serialized by a
    session lock while model weights are shared read-only."""

    def __init__(self, bundles: dict[str, ListenerBundle],
                 journal_dir: str | None = None):
        self.bundles = bundles
        self.journal_dir = journal_dir
        if journal_dir:
            os.makedirs(journal_dir, exist_ok=True)
        self.sessions: dict[str, SessionRecord] = {}
        self._registry_lock = threading.Lock()

    def journal(self, session_id: str, event: dict) -> None:
        if not self.journal_dir:
            return
        path = os.path.join(self.journal_dir, f"{session_id}.jsonl")
        with open(path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({"ts": time.time(), **event}) + "\n")

    def create(self, req: CreateSessionRequest) -> SessionRecord:
        bundle = self.bundles.get(req.checkpoint_id)
        if bundle is None:
            raise HTTPException(404, f"unknown checkpoint {req.checkpoint_id!r}")
        if len(req.images) != 6:
            raise HTTPException(400, f"expected 6 images, got {len(req.images)}")
        if len(set(req.target_indices)) != 3 or \
                any(not 0 <= i < 6 for i in req.target_indices):
            raise HTTPException(400, f"bad target indices {req.target_indices}")
        theme = (req.theme[0], req.theme[1]) if len(req.theme) == 2 else \
            ("unknown", "unknown")
        images = tuple(ImageRef(image_id=im.id, theme=theme, uri=im.uri)
                       for im in req.images)
        if req.gold_labels is not None:
            bad = [v for v in req.gold_labels.values()
                   if v not in ("common", "different")]
            if bad or set(req.gold_labels) != set(req.target_indices):
                raise HTTPException(400, "gold_labels must label each target "
                                         "common or different")
        try:
            listener_session = ListenerSession(
                model=bundle.model, tokenizer=bundle.tokenizer,
                scorer=bundle.scorer, images=images,
                target_indices=req.target_indices,
                image_feats=bundle.image_features.image_features(images))
        except SessionError as exc:
            raise HTTPException(400, str(exc))
        record = SessionRecord(
            session_id=uuid.uuid4().hex,
            listener=listener_session,
            images=images,
            target_indices=tuple(req.target_indices),
            gold_labels=dict(req.gold_labels) if req.gold_labels else None,
            beliefs={j: list(UNIFORM_BELIEF) for j in req.target_indices})
        with self._registry_lock:
            self.sessions[record.session_id] = record
        self.journal(record.session_id, {
            "event": "create", "images": [im.image_id for im in images],
            "targets": list(record.target_indices),
            "checkpoint": req.checkpoint_id})
        return record

    def get(self, session_id: str) -> SessionRecord:
        record = self.sessions.get(session_id)
        if record is None:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return record


def session_state(record: SessionRecord) -> dict:
    return {
        "session_id": record.session_id,
        "status": record.status,
        "seq": record.seq,
        "images": [{"id": im.image_id, "uri": im.uri} for im in record.images],
        "target_indices": list(record.target_indices),
        "dialogue": record.dialogue,
        "marks": {str(j): {"mark": m.mark, "position": m.position}
                  for j, m in record.marks.items()},
        "beliefs": record.belief_payload(),
        "report": record.report,
    }


def build_report(record: SessionRecord) -> dict:
    targets = []
    for j in record.target_indices:
        belief = record.beliefs[j]
        prediction = ("undecided", "common", "different")[
            int(np.argmax(belief))]
        mark = record.marks[j]
        entry = {
            "target_index": j,
            "human_mark": mark.mark,
            "mark_position": mark.position,
            "belief_at_mark": mark.belief_at_mark,
            "belief_at_close": belief,
            "model_prediction": prediction,
        }
        if record.gold_labels is not None:
            gold = record.gold_labels[j]
            entry["gold"] = gold
            entry["model_correct"] = prediction == gold
            entry["human_correct"] = mark.mark == gold
        targets.append(entry)
    report = {"session_id": record.session_id, "targets": targets,
              "utterance_count": len(record.dialogue)}
    if record.gold_labels is not None:
        report["model_all_correct"] = all(t["model_correct"] for t in targets)
        report["human_all_correct"] = all(t["human_correct"] for t in targets)
    return report


def create_app(registry: SessionRegistry, image_dir: str | None = None
               ) -> FastAPI:
    app = FastAPI(title="photobook-listener service")
    app.state.registry = registry

    if image_dir:
        from fastapi.staticfiles import StaticFiles
        app.mount("/images", StaticFiles(directory=image_dir), name="images")

    @app.post("/sessions", status_code=201)
    def create_session(req: CreateSessionRequest):
        record = registry.create(req)
        return {"session_id": record.session_id, "status": record.status,
                "seq": record.seq, "beliefs": record.belief_payload()}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return session_state(registry.get(session_id))

    @app.get("/sessions/{session_id}/beliefs")
    def poll_beliefs(session_id: str, since: int = -1):
        record = registry.get(session_id)
        return {"seq": record.seq, "status": record.status,
                "changed": record.seq > since,
                "beliefs": record.belief_payload()}

    @app.post("/sessions/{session_id}/utterances")
    def post_utterance(session_id: str, req: UtteranceRequest):
        record = registry.get(session_id)
        with record.lock:
            if record.status != "open":
                raise HTTPException(409, "session is closed")
            if req.speaker not in ("human", "partner"):
                raise HTTPException(400, f"unknown speaker {req.speaker!r}")
            if not req.text or not req.text.strip():
                raise HTTPException(400, "empty utterance text")
            try:
                result = record.listener.step(req.text,
                                              is_self=req.speaker == "human")
            except SessionError as exc:
                raise HTTPException(400, str(exc))
            record.dialogue.append({"speaker": req.speaker, "text": req.text})
            record.beliefs = {j: probs for j, probs in result["latest"].items()}
            record.seq += 1
            registry.journal(session_id, {
                "event": "utterance", "speaker": req.speaker,
                "text": req.text, "seq": record.seq})
            return {"seq": record.seq, "beliefs": record.belief_payload(),
                    "token_count": result["token_count"]}

    @app.post("/sessions/{session_id}/marks")
    def post_mark(session_id: str, req: MarkRequest):
        record = registry.get(session_id)
        with record.lock:
            if record.status != "open":
                raise HTTPException(409, "session is closed")
            if req.target_index not in record.target_indices:
                raise HTTPException(400,
                                    f"{req.target_index} is not a target")
            if req.mark not in ("common", "different"):
                raise HTTPException(400, f"bad mark {req.mark!r}")
            if req.target_index in record.marks:
                raise HTTPException(409,
                                    f"target {req.target_index} already marked")
            record.marks[req.target_index] = MarkRecord(
                mark=req.mark, position=len(record.dialogue),
                belief_at_mark=list(record.beliefs[req.target_index]))
            record.seq += 1
            registry.journal(session_id, {
                "event": "mark", "target_index": req.target_index,
                "mark": req.mark, "position": len(record.dialogue)})
            return {"ok": True,
                    "marks": {str(j): m.mark for j, m in record.marks.items()}}

    @app.post("/sessions/{session_id}/close")
    def close_session(session_id: str):
        record = registry.get(session_id)
        with record.lock:
            if record.status != "open":
                raise HTTPException(409, "session already closed")
            missing = [j for j in record.target_indices
                       if j not in record.marks]
            if missing:
                raise HTTPException(409, f"targets not yet marked: {missing}")
            record.report = build_report(record)
            record.status = "closed"
            record.seq += 1
            registry.journal(session_id, {"event": "close",
                                          "report": record.report})
            return record.report

    return app


def serve(checkpoint_path, host: str = "127.0.0.1", port: int = 8000,
          journal_dir: str | None = None, image_dir: str | None = None,
          checkpoint_id: str = "default"):
    import uvicorn

    bundle = ListenerBundle.load(checkpoint_path)
    registry = SessionRegistry({checkpoint_id: bundle}, journal_dir)
    app = create_app(registry, image_dir)
    uvicorn.run(app, host=host, port=port)
