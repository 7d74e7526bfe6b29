"""Reader-study backend: serves real/simulated slices to human raters,
records forced-choice responses, and computes accuracy statistics.

Sessions persist as one immutable header file plus an append-only JSONL
response log, so stats can always be recomputed from the raw log. Rater
endpoints never see the hidden truth labels.
"""

from __future__ import annotations

import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from . import evalkit
from .dataset import ScanSlice, read_slice

CHOICES = ("real", "simulated")


class CreateBody(BaseModel):
    n_each: int = 15
    seed: int = 0


class ResponseBody(BaseModel):
    rater_id: str
    item_id: str
    choice: str


class StudyError(Exception):
    code = "invalid"
    status = 400


class StudyNotFound(StudyError):
    code = "not_found"
    status = 404


class DuplicateResponse(StudyError):
    code = "conflict"
    status = 409


class SessionFinalized(StudyError):
    code = "finalized"
    status = 409


class StatsIncomplete(StudyError):
    code = "incomplete"
    status = 409


class AdminRequired(StudyError):
    code = "forbidden"
    status = 403


@dataclass
class StudyItem:
    item_id: str
    dataset_root: str
    slice_id: str
    truth: str  # real | simulated

    def rater_view(self) -> dict:
        # Truth never leaves the server before finalization.
        return {"item_id": self.item_id, "image_url": f"/items/{self.item_id}/image.png"}


@dataclass
class StudySession:
    session_id: str
    items: list[StudyItem]
    n_each: int
    seed: int
    created_at: float
    status: str = "open"  # open | finalized
    responses: list[dict] = field(default_factory=list)

    @property
    def n_items(self) -> int:
        return len(self.items)

    def raters(self) -> list[str]:
        return sorted({r["rater_id"] for r in self.responses})

    def answered_by(self, rater_id: str) -> set[str]:
        return {r["item_id"] for r in self.responses if r["rater_id"] == rater_id}

    def header_dict(self) -> dict:
        return {
            "session_id": self.session_id,
            "n_each": self.n_each,
            "seed": self.seed,
            "created_at": self.created_at,
            "items": [
                {
                    "item_id": it.item_id,
                    "dataset_root": it.dataset_root,
                    "slice_id": it.slice_id,
                    "truth": it.truth,
                }
                for it in self.items
            ],
        }


def create_study(
    real_pool: list[tuple[str, str]],
    simulated_pool: list[tuple[str, str]],
    n_each: int = 15,
    seed: int = 0,
    session_id: str | None = None,
) -> StudySession:
    """Compose a session of n_each real plus n_each simulated items in
    seeded-random order."""
    if n_each < 1:
        raise StudyError(f"n_each must be positive, got {n_each}")
    if len(real_pool) < n_each:
        raise StudyError(f"real pool too small: {len(real_pool)} < {n_each}")
    if len(simulated_pool) < n_each:
        raise StudyError(f"simulated pool too small: {len(simulated_pool)} < {n_each}")
    rng = np.random.default_rng(seed)
    picked_real = [real_pool[int(i)] for i in rng.choice(len(real_pool), n_each, replace=False)]
    picked_sim = [
        simulated_pool[int(i)] for i in rng.choice(len(simulated_pool), n_each, replace=False)
    ]
    sid = session_id or f"study-{uuid.uuid4().hex[:10]}"
    refs = [(r, "real") for r in picked_real] + [(s, "simulated") for s in picked_sim]
    order = rng.permutation(len(refs))
    items = [
        StudyItem(
            item_id=f"{sid}.{pos:03d}",
            dataset_root=str(refs[int(i)][0][0]),
            slice_id=refs[int(i)][0][1],
            truth=refs[int(i)][1],
        )
        for pos, i in enumerate(order)
    ]
    return StudySession(
        session_id=sid, items=items, n_each=n_each, seed=seed, created_at=time.time()
    )


def compute_stats(session: StudySession, partial: bool = False) -> dict:
    """Per-rater and consensus accuracy with exact binomial p-values.

    Requires every rater to have answered every item unless ``partial``.
    Consensus (per-item majority vote) needs an odd rater count and complete
    responses; otherwise it is omitted with a notice.
    """
    truth = {it.item_id: it.truth for it in session.items}
    raters = session.raters()
    complete = bool(raters) and all(
        len(session.answered_by(r)) == session.n_items for r in raters
    )
    if not complete and not partial:
        raise StatsIncomplete(
            "stats need every rater to answer every item; pass partial=true for interim numbers"
        )

    by_rater: dict[str, dict[str, str]] = {r: {} for r in raters}
    for resp in session.responses:
        by_rater[resp["rater_id"]][resp["item_id"]] = resp["choice"]

    rater_rows = []
    for r in raters:
        answers = by_rater[r]
        n = len(answers)
        k = sum(1 for item_id, choice in answers.items() if choice == truth[item_id])
        rater_rows.append(
            {
                "rater_id": r,
                "n_answered": n,
                "n_correct": k,
                "accuracy": k / n if n else 0.0,
                "accuracy_pct": round(100.0 * k / n) if n else 0,
                "p_value": evalkit.binomial_p(k, n),
            }
        )

    consensus = None
    consensus_notice = None
    per_item = []
    if not complete:
        consensus_notice = "consensus omitted: responses incomplete"
    elif len(raters) % 2 == 0:
        consensus_notice = "consensus omitted: even rater count"
    else:
        k = 0
        for it in session.items:
            votes = [by_rater[r][it.item_id] for r in raters]
            majority = max(CHOICES, key=votes.count)
            correct = majority == truth[it.item_id]
            k += int(correct)
            per_item.append(
                {
                    "item_id": it.item_id,
                    "votes": {c: votes.count(c) for c in CHOICES},
                    "majority": majority,
                    "truth": it.truth,
                    "correct": correct,
                }
            )
        n = session.n_items
        consensus = {
            "n_correct": k,
            "accuracy": k / n,
            "accuracy_pct": round(100.0 * k / n),
            "p_value": evalkit.binomial_p(k, n),
        }

    return {
        "session_id": session.session_id,
        "n_items": session.n_items,
        "complete": complete,
        "finalized": session.status == "finalized",
        "raters": rater_rows,
        "consensus": consensus,
        "consensus_notice": consensus_notice,
        "per_item_majority": per_item,
    }


class StudyStore:
    """Durable session storage: header.json + responses.jsonl per session."""

    def __init__(self, sessions_dir: Path):
        self.sessions_dir = Path(sessions_dir)
        self.sessions_dir.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock(self, session_id: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(session_id, threading.Lock())

    def _dir(self, session_id: str) -> Path:
        return self.sessions_dir / session_id

    def save_new(self, session: StudySession) -> None:
        d = self._dir(session.session_id)
        d.mkdir(parents=True, exist_ok=False)
        (d / "header.json").write_text(json.dumps(session.header_dict(), indent=2) + "\n")
        (d / "responses.jsonl").touch()
        (d / "status").write_text("open\n")

    def list_sessions(self) -> list[str]:
        return sorted(p.name for p in self.sessions_dir.iterdir() if (p / "header.json").exists())

    def load(self, session_id: str) -> StudySession:
        d = self._dir(session_id)
        header_path = d / "header.json"
        if not header_path.exists():
            raise StudyNotFound(f"unknown session {session_id!r}")
        header = json.loads(header_path.read_text())
        items = [StudyItem(**it) for it in header["items"]]
        responses = []
        for line in (d / "responses.jsonl").read_text().splitlines():
            if line.strip():
                responses.append(json.loads(line))
        status = "open"
        status_path = d / "status"
        if status_path.exists():
            status = status_path.read_text().strip() or "open"
        return StudySession(
            session_id=header["session_id"],
            items=items,
            n_each=header["n_each"],
            seed=header["seed"],
            created_at=header["created_at"],
            status=status,
            responses=responses,
        )

    def record_response(self, session_id: str, rater_id: str, item_id: str, choice: str) -> dict:
        """Append one response durably; duplicates and finalized sessions are rejected."""
        if choice not in CHOICES:
            raise StudyError(f"choice must be one of {CHOICES}, got {choice!r}")
        if not rater_id:
            raise StudyError("rater_id must be nonempty")
        with self._lock(session_id):
            session = self.load(session_id)
            if session.status == "finalized":
                raise SessionFinalized(f"session {session_id} is finalized")
            if item_id not in {it.item_id for it in session.items}:
                raise StudyNotFound(f"unknown item {item_id!r}")
            if item_id in session.answered_by(rater_id):
                raise DuplicateResponse(
                    f"rater {rater_id!r} already answered item {item_id!r}"
                )
            record = {
                "rater_id": rater_id,
                "item_id": item_id,
                "choice": choice,
                "timestamp": time.time(),
            }
            with open(self._dir(session_id) / "responses.jsonl", "a") as f:
                f.write(json.dumps(record) + "\n")
                f.flush()
            return record

    def next_item(self, session_id: str, rater_id: str) -> dict:
        """The rater's next unanswered item plus progress, truth-free."""
        if not rater_id:
            raise StudyError("rater query parameter must be nonempty")
        session = self.load(session_id)
        answered = session.answered_by(rater_id)
        progress = {"answered": len(answered), "total": session.n_items}
        for it in session.items:
            if it.item_id not in answered:
                return {"done": False, **it.rater_view(), **progress}
        return {"done": True, **progress}

    def finalize(self, session_id: str) -> dict:
        with self._lock(session_id):
            session = self.load(session_id)
            (self._dir(session_id) / "status").write_text("finalized\n")
            return {"session_id": session_id, "status": "finalized"}

    def stats(self, session_id: str, partial: bool = False) -> dict:
        return compute_stats(self.load(session_id), partial=partial)

    def resolve_item(self, item_id: str) -> StudyItem:
        session_id = item_id.rsplit(".", 1)[0]
        session = self.load(session_id)
        for it in session.items:
            if it.item_id == item_id:
                return it
        raise StudyNotFound(f"unknown item {item_id!r}")


def render_png(slice: ScanSlice) -> bytes:
    """8-bit PNG with per-slice window/level from the 16-bit source."""
    from PIL import Image

    img = slice.image.astype(np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        view = np.zeros(img.shape, dtype=np.uint8)
    else:
        view = np.clip(np.rint((img - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(view, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def create_app(
    store: StudyStore,
    real_pool: list[tuple[str, str]],
    simulated_pool: list[tuple[str, str]],
    admin_token: str,
    static_dir: Path | None = None,
):
    """Build the HTTP app. Rater endpoints carry no truth; stats and
    finalization require the admin token header."""
    from fastapi import FastAPI, Header, Query, Request
    from fastapi.responses import JSONResponse, Response

    app = FastAPI(title="scar reader study")

    @app.exception_handler(StudyError)
    async def study_error_handler(request: Request, exc: StudyError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": str(exc)})

    def require_admin(token: str | None) -> None:
        if token != admin_token:
            raise AdminRequired("admin token required")

    @app.post("/studies")
    def create(body: CreateBody):
        session = create_study(real_pool, simulated_pool, n_each=body.n_each, seed=body.seed)
        store.save_new(session)
        return {"session_id": session.session_id, "n_items": session.n_items}

    @app.get("/studies/{session_id}/next")
    def next_item(session_id: str, rater: str = Query(...)):
        return store.next_item(session_id, rater)

    @app.post("/studies/{session_id}/responses")
    def respond(session_id: str, body: ResponseBody):
        record = store.record_response(session_id, body.rater_id, body.item_id, body.choice)
        return {"accepted": True, "item_id": record["item_id"]}

    @app.get("/items/{item_id}/image.png")
    def item_image(item_id: str):
        item = store.resolve_item(item_id)
        slice = read_slice(Path(item.dataset_root) / "slices", item.slice_id)
        return Response(content=render_png(slice), media_type="image/png")

    @app.post("/studies/{session_id}/finalize")
    def finalize(session_id: str, x_admin_token: str | None = Header(default=None)):
        require_admin(x_admin_token)
        return store.finalize(session_id)

    @app.get("/studies/{session_id}/stats")
    def stats(
        session_id: str,
        partial: bool = False,
        x_admin_token: str | None = Header(default=None),
    ):
        require_admin(x_admin_token)
        return store.stats(session_id, partial=partial)

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/app", StaticFiles(directory=str(static_dir), html=True), name="app")

    return app


def pool_from_dataset(root: Path, has_scar: bool | None = None, provenance: str | None = None):
    """List (root, slice_id) refs from a dataset manifest, with filters."""
    from .dataset import read_manifest

    manifest = read_manifest(root)
    pool = []
    for e in manifest["slices"]:
        if has_scar is not None and e["has_scar"] != has_scar:
            continue
        if provenance is not None and e.get("provenance", "real") != provenance:
            continue
        pool.append((str(root), e["slice_id"]))
    return pool
