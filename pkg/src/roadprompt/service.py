"""Session-based inference service: the three-stage interactive flow over
HTTP+JSON for the browser UI and scripted clients.

Each session encodes its image exactly once; refine/undo calls re-decode from
the cached embedding with the accumulated prompt history, so replaying the
history always reproduces the current masks bit-exactly. Coordinates on the
wire are [row, col] integers; masks travel as base64 PNG (0/255, single
channel).
"""

from __future__ import annotations

import base64
import io
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, UploadFile
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response
from PIL import Image
from pydantic import BaseModel, Field

from .grid import NEGATIVE, POSITIVE, PatchGrid, PointPrompt, patch_of, patch_pixels
from .model import ImageEmbedding, PromptableRoadModel
from .pipeline import STRATEGIES, StageResult, run_stages

DEFAULT_SESSION_TIMEOUT = 30 * 60.0
MAX_IMAGE_SIDE = 4096

MASK_NAMES = ("auto", "highrecall", "stage2", "stage3", "final")


class RefineRequest(BaseModel):
    positives: list[tuple[int, int]] = Field(default_factory=list)
    negatives: list[tuple[int, int]] = Field(default_factory=list)
    strategy: str = "sum"
    reset: bool = False


@dataclass
class Session:
    id: str
    embedding: ImageEmbedding
    grid: PatchGrid
    history: list[dict] = field(default_factory=list)
    strategy: str = "sum"
    result: StageResult | None = None
    last_access: float = field(default_factory=time.monotonic)

    def accumulated(self) -> tuple[list[PointPrompt], list[PointPrompt]]:
        positives, negatives = [], []
        for delta in self.history:
            positives.extend(delta["positives"])
            negatives.extend(delta["negatives"])
        return positives, negatives


def _mask_png(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((mask * 255).astype(np.uint8)).save(buf, format="PNG")
    return buf.getvalue()


def _mask_b64(mask: np.ndarray) -> str:
    return base64.b64encode(_mask_png(mask)).decode("ascii")


def _masks_payload(result: StageResult) -> dict[str, str]:
    return {
        "auto": _mask_b64(result.auto_mask),
        "highrecall": _mask_b64(result.highrecall_mask),
        "stage2": _mask_b64(result.stage2_mask),
        "stage3": _mask_b64(result.stage3_mask),
        "final": _mask_b64(result.final_mask),
    }


def _mask_by_name(result: StageResult, which: str) -> np.ndarray:
    return {
        "auto": result.auto_mask,
        "highrecall": result.highrecall_mask,
        "stage2": result.stage2_mask,
        "stage3": result.stage3_mask,
        "final": result.final_mask,
    }[which]


def create_app(
    model: PromptableRoadModel,
    patch_size: tuple[int, int] = (32, 32),
    session_timeout: float = DEFAULT_SESSION_TIMEOUT,
    max_image_side: int = MAX_IMAGE_SIDE,
    static_dir: str | Path | None = None,
) -> FastAPI:
    app = FastAPI(title="roadprompt refinement service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    model.eval()
    sessions: dict[str, Session] = {}
    store_lock = threading.Lock()
    infer_lock = threading.Lock()  # single inference queue

    def purge_idle():
        now = time.monotonic()
        for sid in [s for s, sess in sessions.items() if now - sess.last_access > session_timeout]:
            del sessions[sid]

    def get_session(sid: str) -> Session:
        with store_lock:
            purge_idle()
            session = sessions.get(sid)
            if session is None:
                raise HTTPException(status_code=404, detail=f"unknown session {sid}")
            session.last_access = time.monotonic()
            return session

    def decode_session(session: Session):
        positives, negatives = session.accumulated()
        with infer_lock:
            session.result = run_stages(
                model, session.embedding, positives, negatives, session.strategy
            )

    def to_prompts(pairs, polarity, grid: PatchGrid) -> list[PointPrompt]:
        prompts = []
        for pair in pairs:
            h, w = int(pair[0]), int(pair[1])
            if not grid.contains_point(h, w):
                raise HTTPException(
                    status_code=400,
                    detail=f"point [h={h}, w={w}] outside image bounds {grid.height}x{grid.width}",
                )
            prompts.append(PointPrompt(h, w, polarity))
        return prompts

    def patch_rects(prompts: list[PointPrompt], grid: PatchGrid) -> list[dict]:
        rects = []
        for idx in sorted({patch_of(p, grid) for p in prompts}):
            r = patch_pixels(idx, grid)
            rects.append(
                {"i": idx.i, "j": idx.j, "row0": r.row0, "row1": r.row1, "col0": r.col0, "col1": r.col1}
            )
        return rects

    @app.get("/healthz")
    def healthz():
        with store_lock:
            return {"status": "ok", "sessions": len(sessions)}

    @app.post("/sessions")
    async def create_session(image: UploadFile):
        raw = await image.read()
        try:
            pil = Image.open(io.BytesIO(raw))
            pil.load()
        except Exception:
            raise HTTPException(status_code=400, detail="image payload is not a decodable raster")
        array = np.asarray(pil.convert("RGB"), dtype=np.uint8)
        h, w = array.shape[:2]
        if h > max_image_side or w > max_image_side:
            raise HTTPException(
                status_code=400,
                detail=f"image {h}x{w} exceeds the configured limit of {max_image_side}",
            )
        grid = PatchGrid(patch_size[0], patch_size[1], h, w)
        with infer_lock:
            embedding = model.encode_image(array)
        session = Session(id=uuid.uuid4().hex, embedding=embedding, grid=grid)
        decode_session(session)
        with store_lock:
            purge_idle()
            sessions[session.id] = session
        return {
            "id": session.id,
            "patch_grid": {
                "l_h": grid.l_h,
                "l_w": grid.l_w,
                "rows": grid.n_rows,
                "cols": grid.n_cols,
                "height": h,
                "width": w,
            },
            "strategy": session.strategy,
            "masks": _masks_payload(session.result),
        }

    @app.post("/sessions/{sid}/refine")
    def refine(sid: str, req: RefineRequest):
        session = get_session(sid)
        if req.strategy not in STRATEGIES:
            raise HTTPException(
                status_code=400, detail=f"unknown strategy {req.strategy!r}; expected {STRATEGIES}"
            )
        delta = {
            "positives": to_prompts(req.positives, POSITIVE, session.grid),
            "negatives": to_prompts(req.negatives, NEGATIVE, session.grid),
        }
        if req.reset:
            session.history.clear()
        session.history.append(delta)
        session.strategy = req.strategy
        decode_session(session)
        return {
            "id": session.id,
            "strategy": session.strategy,
            "history_length": len(session.history),
            "affected_patches": patch_rects(delta["positives"] + delta["negatives"], session.grid),
            "masks": _masks_payload(session.result),
        }

    @app.post("/sessions/{sid}/undo")
    def undo(sid: str):
        session = get_session(sid)
        if not session.history:
            return {
                "id": session.id,
                "strategy": session.strategy,
                "history_length": 0,
                "noop": True,
                "affected_patches": [],
                "masks": _masks_payload(session.result),
            }
        popped = session.history.pop()
        decode_session(session)
        return {
            "id": session.id,
            "strategy": session.strategy,
            "history_length": len(session.history),
            "noop": False,
            "affected_patches": patch_rects(
                popped["positives"] + popped["negatives"], session.grid
            ),
            "masks": _masks_payload(session.result),
        }

    @app.get("/sessions/{sid}/masks/{which}")
    def get_mask(sid: str, which: str):
        session = get_session(sid)
        if which not in MASK_NAMES:
            raise HTTPException(
                status_code=400, detail=f"unknown mask selector {which!r}; expected one of {MASK_NAMES}"
            )
        return Response(content=_mask_png(_mask_by_name(session.result, which)), media_type="image/png")

    if static_dir is not None and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="ui")

    return app
