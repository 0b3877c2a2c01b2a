"""HTTP annotation service consumed by the browser frontend."""
from __future__ import annotations

import base64
import io

import numpy as np
from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from PIL import Image
from pydantic import BaseModel

from .clicks import Click, OutOfBoundsClickError
from .sessions import SessionError, SessionExportedError, SessionManager, UnknownSessionError


def _png_b64(array: np.ndarray, mode: str = "L") -> str:
    img = Image.fromarray(array, mode=mode)
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _scores_png_b64(scores: np.ndarray) -> str:
    return _png_b64((np.clip(scores, 0, 1) * 255).astype(np.uint8))


class OpenSessionRequest(BaseModel):
    image_id: str
    object: str | None = None
    defect: str | None = None


class SubmitClickRequest(BaseModel):
    session_id: str
    x: int
    y: int
    polarity: int


class SessionOnly(BaseModel):
    session_id: str


class SetPromptRequest(BaseModel):
    session_id: str
    object: str = ""
    defect: str = ""
    free_text: str | None = None


class ExportRequest(BaseModel):
    session_id: str
    destination: str | None = None


def create_app(manager: SessionManager) -> FastAPI:
    app = FastAPI(title="anoclick annotation service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )

    def _wrap(fn):
        try:
            return fn()
        except UnknownSessionError as e:
            raise HTTPException(status_code=404, detail=str(e))
        except (OutOfBoundsClickError, SessionExportedError, KeyError, ValueError) as e:
            raise HTTPException(status_code=400, detail=str(e))
        except SessionError as e:
            raise HTTPException(status_code=400, detail=str(e))

    @app.get("/list-images")
    def list_images():
        return {
            "images": [
                {
                    "image_id": e.image_id,
                    "category": e.category,
                    "defect_type": e.defect_type,
                }
                for e in manager.list_images()
            ]
        }

    @app.post("/open-session")
    def open_session(req: OpenSessionRequest):
        def run():
            key = (req.object, req.defect) if req.object and req.defect else None
            session = manager.open_session(req.image_id, prompt_key=key, with_gt=True)
            rgb = (session.image * 255).astype(np.uint8)
            h, w = session.image.shape[:2]
            return {
                "session_id": session.session_id,
                "image": _png_b64(rgb, mode="RGB"),
                "width": w,
                "height": h,
                "prompt_key": list(session.prompt_key),
                "prompt": session.prompt,
            }

        return _wrap(run)

    @app.post("/submit-click")
    def submit_click(req: SubmitClickRequest):
        def run():
            click = Click(x=req.x, y=req.y, positive=bool(req.polarity))
            mask, iou_value = manager.submit_click(req.session_id, click)
            session = manager.get_session(req.session_id)
            return {
                "mask": _scores_png_b64(mask.scores),
                "click_count": len(session.clicks),
                "iou": iou_value,
            }

        return _wrap(run)

    @app.post("/undo-click")
    def undo_click(req: SessionOnly):
        def run():
            mask = manager.undo_click(req.session_id)
            session = manager.get_session(req.session_id)
            return {
                "mask": _scores_png_b64(mask.scores),
                "click_count": len(session.clicks),
            }

        return _wrap(run)

    @app.post("/set-prompt")
    def set_prompt(req: SetPromptRequest):
        def run():
            key = manager.set_prompt(req.session_id, req.object, req.defect,
                                     free_text=req.free_text)
            return {"prompt_key": list(key)}

        return _wrap(run)

    @app.get("/get-mask")
    def get_mask(session_id: str):
        def run():
            mask = manager.get_mask(session_id)
            return {"mask": _scores_png_b64(mask.scores)}

        return _wrap(run)

    @app.post("/export")
    def export(req: ExportRequest):
        def run():
            path = manager.export_label(req.session_id, destination=req.destination)
            mask_bytes = path.read_bytes()
            return {
                "path": str(path),
                "mask_png": base64.b64encode(mask_bytes).decode(),
            }

        return _wrap(run)

    return app
