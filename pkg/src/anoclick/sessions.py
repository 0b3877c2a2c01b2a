"""Annotation session lifecycle: open, click, undo, export, replay."""
from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .clicks import AnomalyMask, Click, OutOfBoundsClickError
from .datasets import DatasetIndex, load_image, load_mask
from .language import LinguisticFeature
from .residuals import ResidualGrid
from .runtime import ModelRuntime


class SessionError(Exception):
    pass


class UnknownSessionError(SessionError):
    pass


class SessionExportedError(SessionError):
    pass


@dataclass
class ImageEntry:
    image_id: str
    path: Path
    category: str
    defect_type: str
    mask_path: Path | None = None


@dataclass
class SessionState:
    session_id: str
    image_id: str
    category: str
    prompt_key: tuple[str, str]
    prompt: str | None
    image: np.ndarray
    residuals: ResidualGrid
    feature: LinguisticFeature | None
    clicks: list[Click] = field(default_factory=list)
    masks: list[AnomalyMask] = field(default_factory=list)
    status: str = "active"            # active | exported | abandoned
    gt: np.ndarray | None = None
    export_path: Path | None = None
    last_access: float = 0.0
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    @property
    def current_mask(self) -> AnomalyMask:
        if self.masks:
            return self.masks[-1]
        return AnomalyMask.empty(self.image.shape[:2])

    def history(self) -> list[dict]:
        return [c.to_dict() for c in self.clicks]


class SessionManager:
    """Owns the session table; each session's refinement is serialized by
    its own lock while model weights and banks stay shared read-only."""

    def __init__(self, runtime: ModelRuntime, output_dir,
                 idle_timeout: float = 1800.0, clock=time.monotonic):
        self.runtime = runtime
        self.output_dir = Path(output_dir)
        self.idle_timeout = idle_timeout
        self.clock = clock
        self.images: dict[str, ImageEntry] = {}
        self.sessions: dict[str, SessionState] = {}
        self._table_lock = threading.Lock()
        # residuals and prompt features are click-independent; share them
        # across sessions on the same image / prompt
        self._residual_cache: dict[str, tuple[np.ndarray, ResidualGrid]] = {}
        self._feature_cache: dict[tuple[str, str, str], LinguisticFeature] = {}

    def _image_and_residuals(self, entry: ImageEntry):
        cached = self._residual_cache.get(entry.image_id)
        if cached is None:
            image = load_image(entry.path, size=self.runtime.config.image_size)
            cached = (image, self.runtime.residuals_for(image, entry.category))
            self._residual_cache[entry.image_id] = cached
        return cached

    def _feature_for(self, prompt_key: tuple[str, str], prompt: str):
        key = (prompt_key[0], prompt_key[1], prompt)
        feature = self._feature_cache.get(key)
        if feature is None:
            feature = self.runtime.linguistic_for(prompt_key[0], prompt_key[1],
                                                  prompt=prompt)
            self._feature_cache[key] = feature
        return feature

    # ------------------------------------------------------------------
    # image registry
    # ------------------------------------------------------------------
    def register_index(self, index: DatasetIndex) -> None:
        for sample in index.samples:
            image_id = f"{index.category}/{index.split}/{sample.defect_type}/{sample.image_path.name}"
            self.images[image_id] = ImageEntry(
                image_id=image_id,
                path=sample.image_path,
                category=index.category,
                defect_type=sample.defect_type,
                mask_path=sample.mask_path,
            )

    def list_images(self) -> list[ImageEntry]:
        return sorted(self.images.values(), key=lambda e: e.image_id)

    # ------------------------------------------------------------------
    # lifecycle
    # ------------------------------------------------------------------
    def _evict_idle(self) -> None:
        now = self.clock()
        with self._table_lock:
            stale = [
                sid for sid, s in self.sessions.items()
                if s.status == "active" and now - s.last_access > self.idle_timeout
            ]
            for sid in stale:
                self.sessions[sid].status = "abandoned"
                del self.sessions[sid]

    def _get(self, session_id: str) -> SessionState:
        self._evict_idle()
        session = self.sessions.get(session_id)
        if session is None:
            raise UnknownSessionError(f"unknown or expired session: {session_id}")
        session.last_access = self.clock()
        return session

    def open_session(self, image_id: str, prompt_key: tuple[str, str] | None = None,
                     with_gt: bool = False) -> SessionState:
        """Loads the image, computes residuals and the linguistic feature
        once, and starts from the all-zero mask."""
        self._evict_idle()
        entry = self.images.get(image_id)
        if entry is None:
            raise SessionError(f"unknown image: {image_id}")
        cfg = self.runtime.config
        image, residuals = self._image_and_residuals(entry)

        prompt = None
        feature = None
        if self.runtime.corpus is not None and cfg.use_language:
            if prompt_key is None:
                defect = entry.defect_type if entry.defect_type != "good" else "*"
                prompt_key = self.runtime.corpus.resolve_key(entry.category, defect)
            else:
                prompt_key = self.runtime.corpus.resolve_key(*prompt_key)
            prompt = self.runtime.select_prompt(*prompt_key)
            feature = self._feature_for(prompt_key, prompt)
        else:
            prompt_key = (entry.category, entry.defect_type)

        gt = None
        if with_gt and entry.mask_path is not None:
            gt = load_mask(entry.mask_path, size=cfg.image_size)

        session = SessionState(
            session_id=uuid.uuid4().hex,
            image_id=image_id,
            category=entry.category,
            prompt_key=prompt_key,
            prompt=prompt,
            image=image,
            residuals=residuals,
            feature=feature,
            gt=gt,
            last_access=self.clock(),
        )
        with self._table_lock:
            self.sessions[session.session_id] = session
        return session

    def set_prompt(self, session_id: str, object_name: str, defect: str,
                   free_text: str | None = None) -> tuple[str, str]:
        """Re-targets the linguistic feature; later clicks use it."""
        session = self._get(session_id)
        if session.status == "exported":
            raise SessionExportedError("session already exported")
        with session.lock:
            if free_text:
                session.prompt_key = (object_name or "*", defect or "*")
                session.prompt = free_text
                session.feature = self.runtime.linguistic_for(
                    *session.prompt_key, prompt=free_text
                )
            else:
                key = self.runtime.corpus.resolve_key(object_name, defect)
                session.prompt_key = key
                session.prompt = self.runtime.select_prompt(*key)
                session.feature = self.runtime.linguistic_for(*key, prompt=session.prompt)
        return session.prompt_key

    def submit_click(self, session_id: str, click: Click):
        """Runs one refinement with the full click history."""
        session = self._get(session_id)
        if session.status == "exported":
            raise SessionExportedError("session already exported; open a new one")
        h, w = session.image.shape[:2]
        if not (0 <= click.x < w and 0 <= click.y < h):
            raise OutOfBoundsClickError(f"click ({click.x}, {click.y}) outside {w}x{h}")
        with session.lock:
            click = Click(x=click.x, y=click.y, positive=click.positive,
                          index=len(session.clicks))
            clicks = session.clicks + [click]
            scores = self.runtime.predict(
                session.image, clicks, session.current_mask.scores,
                session.residuals, session.feature,
            )
            mask = AnomalyMask(scores, threshold=self.runtime.config.mask_threshold)
            session.clicks.append(click)
            session.masks.append(mask)
        iou_value = None
        if session.gt is not None:
            from .metrics import iou

            iou_value = iou(mask.binary(), session.gt)
        return mask, iou_value

    def undo_click(self, session_id: str) -> AnomalyMask:
        """Pops the last click and mask, restoring the previous state."""
        session = self._get(session_id)
        if session.status == "exported":
            raise SessionExportedError("session already exported")
        with session.lock:
            if session.clicks:
                session.clicks.pop()
                session.masks.pop()
            return session.current_mask

    def get_mask(self, session_id: str) -> AnomalyMask:
        return self._get(session_id).current_mask

    def get_session(self, session_id: str) -> SessionState:
        return self._get(session_id)

    # ------------------------------------------------------------------
    # export
    # ------------------------------------------------------------------
    def export_label(self, session_id: str, destination=None) -> Path:
        """Binarized mask PNG plus a sidecar with everything needed to
        replay the session. Idempotent: a second call returns the first
        path without rewriting."""
        session = self._get(session_id)
        if session.export_path is not None:
            return session.export_path
        if not session.clicks:
            raise SessionError("refusing to export a session without clicks")
        dest_dir = Path(destination) if destination else self.output_dir / "labels"
        stem = session.image_id.replace("/", "__").rsplit(".", 1)[0]
        mask_path = dest_dir / f"{stem}.png"
        meta_path = dest_dir / f"{stem}.json"
        binary = session.current_mask.binary().astype(np.uint8) * 255
        try:
            dest_dir.mkdir(parents=True, exist_ok=True)
            Image.fromarray(binary, mode="L").save(mask_path)
            meta = {
                "image_id": session.image_id,
                "category": session.category,
                "prompt_key": list(session.prompt_key),
                "prompt": session.prompt,
                "threshold": self.runtime.config.mask_threshold,
                "model_fingerprint": self.runtime.fingerprint,
                "clicks": session.history(),
            }
            meta_path.write_text(json.dumps(meta, indent=2))
        except OSError:
            # leave the session usable when the destination is unwritable
            raise
        session.status = "exported"
        session.export_path = mask_path
        return mask_path

    def replay_export(self, meta_path) -> np.ndarray:
        """Re-runs an exported click log; returns the binarized mask."""
        meta = json.loads(Path(meta_path).read_text())
        entry = self.images.get(meta["image_id"])
        if entry is None:
            raise SessionError(f"unknown image in export: {meta['image_id']}")
        cfg = self.runtime.config
        image = load_image(entry.path, size=cfg.image_size)
        residuals = self.runtime.residuals_for(image, entry.category)
        feature = None
        if meta.get("prompt") and self.runtime.corpus is not None and cfg.use_language:
            key = tuple(meta["prompt_key"])
            feature = self.runtime.linguistic_for(key[0], key[1], prompt=meta["prompt"])
        clicks: list[Click] = []
        prev = np.zeros(image.shape[:2], dtype=np.float32)
        scores = prev
        for i, c in enumerate(meta["clicks"]):
            clicks.append(Click.from_dict(c, index=i))
            scores = self.runtime.predict(image, clicks, prev, residuals, feature)
            prev = scores
        return (scores >= meta["threshold"]).astype(np.uint8) * 255
