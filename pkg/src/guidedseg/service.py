"""Live segmentation sessions over HTTP.

A session pins a checkpoint to a set of frames. Frame features are
encoded once at upload; every annotation change re-derives the task
representation from those cached features and re-runs only the head, so
the interactive loop never pays for the encoder. Masks are cached until
the representation changes.
"""

from __future__ import annotations

import base64
import io
import threading
import time
import uuid
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import JSONResponse, Response
from PIL import Image
from pydantic import BaseModel

from . import model
from .checkpoint import load_checkpoint
from .errors import DegenerateSupportError
from .rle import encode_mask
from .tensor import Tensor

DEFAULT_MODEL_NAME = "default"
LOCALITY_CHOICES = ("auto", "global", "identity")


def _decode_png(b64: str) -> np.ndarray:
    try:
        raw = base64.b64decode(b64, validate=True)
        img = Image.open(io.BytesIO(raw))
        img.load()
    except Exception:
        raise HTTPException(status_code=400, detail="image is not decodable PNG/base64")
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / np.float32(255.0)
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _encode_png(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((mask * 255).astype(np.uint8), mode="L").save(buf, format="PNG")
    return buf.getvalue()


@dataclass
class _Frame:
    size: tuple[int, int]              # native (H, W)
    features: Tensor
    base: Optional[Tensor]             # cached query term of the fused decoder
    padded: tuple[int, int]


@dataclass
class _Session:
    id: str
    locality: str                      # "auto" | "global" | "identity"
    frames: list[_Frame] = field(default_factory=list)
    annotations: dict[int, model.AnnotationSet] = field(default_factory=dict)
    z: Optional[model.TaskRepresentation] = None
    degenerate: bool = True
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    guidance_ms: Optional[float] = None
    infer_ms: Optional[float] = None
    created: float = field(default_factory=time.time)
    updated: float = field(default_factory=time.time)
    lock: threading.Lock = field(default_factory=threading.Lock)


class _PointIn(BaseModel):
    x: int
    y: int
    label: str


class _AnnotateIn(BaseModel):
    frame: int
    points: list[_PointIn]


class _CreateIn(BaseModel):
    image_png_base64: Optional[str] = None
    frames: Optional[list[str]] = None
    model: str = DEFAULT_MODEL_NAME
    locality: str = "auto"


class _AppendIn(BaseModel):
    image_png_base64: str


class SessionService:
    """All session state plus the model; one instance per served checkpoint."""

    def __init__(self, params: model.ModelParams, model_name: str = DEFAULT_MODEL_NAME,
                 max_frames: int = 64, max_sessions: int = 256):
        self.params = params
        self.model_name = model_name
        self.max_frames = max_frames
        self.max_sessions = max_sessions
        self.sessions: dict[str, _Session] = {}
        self.registry_lock = threading.Lock()

    # -- internals ---------------------------------------------------------

    def _get(self, sid: str) -> _Session:
        s = self.sessions.get(sid)
        if s is None:
            raise HTTPException(status_code=404, detail=f"unknown session {sid}")
        return s

    def _make_frame(self, image: np.ndarray) -> _Frame:
        h, w = image.shape[1], image.shape[2]
        stride = self.params.config.feature_stride
        padded = model.pad_to_multiple(image, stride)
        feats = model.extract_features(Tensor(padded), self.params)
        base = None
        if (self.params.config.head == model.HEAD_FEATURE_FUSION
                and not self.params.config.unguided):
            base = model.decode_base(feats, self.params)
        return _Frame(size=(h, w), features=feats, base=base,
                      padded=(padded.shape[1], padded.shape[2]))

    def _identity_supported(self) -> bool:
        cfg = self.params.config
        return (cfg.head == model.HEAD_FEATURE_FUSION
                and cfg.fusion == model.FUSION_LATE
                and not cfg.unguided)

    def _effective_locality(self, s: _Session) -> str:
        if s.locality == "global":
            return model.LOCALITY_GLOBAL
        if s.locality == "identity":
            return model.LOCALITY_IDENTITY
        return (model.LOCALITY_IDENTITY
                if len(s.frames) == 1 and self._identity_supported()
                else model.LOCALITY_GLOBAL)

    def _recompute_z(self, s: _Session) -> None:
        """Re-derive the task representation from cached features only."""
        if self.params.config.unguided:
            s.z = None
            s.degenerate = True
            s.masks.clear()
            return
        annotated = [(i, ann) for i, ann in sorted(s.annotations.items())
                     if len(ann) > 0]
        loc = self._effective_locality(s)
        if not annotated:
            # zero-annotation pooling gives the all-zeros representation,
            # which every head treats as "no task": prediction becomes
            # annotation independent
            feats = [s.frames[0].features]
            anns = [model.AnnotationSet([], s.frames[0].size)]
            s.degenerate = True
        else:
            feats = [s.frames[i].features for i, _ in annotated]
            anns = [ann for _, ann in annotated]
            s.degenerate = False
        if loc == model.LOCALITY_IDENTITY and len(feats) > 1:
            raise HTTPException(
                status_code=400,
                detail="identity locality allows annotations on a single frame only")
        s.z = model.update_guidance(feats, anns, self.params, locality=loc)
        s.masks.clear()

    def _segment_frame(self, s: _Session, idx: int) -> np.ndarray:
        cached = s.masks.get(idx)
        if cached is not None:
            return cached
        fr = s.frames[idx]
        t0 = time.perf_counter()
        try:
            logits = model.infer(fr.features, s.z, self.params,
                                 out_size=fr.padded, cached_base=fr.base)
            mask = model.logits_to_mask(logits)[:fr.size[0], :fr.size[1]]
        except DegenerateSupportError:
            mask = np.zeros(fr.size, dtype=np.uint8)
            s.degenerate = True
        s.infer_ms = (time.perf_counter() - t0) * 1e3
        s.masks[idx] = mask
        return mask

    def _check_frame_index(self, s: _Session, idx: int) -> None:
        if not 0 <= idx < len(s.frames):
            raise HTTPException(status_code=404,
                                detail=f"frame {idx} not in [0, {len(s.frames)})")

    # -- handlers ----------------------------------------------------------

    def create_session(self, body: _CreateIn) -> JSONResponse:
        if body.model != self.model_name:
            raise HTTPException(status_code=404,
                                detail=f"unknown checkpoint {body.model!r}")
        if body.locality not in LOCALITY_CHOICES:
            raise HTTPException(status_code=400,
                                detail=f"locality must be one of {LOCALITY_CHOICES}")
        images_b64 = []
        if body.image_png_base64 is not None:
            images_b64.append(body.image_png_base64)
        if body.frames:
            images_b64.extend(body.frames)
        if not images_b64:
            raise HTTPException(status_code=400, detail="no frames supplied")
        if len(images_b64) > self.max_frames:
            raise HTTPException(status_code=400,
                                detail=f"at most {self.max_frames} frames per session")
        images = [_decode_png(b) for b in images_b64]
        first = images[0].shape
        for i, img in enumerate(images[1:], start=1):
            if img.shape != first:
                raise HTTPException(status_code=400,
                                    detail=f"frame {i} size differs from frame 0")
        if body.locality == "identity" and len(images) > 1:
            raise HTTPException(status_code=400,
                                detail="identity locality is single-frame")
        if body.locality == "identity" and not self._identity_supported():
            raise HTTPException(
                status_code=400,
                detail="identity locality needs a late-fusion feature-fusion model")
        with self.registry_lock:
            if len(self.sessions) >= self.max_sessions:
                raise HTTPException(status_code=429, detail="session limit reached")
            sid = uuid.uuid4().hex
            s = _Session(id=sid, locality=body.locality)
            self.sessions[sid] = s
        with s.lock:
            s.frames = [self._make_frame(img) for img in images]
            self._recompute_z(s)
        return JSONResponse(status_code=201, content={
            "session_id": sid,
            "frames": len(s.frames),
            "feature_stride": self.params.config.feature_stride,
        })

    def append_frame(self, sid: str, body: _AppendIn) -> JSONResponse:
        s = self._get(sid)
        image = _decode_png(body.image_png_base64)
        with s.lock:
            if len(s.frames) >= self.max_frames:
                raise HTTPException(status_code=400,
                                    detail=f"at most {self.max_frames} frames per session")
            if s.locality == "identity":
                raise HTTPException(status_code=400,
                                    detail="identity locality is single-frame")
            if (image.shape[1], image.shape[2]) != s.frames[0].size:
                raise HTTPException(
                    status_code=400,
                    detail=f"frame size {image.shape[1:]} does not match session "
                           f"{s.frames[0].size}")
            s.frames.append(self._make_frame(image))
            s.updated = time.time()
            return JSONResponse(status_code=201,
                                content={"frame": len(s.frames) - 1})

    def add_annotations(self, sid: str, body: _AnnotateIn) -> dict:
        s = self._get(sid)
        with s.lock:
            self._check_frame_index(s, body.frame)
            h, w = s.frames[body.frame].size
            for i, pt in enumerate(body.points):
                if pt.label not in ("+", "-"):
                    raise HTTPException(status_code=400,
                                        detail=f"point {i}: label must be '+' or '-'")
                if not (0 <= pt.x < w and 0 <= pt.y < h):
                    raise HTTPException(status_code=400,
                                        detail=f"point {i}: ({pt.x}, {pt.y}) outside "
                                               f"{w}x{h} frame")
            ann = s.annotations.get(body.frame, model.AnnotationSet([], (h, w)))
            for pt in body.points:
                ann = ann.with_point(pt.y, pt.x, pt.label == "+")
            s.annotations[body.frame] = ann
            t0 = time.perf_counter()
            self._recompute_z(s)
            s.guidance_ms = (time.perf_counter() - t0) * 1e3
            mask = self._segment_frame(s, body.frame)
            s.updated = time.time()
            return {
                "mask_rle": encode_mask(mask),
                "width": int(mask.shape[1]),
                "height": int(mask.shape[0]),
                "guidance_ms": s.guidance_ms,
                "infer_ms": s.infer_ms,
                "degenerate": s.degenerate,
            }

    def clear_annotations(self, sid: str, frame: Optional[int]) -> dict:
        s = self._get(sid)
        with s.lock:
            if frame is None:
                s.annotations.clear()
            else:
                self._check_frame_index(s, frame)
                s.annotations.pop(frame, None)
            t0 = time.perf_counter()
            self._recompute_z(s)
            s.guidance_ms = (time.perf_counter() - t0) * 1e3
            s.updated = time.time()
            return {"cleared": "all" if frame is None else frame,
                    "degenerate": s.degenerate}

    def get_mask(self, sid: str, frame: int, fmt: str):
        s = self._get(sid)
        with s.lock:
            self._check_frame_index(s, frame)
            mask = self._segment_frame(s, frame)
            degenerate = s.degenerate
        if fmt == "png":
            return Response(content=_encode_png(mask), media_type="image/png")
        return {
            "mask_rle": encode_mask(mask),
            "width": int(mask.shape[1]),
            "height": int(mask.shape[0]),
            "degenerate": degenerate,
        }

    def summary(self, sid: str) -> dict:
        s = self._get(sid)
        with s.lock:
            return {
                "session_id": s.id,
                "frames": len(s.frames),
                "frame_size": list(s.frames[0].size),
                "annotations": {str(i): len(a) for i, a in sorted(s.annotations.items())
                                if len(a) > 0},
                "locality": s.locality,
                "degenerate": s.degenerate,
                "guidance_ms": s.guidance_ms,
                "infer_ms": s.infer_ms,
                "created": s.created,
                "updated": s.updated,
            }


def build_app(service: SessionService, static_dir=None) -> FastAPI:
    app = FastAPI(title="guidedseg session service")
    app.state.service = service

    @app.post("/v1/sessions")
    def create(body: _CreateIn):
        return service.create_session(body)

    @app.post("/v1/sessions/{sid}/frames")
    def append(sid: str, body: _AppendIn):
        return service.append_frame(sid, body)

    @app.post("/v1/sessions/{sid}/annotations")
    def annotate(sid: str, body: _AnnotateIn):
        return service.add_annotations(sid, body)

    @app.delete("/v1/sessions/{sid}/annotations")
    def clear(sid: str, frame: Optional[int] = Query(default=None)):
        return service.clear_annotations(sid, frame)

    @app.get("/v1/sessions/{sid}/mask")
    def mask(sid: str, frame: int = Query(...),
             format: str = Query(default="rle", pattern="^(rle|png)$")):
        return service.get_mask(sid, frame, format)

    @app.get("/v1/sessions/{sid}")
    def summary(sid: str):
        return service.summary(sid)

    if static_dir is not None:
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=static_dir, html=True), name="static")
    return app


def app_from_checkpoint(path, model_name: str = DEFAULT_MODEL_NAME,
                        max_frames: int = 64, max_sessions: int = 256,
                        static_dir=None) -> FastAPI:
    tensors, meta = load_checkpoint(path)
    params = model.ModelParams(params=tensors,
                               config=model.GuidanceConfig.from_dict(meta))
    return build_app(SessionService(params, model_name, max_frames, max_sessions),
                     static_dir=static_dir)
