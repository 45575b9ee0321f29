"""HTTP facade over frozen checkpoints for the interactive draw-generate loop.

Endpoints: GET /models, POST /generate/{fine,rgb,pipeline}, POST /sessions,
GET /sessions[/{id}], GET /artifacts/{path}. Payloads carry PNGs as base64 in
JSON; responses are deterministic functions of (model, payload, seed).
"""
from __future__ import annotations

import base64
import binascii
import json
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response
from pydantic import BaseModel

from .checkpoint import MAGIC, Checkpoint
from .data import rgb_to_png_bytes
from .masks import BinaryMask, mask_from_png_bytes, mask_to_png_bytes
from .training import infer_fine, infer_rgb

__all__ = ["ModelRegistryEntry", "ModelRegistry", "SessionStore", "create_app",
           "ApiError", "resample_mask"]


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass(frozen=True)
class ModelRegistryEntry:
    model_id: str
    stage: str  # "fine" | "rgb"
    checkpoint_path: str
    native_dims: tuple[int, int]  # (height, width)
    dataset: str
    stain: str

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "stage": self.stage,
                "checkpoint_path": self.checkpoint_path,
                "native_height": self.native_dims[0],
                "native_width": self.native_dims[1],
                "dataset": self.dataset, "stain": self.stain}


class ModelRegistry:
    """Checkpoints loaded once at registration, shared read-only afterwards."""

    def __init__(self):
        self._entries: dict[str, ModelRegistryEntry] = {}
        self._checkpoints: dict[str, Checkpoint] = {}

    def register(self, path: Path | str, model_id: str | None = None
                 ) -> ModelRegistryEntry:
        path = Path(path)
        if model_id is None:
            model_id = path.stem if path.suffix else path.name
        if model_id in self._entries:
            raise ValueError(f"duplicate model id {model_id!r}")
        ckpt = Checkpoint.load(path)
        entry = ModelRegistryEntry(
            model_id=model_id, stage=ckpt.stage, checkpoint_path=str(path),
            native_dims=ckpt.native_dims,
            dataset=ckpt.meta.get("dataset", {}).get("name", ""),
            stain=ckpt.meta.get("dataset", {}).get("stain", ""))
        self._entries[model_id] = entry
        self._checkpoints[model_id] = ckpt
        return entry

    @classmethod
    def from_dir(cls, directory: Path | str) -> "ModelRegistry":
        registry = cls()
        directory = Path(directory)
        for path in sorted(directory.iterdir()):
            if not path.is_file():
                continue
            with open(path, "rb") as f:
                if f.read(4) != MAGIC:
                    continue
            registry.register(path)
        return registry

    def list_models(self) -> list[ModelRegistryEntry]:
        return [self._entries[k] for k in sorted(self._entries)]

    def get(self, model_id: str) -> tuple[ModelRegistryEntry, Checkpoint]:
        if model_id not in self._entries:
            raise ApiError(404, "unknown_model", f"no model {model_id!r} registered")
        return self._entries[model_id], self._checkpoints[model_id]


class SessionStore:
    """Append-only JSONL event log per session plus an artifact directory."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._last_ts: dict[str, float] = {}

    def create_session(self) -> str:
        session_id = uuid.uuid4().hex[:12]
        (self.root / session_id).mkdir(parents=True)
        (self.root / session_id / "events.jsonl").touch()
        return session_id

    def _events_path(self, session_id: str) -> Path:
        path = self.root / session_id / "events.jsonl"
        if not path.exists():
            raise ApiError(404, "unknown_session", f"no session {session_id!r}")
        return path

    def list_sessions(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir()
                      if (p / "events.jsonl").exists())

    def events(self, session_id: str) -> list[dict]:
        lines = self._events_path(session_id).read_text().splitlines()
        return [json.loads(line) for line in lines if line.strip()]

    def append_event(self, session_id: str, event: dict,
                     artifacts: dict[str, bytes]) -> dict:
        path = self._events_path(session_id)
        index = len(self.events(session_id))
        now = time.time()
        ts = max(now, self._last_ts.get(session_id, 0.0) + 1e-6)
        self._last_ts[session_id] = ts
        refs = {}
        for kind, payload in artifacts.items():
            name = f"{index:05d}_{kind}.png"
            (self.root / session_id / name).write_bytes(payload)
            refs[f"{kind}_url"] = f"/artifacts/{session_id}/{name}"
        row = {"index": index, "timestamp": ts, **event, **refs}
        with open(path, "a", encoding="utf-8") as f:
            f.write(json.dumps(row) + "\n")
        return row


def resample_mask(mask: BinaryMask, dims: tuple[int, int]) -> tuple[BinaryMask, bool]:
    """Nearest-neighbor resample to (height, width) followed by re-binarization."""
    th, tw = dims
    if mask.shape == (th, tw):
        return mask, False
    sh, sw = mask.shape
    rows = np.minimum(((np.arange(th) + 0.5) * sh / th).astype(int), sh - 1)
    cols = np.minimum(((np.arange(tw) + 0.5) * sw / tw).astype(int), sw - 1)
    plane = (mask.plane[np.ix_(rows, cols)] >= 1).astype(np.uint8)
    return BinaryMask(plane), True


def _decode_mask(b64_payload: str) -> BinaryMask:
    try:
        raw = base64.b64decode(b64_payload, validate=True)
        return mask_from_png_bytes(raw)
    except (binascii.Error, ValueError, OSError) as exc:
        raise ApiError(400, "bad_payload", f"cannot decode mask payload: {exc}")


class _FineRequest(BaseModel):
    model_id: str
    coarse_png_b64: str
    seed: int = 0


class _RgbRequest(BaseModel):
    model_id: str
    fine_png_b64: str


class _PipelineRequest(BaseModel):
    fine_model_id: str
    rgb_model_id: str
    coarse_png_b64: str
    seed: int = 0
    session_id: str | None = None


def create_app(registry: ModelRegistry, artifact_root: Path | str) -> FastAPI:
    app = FastAPI(title="tissuegen service")
    sessions = SessionStore(artifact_root)

    @app.exception_handler(ApiError)
    async def _api_error(_request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message})

    def _fine_for(entry, ckpt, coarse: BinaryMask, seed: int):
        if entry.stage != "fine":
            raise ApiError(409, "wrong_stage",
                           f"model {entry.model_id!r} is a {entry.stage} model")
        coarse, resampled = resample_mask(coarse, entry.native_dims)
        fine = infer_fine(ckpt, coarse, binarize=True, seed=seed)
        return fine, coarse, resampled

    def _rgb_for(entry, ckpt, fine: BinaryMask):
        if entry.stage != "rgb":
            raise ApiError(409, "wrong_stage",
                           f"model {entry.model_id!r} is a {entry.stage} model")
        fine, resampled = resample_mask(fine, entry.native_dims)
        return infer_rgb(ckpt, fine), resampled

    @app.get("/models")
    def list_models():
        return {"models": [e.to_dict() for e in registry.list_models()]}

    @app.post("/generate/fine")
    def generate_fine(req: _FineRequest):
        entry, ckpt = registry.get(req.model_id)
        fine, _, resampled = _fine_for(entry, ckpt, _decode_mask(req.coarse_png_b64),
                                       req.seed)
        png = mask_to_png_bytes(fine)
        return {"model_id": req.model_id, "seed": req.seed, "resampled": resampled,
                "height": fine.height, "width": fine.width,
                "mask_png_b64": base64.b64encode(png).decode()}

    @app.post("/generate/rgb")
    def generate_rgb(req: _RgbRequest):
        entry, ckpt = registry.get(req.model_id)
        rgb, resampled = _rgb_for(entry, ckpt, _decode_mask(req.fine_png_b64))
        png = rgb_to_png_bytes(rgb)
        return {"model_id": req.model_id, "resampled": resampled,
                "height": rgb.shape[0], "width": rgb.shape[1],
                "rgb_png_b64": base64.b64encode(png).decode()}

    @app.post("/generate/pipeline")
    def generate_pipeline(req: _PipelineRequest):
        fine_entry, fine_ckpt = registry.get(req.fine_model_id)
        rgb_entry, rgb_ckpt = registry.get(req.rgb_model_id)
        coarse = _decode_mask(req.coarse_png_b64)
        fine, coarse_used, resampled_in = _fine_for(fine_entry, fine_ckpt, coarse,
                                                    req.seed)
        rgb, resampled_mid = _rgb_for(rgb_entry, rgb_ckpt, fine)
        coarse_png = mask_to_png_bytes(coarse_used)
        fine_png = mask_to_png_bytes(fine)
        rgb_png = rgb_to_png_bytes(rgb)
        body = {"fine_model_id": req.fine_model_id, "rgb_model_id": req.rgb_model_id,
                "seed": req.seed, "resampled": resampled_in or resampled_mid,
                "fine_png_b64": base64.b64encode(fine_png).decode(),
                "rgb_png_b64": base64.b64encode(rgb_png).decode()}
        if req.session_id is not None:
            event = sessions.append_event(
                req.session_id,
                {"fine_model_id": req.fine_model_id,
                 "rgb_model_id": req.rgb_model_id, "seed": req.seed},
                {"coarse": coarse_png, "fine": fine_png, "rgb": rgb_png})
            body["event"] = event
        return body

    @app.post("/sessions")
    def create_session():
        return {"session_id": sessions.create_session()}

    @app.get("/sessions")
    def list_sessions():
        return {"sessions": sessions.list_sessions()}

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return {"session_id": session_id, "events": sessions.events(session_id)}

    @app.get("/artifacts/{path:path}")
    def get_artifact(path: str):
        full = (sessions.root / path).resolve()
        if not str(full).startswith(str(sessions.root.resolve())) or not full.is_file():
            raise ApiError(404, "unknown_artifact", f"no artifact {path!r}")
        return Response(content=full.read_bytes(), media_type="image/png")

    return app
