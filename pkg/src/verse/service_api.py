"""Session-oriented HTTP service over the inference engine.

JSON endpoints with base64 image payloads: lossless PNG for rgb, 16-bit
quantized PNG for depth previews plus the exact f32 buffer on request.
Oracle sessions answer one frame per action; model sessions condition a full
8-frame chunk on each request's action (or raw caption) and answer with the
chunk's last frame, so response indices are strictly increasing in both modes.

Every step is appended to an action log; a session found on disk but not in
memory is rebuilt by deterministic replay, which reproduces the pool
bit-exactly.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import Body, FastAPI, HTTPException, Query
from PIL import Image

from .dataset import Caption, caption_from_motion, caption_to_actions
from .errors import TerminalSessionError, VerseError, VocabularyError
from .generator import GuidanceScales
from .inference_engine import (
    EngineConfig,
    ModelBackend,
    OracleBackend,
    Session,
    action_to_delta,
)
from .state_memory import CompositeState, fuse_pointcloud
from .trajectory_io import save_pool
from .world_oracle import (
    Action,
    ActionKind,
    default_intrinsics,
    make_scene,
)

CHUNK = 8


def _png_b64(img: Image.Image) -> str:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def encode_rgb(rgb: np.ndarray) -> str:
    arr = np.clip(np.asarray(rgb) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    return _png_b64(Image.fromarray(arr))


def encode_depth_preview(depth: np.ndarray) -> dict:
    d = np.asarray(depth, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    span = hi - lo if hi > lo else 1.0
    q = np.clip((d - lo) / span * 65535.0 + 0.5, 0, 65535).astype(np.uint16)
    return {"png16": _png_b64(Image.fromarray(q)), "min": lo, "max": hi}


def pose_payload(state: CompositeState) -> dict:
    return {
        "rotation": [float(x) for x in state.pose.rotation.reshape(9)],
        "translation": [float(x) for x in state.pose.center],
    }


def frame_payload(state: CompositeState, caption: str | None = None) -> dict:
    out = {
        "index": state.index,
        "rgb_png": encode_rgb(state.rgb),
        "depth": encode_depth_preview(state.depth),
        "pose": pose_payload(state),
    }
    if caption is not None:
        out["caption"] = caption
    return out


@dataclass
class SessionRecord:
    id: str
    mode: str
    seed: int
    created_at: float
    width: int
    height: int
    pool_path: str

    def to_dict(self) -> dict:
        return self.__dict__.copy()


class LiveSession:
    """Engine session plus its lock, record and on-disk logs."""

    def __init__(self, record: SessionRecord, session: Session, directory: Path):
        self.record = record
        self.session = session
        self.dir = directory
        self.lock = threading.Lock()
        self.last_caption = ""

    def log_action(self, payload: dict) -> None:
        with open(self.dir / "actions.jsonl", "a") as f:
            f.write(json.dumps(payload, sort_keys=True) + "\n")

    def persist_pool(self) -> None:
        pool_dir = self.dir / "pool"
        # include still-pending frames so a re-attached client sees everything
        from .state_memory import MemoryPool

        snapshot = MemoryPool()
        snapshot.append(list(self.session.memory.states) + list(self.session._pending_global))
        for sc in self.session.memory.window_scales:
            snapshot._window_scales.append(sc)
        save_pool(pool_dir, snapshot, self.session.intrinsics,
                  scene_seed=self.record.seed)

    def all_states(self):
        return list(self.session.memory.states) + list(self.session._pending_global)


class ServiceState:
    def __init__(self, data_dir, checkpoint: str | None = None,
                 engine_cfg: EngineConfig = EngineConfig(),
                 step_magnitude: float = 0.25, turn_magnitude: float = 0.13089969389957472,
                 sampler_steps: int = 8):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.checkpoint = checkpoint
        self.engine_cfg = engine_cfg
        self.step_magnitude = step_magnitude
        self.turn_magnitude = turn_magnitude
        self.sampler_steps = sampler_steps
        self.sessions: dict[str, LiveSession] = {}
        self.registry_lock = threading.Lock()
        self._model = None

    # -- construction ------------------------------------------------------

    def _load_model(self):
        if self._model is None:
            if self.checkpoint is None:
                raise HTTPException(400, "model mode requires a checkpoint")
            from .generator import load_generator

            self._model = load_generator(self.checkpoint)
        return self._model

    def _build_session(self, mode: str, seed: int, width: int, height: int) -> Session:
        intr = default_intrinsics(width, height)
        if mode == "oracle":
            backend = OracleBackend(make_scene(seed), intr)
            return Session(backend, intr, cfg=self.engine_cfg, seed=seed)
        if mode == "model":
            model = self._load_model()
            backend = ModelBackend(model, steps=self.sampler_steps)
            scene = make_scene(seed)
            from .geometry import CameraPose
            from .world_oracle import render

            v0, _ = render(scene, CameraPose.identity(), intr)
            return Session(backend, intr, cfg=self.engine_cfg, seed=seed, v0=v0)
        raise HTTPException(400, f"unknown mode {mode!r}")

    def create(self, mode: str, seed: int, width: int, height: int) -> LiveSession:
        import time as _time

        sid = uuid.uuid4().hex[:12]
        directory = self.data_dir / sid
        directory.mkdir(parents=True)
        session = self._build_session(mode, seed, width, height)
        record = SessionRecord(
            id=sid, mode=mode, seed=seed, created_at=_time.time(),
            width=width, height=height, pool_path=str(directory / "pool"),
        )
        live = LiveSession(record, session, directory)
        (directory / "meta.json").write_text(json.dumps(record.to_dict(), sort_keys=True))
        live.persist_pool()
        with self.registry_lock:
            self.sessions[sid] = live
        return live

    def get(self, sid: str) -> LiveSession:
        with self.registry_lock:
            if sid in self.sessions:
                return self.sessions[sid]
        live = self._restore(sid)
        if live is None:
            raise HTTPException(404, f"no session {sid}")
        with self.registry_lock:
            self.sessions.setdefault(sid, live)
            return self.sessions[sid]

    def _restore(self, sid: str) -> LiveSession | None:
        directory = self.data_dir / sid
        meta = directory / "meta.json"
        if not meta.exists():
            return None
        rec = SessionRecord(**json.loads(meta.read_text()))
        session = self._build_session(rec.mode, rec.seed, rec.width, rec.height)
        live = LiveSession(rec, session, directory)
        log_file = directory / "actions.jsonl"
        if log_file.exists():
            for line in log_file.read_text().splitlines():
                payload = json.loads(line)
                self._apply(live, payload, replay=True)
        return live

    # -- stepping ------------------------------------------------------------

    def _parse_request(self, live: LiveSession, body: dict):
        """Returns (actions, caption_text): the raw-caption and key-mapped
        control paths converge on the same action list before conditioning."""
        if "caption" in body:
            try:
                caption = Caption(str(body["caption"]))
            except VocabularyError as exc:
                raise HTTPException(400, str(exc))
            actions = caption_to_actions(
                caption, step=self.step_magnitude,
            )
            return actions, caption.text
        spec = body.get("action")
        if not spec or "kind" not in spec:
            raise HTTPException(400, "need 'action' {kind, magnitude} or 'caption'")
        try:
            kind = ActionKind(spec["kind"])
        except ValueError:
            raise HTTPException(400, f"unknown action kind {spec['kind']!r}")
        mag = float(spec.get("magnitude", self.step_magnitude))
        return [Action(kind, mag)], None

    def _apply(self, live: LiveSession, payload: dict, replay: bool = False) -> list:
        actions, caption_text = self._parse_request(live, payload)
        session = live.session
        produced: list[CompositeState] = []
        try:
            if live.record.mode == "oracle":
                for a in actions:
                    produced.append(session.step_immediate(a))
            else:
                # one request = one conditioned chunk; the action replicates
                # across the chunk (or the raw caption conditions it directly)
                for a in actions:
                    chunk_actions = [a] * CHUNK
                    caption = (Caption(caption_text) if caption_text is not None
                               else caption_from_motion(
                                   [action_to_delta(x) for x in chunk_actions]))
                    produced.extend(session.force_chunk(chunk_actions, caption=caption))
        except TerminalSessionError as exc:
            raise HTTPException(410, str(exc))
        live.last_caption = caption_text or caption_from_motion(
            [action_to_delta(a) for a in actions]
        ).text
        if not replay:
            live.log_action(payload)
            live.persist_pool()
        return produced

    def step(self, sid: str, payload: dict) -> dict:
        live = self.get(sid)
        with live.lock:
            produced = self._apply(live, payload)
            latest = produced[-1] if produced else live.all_states()[-1]
            return frame_payload(latest, caption=live.last_caption)


def create_app(data_dir, checkpoint: str | None = None,
               engine_cfg: EngineConfig = EngineConfig(),
               sampler_steps: int = 8, ui_dir: str | None = None) -> FastAPI:
    state = ServiceState(data_dir, checkpoint=checkpoint, engine_cfg=engine_cfg,
                         sampler_steps=sampler_steps)
    app = FastAPI(title="verse")
    app.state.verse = state

    @app.post("/sessions")
    def create_session(body: dict = Body(...)):
        mode = body.get("mode", "oracle")
        seed = int(body.get("seed", 0))
        width = int(body.get("width", 64))
        height = int(body.get("height", 48))
        if mode == "model" and state.checkpoint is None:
            raise HTTPException(400, "server started without a checkpoint")
        live = state.create(mode, seed, width, height)
        out = live.record.to_dict()
        out["frame"] = frame_payload(live.session.memory.state(0))
        return out

    @app.post("/sessions/{sid}/step")
    def post_step(sid: str, body: dict = Body(...)):
        return state.step(sid, body)

    @app.get("/sessions/{sid}/frames/{t}")
    def get_frame(sid: str, t: int, depth: str | None = Query(default=None)):
        live = state.get(sid)
        with live.lock:
            states = live.all_states()
            for s in states:
                if s.index == t:
                    out = frame_payload(s)
                    if depth == "f32":
                        raw = np.ascontiguousarray(s.depth, dtype="<f4").tobytes()
                        out["depth_f32"] = base64.b64encode(raw).decode()
                    return out
        raise HTTPException(404, f"no frame {t}")

    @app.get("/sessions/{sid}/pointcloud")
    def get_pointcloud(sid: str, stride: int = Query(default=4, ge=1)):
        live = state.get(sid)
        with live.lock:
            from .state_memory import MemoryPool

            pool = MemoryPool()
            pool.append(live.all_states())
            pts, cols = fuse_pointcloud(pool, stride=stride)
        return {
            "points": [[float(v) for v in p] for p in pts],
            "colors": [[float(v) for v in c] for c in cols],
            "stride": stride,
        }

    @app.get("/sessions/{sid}/memory")
    def get_memory(sid: str):
        live = state.get(sid)
        with live.lock:
            poses = [
                {"index": s.index, **pose_payload(s)} for s in live.all_states()
            ]
        return {"poses": poses}

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app
