"""Human-in-the-loop reward service.

Records tracker runs on synthetic episodes, streams them for annotation over
a websocket, converts binary failure marks into stride-sampled rewards,
appends committed sessions to the replay DB, and retrains the net on demand.
All message schemas carry a "v" field.
"""

from __future__ import annotations

import asyncio
import base64
import io
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from fastapi import FastAPI, HTTPException, WebSocket, WebSocketDisconnect
from PIL import Image
from pydantic import BaseModel, Field

from .backend import BackendConfig
from .learn import (
    EpisodeRun,
    ExperienceTuple,
    ReplayDB,
    load_replay,
    net_policy,
    online_policy,
    retrain_on_replay,
    run_episode,
    save_replay,
)
from .qnet import init_net, load_checkpoint, save_checkpoint
from .sim import Episode, generate_episode, preset

PROTOCOL_V = 1


@dataclass(frozen=True)
class ServiceSettings:
    stride: int = 50
    replay_capacity: int = 50_000
    retrain_updates: int = 64
    retrain_batch_size: int = 32
    retrain_lr: float = 1e-4
    gamma: float = 0.95
    checkpoint: Optional[str] = None
    init_seed: int = 0
    data_dir: Optional[str] = None
    # Q prior for a fresh (checkpoint-less) net, as the joint value of an
    # action pair; None means the discounted all-success return 1/(1-gamma).
    # Annotated replay only contains the actions the recorded policy took,
    # so retraining can only lower values it has evidence against; starting
    # every pair at the all-success value makes untried actions win exactly
    # where the observed ones failed. 0 keeps the plain random init.
    prior_q: Optional[float] = None


@dataclass
class StoredRun:
    run_id: str
    episode: Episode
    run: EpisodeRun
    stride: int


@dataclass
class Session:
    id: str
    run_id: str
    speed: float
    cursor: int = 0
    marks: list[tuple[int, int]] = field(default_factory=list)
    status: str = "streaming"  # streaming | committed


@dataclass
class TrainJob:
    id: str
    seed: int = 0
    status: str = "queued"  # queued | running | done | failed
    error: Optional[str] = None


class _State:
    def __init__(self, settings: ServiceSettings):
        self.settings = settings
        self.lock = threading.Lock()
        if settings.checkpoint:
            self.net = load_checkpoint(settings.checkpoint)
        else:
            self.net = init_net(settings.init_seed)
            prior = (1.0 / (1.0 - settings.gamma)
                     if settings.prior_q is None else settings.prior_q)
            # Joint Q decomposes as the sum of the two head values.
            self.net.params["fc_motion_b"][:] = prior / 2.0
            self.net.params["fc_appearance_b"][:] = prior / 2.0
        self.backend = BackendConfig()
        self.runs: dict[str, StoredRun] = {}
        self.sessions: dict[str, Session] = {}
        self.replay = ReplayDB(settings.replay_capacity)
        self.jobs: dict[str, TrainJob] = {}
        self.active_job: Optional[str] = None
        if settings.data_dir:
            path = Path(settings.data_dir) / "replay.jsonl"
            if path.exists():
                self.replay = load_replay(path,
                                          capacity=settings.replay_capacity)


# ---------------------------------------------------------------- payloads

class EpisodeRequest(BaseModel):
    preset: str = "short_term"
    episode_len: int = 600
    seed: int = 0
    overrides: dict = Field(default_factory=dict)


class RunCreate(BaseModel):
    v: Literal[1] = 1
    episode: EpisodeRequest
    policy: Literal["net", "online"] = "net"
    stride: Optional[int] = Field(default=None, ge=1)


class SessionCreate(BaseModel):
    v: Literal[1] = 1
    episode_id: str
    run_id: str
    speed: float = Field(default=1.0, gt=0)


class MarkBody(BaseModel):
    v: Literal[1] = 1
    marks: list[tuple[int, int]]


class TrainTrigger(BaseModel):
    v: Literal[1] = 1


# ------------------------------------------------------------------ helpers

def merge_marks(marks: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """Union of closed intervals, sorted and non-overlapping."""
    out: list[tuple[int, int]] = []
    for start, end in sorted(marks):
        if out and start <= out[-1][1] + 1:
            out[-1] = (out[-1][0], max(out[-1][1], end))
        else:
            out.append((start, end))
    return out


def _marked(frame: int, marks: list[tuple[int, int]]) -> bool:
    return any(s <= frame <= e for s, e in marks)


def rewards_from_marks(stored: StoredRun, marks: list[tuple[int, int]]
                       ) -> list[ExperienceTuple]:
    """One tuple per stride sample; reward 0 inside a mark, else 1."""
    merged = merge_marks(marks)
    out = []
    for s in stored.run.samples:
        out.append(ExperienceTuple(
            state_plane=s.state_plane, action=s.action,
            reward=0.0 if _marked(s.frame_index, merged) else 1.0,
            next_state_plane=s.next_state_plane,
            episode_id=stored.run.episode_id, frame_index=s.frame_index))
    return out


def _png_base64(pixels: np.ndarray) -> str:
    img = Image.fromarray((np.clip(pixels, 0.0, 1.0) * 255).astype(np.uint8),
                          mode="L")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def frame_message(stored: StoredRun, index: int) -> dict:
    rec = stored.run.records[index]
    box = rec.reported
    return {
        "v": PROTOCOL_V,
        "type": "frame",
        "index": index,
        "png_base64": _png_base64(stored.episode.frames[index]),
        "box": None if box is None else [box.x, box.y, box.w, box.h],
        "action": [rec.action.motion.name, rec.action.appearance.name],
    }


def _validate_marks(marks: list[tuple[int, int]], length: int) -> None:
    for start, end in marks:
        if start > end:
            raise HTTPException(422, f"mark start {start} > end {end}")
        if start < 0 or end >= length:
            raise HTTPException(422, f"mark [{start}, {end}] outside "
                                     f"episode of {length} frames")


def _streaming_session(state: _State, session_id: str) -> Session:
    session = state.sessions.get(session_id)
    if session is None:
        raise HTTPException(404, f"unknown session {session_id!r}")
    if session.status != "streaming":
        raise HTTPException(409, f"session {session_id!r} is committed")
    return session


def _commit(state: _State, session: Session) -> int:
    stored = state.runs[session.run_id]
    tuples = rewards_from_marks(stored, session.marks)
    with state.lock:
        for t in tuples:
            state.replay.push(t)
        session.status = "committed"
        if state.settings.data_dir:
            save_replay(state.replay,
                        Path(state.settings.data_dir) / "replay.jsonl")
    return len(tuples)


def _run_training(state: _State, job: TrainJob) -> None:
    try:
        with state.lock:
            snapshot = ReplayDB(len(state.replay))
            for t in state.replay:
                snapshot.push(t)
            net = state.net.astype(np.float32)
        job.status = "running"
        settings = state.settings
        retrain_on_replay(net, snapshot, gamma=settings.gamma,
                          lr=settings.retrain_lr,
                          batch_size=min(settings.retrain_batch_size,
                                         len(snapshot)),
                          updates=settings.retrain_updates, seed=job.seed)
        with state.lock:
            state.net = net
            if settings.data_dir:
                save_checkpoint(net, Path(settings.data_dir)
                                / f"retrain_{job.id}.ptrk")
        job.status = "done"
    except Exception as exc:
        job.error = str(exc)
        job.status = "failed"
    finally:
        state.active_job = None


# ---------------------------------------------------------------------- app

def build_app(settings: ServiceSettings | None = None) -> FastAPI:
    state = _State(settings or ServiceSettings())
    app = FastAPI(title="tracker annotation service")
    app.state.tracker = state

    @app.post("/v1/runs")
    def create_run(body: RunCreate):
        spec = preset(body.episode.preset,
                      episode_len=body.episode.episode_len,
                      seed=body.episode.seed, **body.episode.overrides)
        episode = generate_episode(spec)
        stride = body.stride or state.settings.stride
        policy = (net_policy(state.net) if body.policy == "net"
                  else online_policy(state.backend.report_threshold))
        rng = np.random.default_rng((spec.seed, 17))
        run = run_episode(episode, policy, state.backend, stride=stride,
                          rng=rng, reward_mode="none")
        run_id = f"run-{uuid.uuid4().hex[:12]}"
        state.runs[run_id] = StoredRun(run_id=run_id, episode=episode,
                                       run=run, stride=stride)
        return {"v": PROTOCOL_V, "run_id": run_id,
                "episode_id": episode.episode_id,
                "frames": len(episode.frames), "stride": stride}

    @app.get("/v1/runs")
    def list_runs():
        return {"v": PROTOCOL_V, "runs": [
            {"run_id": r.run_id, "episode_id": r.episode.episode_id,
             "frames": len(r.episode.frames), "stride": r.stride}
            for r in state.runs.values()]}

    @app.post("/v1/session")
    def create_session(body: SessionCreate):
        stored = state.runs.get(body.run_id)
        if stored is None:
            raise HTTPException(404, f"unknown run {body.run_id!r}")
        if stored.episode.episode_id != body.episode_id:
            raise HTTPException(404, f"unknown episode {body.episode_id!r} "
                                     f"for run {body.run_id!r}")
        session = Session(id=f"sess-{uuid.uuid4().hex[:12]}",
                          run_id=body.run_id, speed=body.speed)
        state.sessions[session.id] = session
        return {"v": PROTOCOL_V, "session_id": session.id,
                "frames": len(stored.episode.frames),
                "stride": stored.stride, "speed": session.speed}

    @app.get("/v1/session/{session_id}")
    def get_session(session_id: str):
        session = state.sessions.get(session_id)
        if session is None:
            raise HTTPException(404, f"unknown session {session_id!r}")
        return {"v": PROTOCOL_V, "session_id": session.id,
                "status": session.status, "cursor": session.cursor,
                "speed": session.speed,
                "marks": [list(m) for m in merge_marks(session.marks)]}

    @app.post("/v1/session/{session_id}/marks")
    def submit_marks(session_id: str, body: MarkBody):
        session = _streaming_session(state, session_id)
        stored = state.runs[session.run_id]
        _validate_marks(body.marks, len(stored.episode.frames))
        session.marks = merge_marks(session.marks + list(body.marks))
        return {"v": PROTOCOL_V, "marks": [list(m) for m in session.marks]}

    @app.post("/v1/session/{session_id}/commit")
    def commit_session(session_id: str):
        session = _streaming_session(state, session_id)
        count = _commit(state, session)
        return {"v": PROTOCOL_V, "tuples_appended": count,
                "replay_size": len(state.replay)}

    @app.post("/v1/train")
    def trigger_train(_: TrainTrigger):
        with state.lock:
            if state.active_job is not None:
                raise HTTPException(409, "training already running")
            if len(state.replay) == 0:
                raise HTTPException(412, "replay DB is empty")
            job = TrainJob(id=f"job-{uuid.uuid4().hex[:12]}",
                           seed=len(state.jobs))
            state.jobs[job.id] = job
            state.active_job = job.id
        thread = threading.Thread(target=_run_training, args=(state, job),
                                  daemon=True)
        thread.start()
        return {"v": PROTOCOL_V, "job_id": job.id, "status": "queued"}

    @app.get("/v1/train/{job_id}")
    def train_status(job_id: str):
        job = state.jobs.get(job_id)
        if job is None:
            raise HTTPException(404, f"unknown job {job_id!r}")
        payload = {"v": PROTOCOL_V, "job_id": job.id, "status": job.status}
        if job.error is not None:
            payload["error"] = job.error
        return payload

    @app.websocket("/v1/session/{session_id}/stream")
    async def stream(ws: WebSocket, session_id: str):
        await ws.accept()
        session = state.sessions.get(session_id)
        if session is None:
            await ws.send_json({"v": PROTOCOL_V, "type": "error",
                                "message": f"unknown session {session_id!r}"})
            await ws.close(code=4404)
            return
        stored = state.runs[session.run_id]
        total = len(stored.episode.frames)
        send_lock = asyncio.Lock()
        done = asyncio.Event()

        async def reply(payload: dict) -> None:
            async with send_lock:
                await ws.send_json(payload)

        async def handle(msg: dict) -> None:
            kind = msg.get("type")
            if session.status != "streaming":
                await reply({"v": PROTOCOL_V, "type": "error",
                             "message": "session is committed"})
                return
            if kind == "mark":
                start, end = int(msg["start"]), int(msg["end"])
                if start > end or start < 0 or end >= total:
                    await reply({"v": PROTOCOL_V, "type": "error",
                                 "message": f"bad mark [{start}, {end}]"})
                    return
                session.marks = merge_marks(session.marks + [(start, end)])
                await reply({"v": PROTOCOL_V, "type": "marks",
                             "marks": [list(m) for m in session.marks]})
            elif kind == "speed":
                mult = float(msg["multiplier"])
                if mult <= 0:
                    await reply({"v": PROTOCOL_V, "type": "error",
                                 "message": "speed must be positive"})
                    return
                session.speed = mult
                await reply({"v": PROTOCOL_V, "type": "speed",
                             "multiplier": session.speed})
            elif kind == "commit":
                count = _commit(state, session)
                await reply({"v": PROTOCOL_V, "type": "committed",
                             "tuples_appended": count,
                             "replay_size": len(state.replay)})
                done.set()
            else:
                await reply({"v": PROTOCOL_V, "type": "error",
                             "message": f"unknown message type {kind!r}"})

        async def reader() -> None:
            try:
                while not done.is_set():
                    msg = await ws.receive_json()
                    await handle(msg)
            except (WebSocketDisconnect, RuntimeError):
                done.set()

        reader_task = asyncio.create_task(reader())
        try:
            while (session.cursor < total and not done.is_set()
                   and session.status == "streaming"):
                await reply(frame_message(stored, session.cursor))
                session.cursor += 1
                # One frame per 1/speed seconds: 20x streams 1200 frames/min.
                if session.speed < 1000:
                    await asyncio.sleep(1.0 / session.speed)
            if not done.is_set() and session.status == "streaming":
                await reply({"v": PROTOCOL_V, "type": "end",
                             "index": session.cursor})
                await asyncio.wait_for(done.wait(), timeout=300)
        except (WebSocketDisconnect, RuntimeError, asyncio.TimeoutError):
            pass
        finally:
            reader_task.cancel()

    return app
