"""Live coaching sessions over a WebSocket.

A session runs the same five-stage protocol as the offline study, but the
student is a remote client sending control inputs. The simulation advances
on a fixed 20 Hz tick; the latest input is held between frames (zero-order
hold) and treated as zero once stale. State messages stream newest-wins so
a slow client never stalls the loop, while inputs are never dropped.

SessionEngine is synchronous and deterministic: given the same input
sequence it produces the same trajectory as the offline simulator, which
is what makes recorded sessions replayable bit for bit.
"""

from __future__ import annotations

import asyncio
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blending import SaMode, UNASSISTED, skill_sa
from .metrics import trial_metrics
from .protocol import ConfigError, STAGE_PLAN, _json_line
from .simulate import SimSession, TRIAL_TIME_LIMIT
from .skills import ClusterMap, SkillLibrary, attach_annotations, load_annotations, segment_dp
from .track import Track
from .trajectory import from_samples, resample_1hz
from .vehicle import Action
from .zpd import average_trajectories, choose_skill, zpd_report, zpd_scores

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
TICK_RATE = 20.0
STALE_AFTER = 0.5           # seconds without input before holding zeros


@dataclass
class ServerConfig:
    track_path: str | None = None
    bank_dir: str | None = None
    library_path: str | None = None
    annotations_path: str | None = None
    cluster_map_path: str | None = None
    out_dir: str = "session_out"
    student_id: int = 0
    modeling_arm: str = "strong_sa"
    practice_arm: str = "skill_sa"
    practice_minutes: float = 5.0
    time_limit: float = TRIAL_TIME_LIMIT
    zpd_metric: str = "xyv"     # the study runner's speed-aware default
    zpd_speed_weight: float = 1.0
    lockstep: bool = False      # one tick per input message; for replay tests

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "ServerConfig":
        data = json.loads(Path(path).read_text())
        data.update(overrides)
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


def _bundled(name: str) -> str:
    return str(Path(__file__).parent / "data" / name)


class SessionEngine:
    """Deterministic tick engine for one live session.

    Pure state machine: feed inputs with :meth:`receive`, advance with
    :meth:`tick`, read the outgoing state message from the return value.
    The surrounding transport decides when ticks happen.
    """

    def __init__(self, track: Track, bank, library: SkillLibrary,
                 cmap: ClusterMap, annotations, config: ServerConfig):
        self.track = track
        self.bank = bank
        self.library = library
        self.cmap = cmap
        self.config = config
        self.dt = 1.0 / TICK_RATE
        demos_1hz = [resample_1hz(d, track) for d in bank.demos]
        self.expert_avg = average_trajectories(demos_1hz, track)
        self.expert_demo = demos_1hz[0]
        labels = attach_annotations(self.expert_demo, annotations)
        self.segmentation = segment_dp(self.expert_demo, track, labels, library)

        self.stage_idx = 0
        self.trial = 0
        self.tick_count = 0
        self.held = Action()
        self.last_input_tick: int | None = None
        self.last_seq: int | None = None
        self.stage_trajs: dict[int, list] = {}
        self.records: list[dict] = []
        self.zpd: dict | None = None
        self.recommended: str | None = None
        self.coached: str | None = None
        self.practice_ticks = 0
        self.done = False
        self.session = SimSession(track, bank, self._mode(), dt=self.dt)
        self._begin_trial()

    # -- protocol plumbing ----------------------------------------------

    def hello_reply(self, hello: dict) -> dict:
        if hello.get("type") != "hello":
            raise ConfigError("expected a hello message")
        if hello.get("version") != PROTOCOL_VERSION:
            raise ConfigError(f"protocol version mismatch: "
                              f"server {PROTOCOL_VERSION}, client {hello.get('version')}")
        return {
            "type": "track",
            "version": PROTOCOL_VERSION,
            "points": [[round(float(x), 3), round(float(y), 3)]
                       for x, y in self.track.centerline],
            "half_width": self.track.half_width,
            "start_index": self.track.start_index,
            "total_length": self.track.total_length,
            "tick_rate": TICK_RATE,
            "stage_plan": [list(p) for p in STAGE_PLAN],
        }

    def receive(self, msg: dict) -> None:
        kind = msg.get("type")
        if kind == "input":
            self.held = Action(
                steer=float(np.clip(msg.get("steer", 0.0), -1.0, 1.0)),
                throttle=float(np.clip(msg.get("throttle", 0.0), 0.0, 1.0)),
                brake=float(np.clip(msg.get("brake", 0.0), 0.0, 1.0)),
            )
            self.last_input_tick = self.tick_count
            if "seq" in msg:
                self.last_seq = int(msg["seq"])
        elif kind == "reset":
            self._begin_trial()
        else:
            log.warning("ignoring unknown message type %r", kind)

    # -- stage machinery --------------------------------------------------

    @property
    def stage(self) -> int:
        return STAGE_PLAN[self.stage_idx][0]

    @property
    def phase(self) -> str:
        if self.done:
            return "done"
        names = {1: "baseline", 2: "modeling", 3: "retention",
                 4: "practice", 5: "evaluation"}
        return names[self.stage]

    def _mode(self) -> SaMode:
        if self.done:
            return UNASSISTED
        if self.stage == 2:
            return SaMode.parse(self.config.modeling_arm)
        if self.stage == 4 and self.coached:
            return skill_sa(self.coached)
        return UNASSISTED

    def _begin_trial(self) -> None:
        self.session = SimSession(self.track, self.bank, self._mode(), dt=self.dt)
        self.armed = False
        self.t = 0.0
        self.completed_at: float | None = None
        self.travelled = 0.0
        self.prev_s, _ = self.track.project(self.session.state.x,
                                            self.session.state.y)
        self.states = [self.session.state]
        self.actions: list[Action] = []
        self.invasions = 0
        self.prev_off = False
        self.held = Action()

    def _finish_trial(self, completed: bool) -> None:
        self.actions.append(Action())
        traj = from_samples(self.states, self.actions, self.track, self.dt)
        traj_1hz = resample_1hz(traj, self.track)
        stage = self.stage
        self.stage_trajs.setdefault(stage, []).append(traj_1hz)
        rel = f"trajectories/s{self.config.student_id:03d}_stage{stage}_trial{self.trial}.csv"
        out_dir = Path(self.config.out_dir)
        (out_dir / "trajectories").mkdir(parents=True, exist_ok=True)
        traj_1hz.to_csv(out_dir / rel)
        tm = trial_metrics(traj_1hz, self.track, self.expert_avg,
                           self.config.time_limit)
        self.records.append({
            "student": self.config.student_id, "stage": stage,
            "trial": self.trial, "mode": str(self._mode()),
            "arm_modeling": self.config.modeling_arm,
            "arm_practice": self.config.practice_arm,
            "trajectory": rel, "completed": completed,
            "metrics": tm.to_dict(),
        })
        self.trial += 1
        if self.trial >= STAGE_PLAN[self.stage_idx][1]:
            self._advance_stage()
        else:
            self._begin_trial()

    def _advance_stage(self) -> None:
        self.trial = 0
        self.stage_idx += 1
        if self.stage_idx >= len(STAGE_PLAN):
            self.done = True
            self._begin_trial()
            return
        if self.stage == 4:
            self._enter_practice()
        else:
            self._begin_trial()

    def _enter_practice(self) -> None:
        try:
            unassisted = self.stage_trajs.get(1, []) + self.stage_trajs.get(3, [])
            student_avg = average_trajectories(unassisted, self.track)
            sa_avg = average_trajectories(self.stage_trajs[2], self.track)
            scores = zpd_scores(self.segmentation, self.expert_demo,
                                self.expert_avg, student_avg, sa_avg, self.track,
                                metric=self.config.zpd_metric,
                                speed_weight=self.config.zpd_speed_weight)
            decision = choose_skill(scores, self.library, self.cmap)
            self.zpd = zpd_report(scores, decision, self.library, self.cmap)
            self.recommended = decision.target_control
            if self.config.practice_arm == "skill_sa":
                self.coached = decision.target_control
        except (ValueError, KeyError) as exc:
            log.warning("coach decision unavailable: %s", exc)
        self.records.append({
            "student": self.config.student_id, "stage": 4, "trial": 0,
            "mode": str(skill_sa(self.coached) if self.coached else UNASSISTED),
            "arm_modeling": self.config.modeling_arm,
            "arm_practice": self.config.practice_arm,
            "practice": {"minutes": self.config.practice_minutes,
                         "coached": self.coached, "rollouts": 1},
            "zpd": self.zpd,
        })
        self.practice_ticks = 0
        self._begin_trial()

    # -- the tick ----------------------------------------------------------

    def tick(self) -> dict:
        """One 20 Hz frame. Mirrors the offline trial loop exactly: ticks
        are skipped (vehicle parked) until the first nonzero input, the
        executed blend is what gets recorded, and a completed lap keeps
        recording to the next whole second for the 1 Hz resampler."""
        stale = (self.last_input_tick is None or
                 (self.tick_count - self.last_input_tick) * self.dt > STALE_AFTER)
        student = Action() if stale else self.held
        self.tick_count += 1
        if not self.armed:
            if student == Action() or self.done:
                return self._state_message(None, stale)
            self.armed = True
        result = self.session.tick(student)
        self.states.append(result.state)
        self.actions.append(result.executed)
        self.t += self.dt
        s, _ = self.track.project(result.state.x, result.state.y)
        delta = s - self.prev_s
        half = self.track.total_length / 2.0
        if delta > half:
            delta -= self.track.total_length
        elif delta < -half:
            delta += self.track.total_length
        self.travelled += delta
        self.prev_s = s
        off = bool(self.track.is_off_track(result.state.x, result.state.y))
        if off and not self.prev_off:
            self.invasions += 1
        self.prev_off = off
        msg = self._state_message(result, stale)
        if not self.done:
            self._check_trial_end()
        return msg

    def _check_trial_end(self) -> None:
        if self.stage == 4:
            self.practice_ticks += 1
            if self.practice_ticks * self.dt >= self.config.practice_minutes * 60.0:
                self._advance_stage()
            return
        if self.completed_at is None and self.travelled >= self.track.total_length:
            self.completed_at = self.t
        if self.completed_at is not None and self.t >= math.ceil(self.completed_at):
            self._finish_trial(True)
        elif self.t >= self.config.time_limit:
            self._finish_trial(False)

    def _state_message(self, result, stale: bool) -> dict:
        st = result.state if result else self.session.state
        cfg = self.session.config
        msg = {
            "type": "state",
            "tick": self.tick_count,
            "x": st.x, "y": st.y, "heading": st.heading, "speed": st.speed,
            "alpha": {"steer": cfg.steer, "throttle": cfg.throttle,
                      "brake": cfg.brake},
            "blended": {"steer": result.executed.steer if result else 0.0,
                        "throttle": result.executed.throttle if result else 0.0,
                        "brake": result.executed.brake if result else 0.0},
            "phase": self.phase,
            "stage": None if self.done else self.stage,
            "trial": self.trial,
            "recommended_skill": self.recommended,
            "metrics": self._live_metrics(),
            "stale": stale,
            "reverted": bool(result.reverted) if result else False,
            "off_track": self.prev_off,
        }
        if self.last_seq is not None:
            msg["seq"] = self.last_seq
        return msg

    def _live_metrics(self) -> dict:
        return {
            "elapsed": round(self.t, 3),
            "progress": round(max(0.0, min(1.0, self.travelled / self.track.total_length)), 5),
            "lane_invasions": self.invasions,
        }

    # -- persistence -------------------------------------------------------

    def write_runlog(self, aborted: bool = False) -> Path:
        out_dir = Path(self.config.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        records = list(self.records)
        if aborted and not self.done:
            records.append({"student": self.config.student_id,
                            "stage": None if self.done else self.stage,
                            "aborted": True,
                            "arm_modeling": self.config.modeling_arm,
                            "arm_practice": self.config.practice_arm})
        path = out_dir / "runlog.jsonl"
        with open(path, "w") as fh:
            for rec in records:
                fh.write(_json_line(rec))
        return path


def load_engine(config: ServerConfig) -> SessionEngine:
    track = Track.load(config.track_path or _bundled("default_track.json"))
    if config.bank_dir:
        from .autopilot import ExpertBank
        bank = ExpertBank.load(config.bank_dir)
    else:
        from .autopilot import generate_expert_demos
        bank = generate_expert_demos(track)
    annotations = load_annotations(
        config.annotations_path or _bundled("annotations.json"))
    cmap = ClusterMap.load(config.cluster_map_path or _bundled("cluster_map.json"))
    if config.library_path:
        library = SkillLibrary.load(config.library_path)
    else:
        from .skills import fit_library
        demos = [resample_1hz(d, track) for d in bank.demos]
        library, _ = fit_library(demos, track, annotations, n_clusters=len(cmap))
    return SessionEngine(track, bank, library, cmap, annotations, config)


def build_app(config: ServerConfig, static_dir: str | Path | None = None):
    """FastAPI app exposing /session (WebSocket) and optional static files."""
    from fastapi import FastAPI, WebSocket, WebSocketDisconnect

    app = FastAPI(title="shared-autonomy coach")
    app.state.config = config

    @app.websocket("/session")
    async def session(ws: WebSocket):
        await ws.accept()
        try:
            hello = json.loads(await ws.receive_text())
            engine = load_engine(config)
            await ws.send_text(json.dumps(engine.hello_reply(hello),
                                          sort_keys=True))
        except ConfigError as exc:
            await ws.send_text(json.dumps({"type": "error", "message": str(exc)}))
            await ws.close()
            return
        inputs: asyncio.Queue = asyncio.Queue()      # unbounded: never drop
        outputs: asyncio.Queue = asyncio.Queue(maxsize=1)   # newest wins
        closed = {"type": "_closed"}

        async def reader():
            try:
                while True:
                    await inputs.put(json.loads(await ws.receive_text()))
            except Exception:
                await inputs.put(closed)

        async def writer():
            while True:
                msg = await outputs.get()
                await ws.send_text(json.dumps(msg, sort_keys=True))

        def push(msg: dict) -> None:
            if outputs.full():
                outputs.get_nowait()        # drop the stale frame
            outputs.put_nowait(msg)

        reader_task = asyncio.create_task(reader())
        writer_task = asyncio.create_task(writer())
        gone = False
        try:
            if config.lockstep:
                # one tick per client message; wall clock plays no part
                while not engine.done:
                    msg = await inputs.get()
                    if msg is closed:
                        gone = True
                        break
                    engine.receive(msg)
                    push(engine.tick())
            else:
                tick_period = 1.0 / TICK_RATE
                loop = asyncio.get_running_loop()
                next_tick = loop.time()
                while not engine.done and not gone:
                    while not inputs.empty():
                        msg = inputs.get_nowait()
                        if msg is closed:
                            gone = True
                        else:
                            engine.receive(msg)
                    if gone:
                        break
                    push(engine.tick())
                    next_tick += tick_period
                    delay = next_tick - loop.time()
                    if delay > 0:
                        await asyncio.sleep(delay)
                    else:
                        next_tick = loop.time()
            engine.write_runlog(aborted=not engine.done)
        except WebSocketDisconnect:
            engine.write_runlog(aborted=True)
        finally:
            reader_task.cancel()
            writer_task.cancel()

    if static_dir and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles
        app.mount("/", StaticFiles(directory=str(static_dir), html=True),
                  name="cockpit")
    return app


def serve(config: ServerConfig, host: str = "127.0.0.1", port: int = 8700,
          static_dir: str | Path | None = None) -> None:
    import uvicorn
    uvicorn.run(build_app(config, static_dir), host=host, port=port,
                log_level="info")
