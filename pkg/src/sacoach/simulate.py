"""Blended-control rollouts: one engine shared by offline trials and the
live session server, so replays of identical inputs are identical by
construction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autopilot import AutopilotController, ExpertBank, PidGains
from .blending import SaMode, apply_revert, blend, mode_to_config
from .track import Track
from .trajectory import Trajectory, from_samples
from .vehicle import Action, VehicleParams, VehicleState, step

REVERT_MARGIN = 2.0     # m beyond half-width before assistance cuts out
TICK_DT = 0.05
TRIAL_TIME_LIMIT = 180.0

ZERO_ACTION = Action(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TickResult:
    state: VehicleState          # state after stepping
    agent_action: Action
    executed: Action
    lateral_offset: float        # offset used for the revert decision
    reverted: bool


class SimSession:
    """Fixed-tick shared-autonomy simulation around one vehicle.

    Every tick: the autopilot proposes an action for the current state, the
    student's action is blended per the session mode (assistance reverting
    to zero whenever the car is beyond the revert threshold), and the
    vehicle steps forward by dt.
    """

    def __init__(self, track: Track, bank: ExpertBank, mode: SaMode,
                 gains: PidGains | None = None,
                 params: VehicleParams | None = None,
                 dt: float = TICK_DT,
                 start_state: VehicleState | None = None):
        self.track = track
        self.mode = mode
        self.config = mode_to_config(mode)
        self.params = params or VehicleParams()
        self.dt = float(dt)
        self.controller = AutopilotController(bank, gains or PidGains(), self.dt)
        self.revert_threshold = track.half_width + REVERT_MARGIN
        if start_state is None:
            start_state = self.start_line_state()
        self.state = start_state

    def start_line_state(self) -> VehicleState:
        # rolling start at the demos' entry pace, so trial laps cover the
        # same speed regime the expert reference was recorded at
        p = self.track.point_at(0.0)
        v0 = float(self.controller.bank.demos[0].speed[0])
        return VehicleState(x=float(p[0]), y=float(p[1]),
                            heading=self.track.tangent_heading_at(0.0), speed=v0)

    def set_mode(self, mode: SaMode) -> None:
        self.mode = mode
        self.config = mode_to_config(mode)

    def reset(self, state: VehicleState | None = None) -> None:
        self.state = state if state is not None else self.start_line_state()
        self.controller.reset()

    def agent_action(self) -> Action:
        """Peek the autopilot's proposal for the current state without
        advancing controller memory."""
        action, _ = self.controller.peek(self.state)
        return action

    def tick(self, student_action: Action) -> TickResult:
        agent_action, _ = self.controller.action(self.state)
        _, d = self.track.project(self.state.x, self.state.y)
        cfg = apply_revert(self.config, d, self.revert_threshold)
        reverted = cfg != self.config
        executed = blend(agent_action, student_action, cfg)
        self.state = step(self.state, executed, self.dt, self.params)
        return TickResult(state=self.state, agent_action=agent_action,
                          executed=executed, lateral_offset=float(d),
                          reverted=reverted)


@dataclass
class TrialResult:
    trajectory: Trajectory       # raw tick-rate recording, clock from first input
    completed: bool
    wait_ticks: int              # ticks discarded before the first control input


def run_trial(session: SimSession, student, time_limit: float = TRIAL_TIME_LIMIT,
              max_wait: float = 10.0) -> TrialResult:
    """Roll one trial: record from the student's first nonzero input until a
    lap closes or the limit elapses.

    The recording clock starts at the first nonzero student action; idle
    ticks before it neither advance the clock nor appear in the output.
    After completion the rollout keeps recording to the next whole second so
    1 Hz resampling still sees the crossing.
    """
    track = session.track
    total = track.total_length
    dt = session.dt
    states = [session.state]
    actions: list[Action] = []
    started = False
    wait_ticks = 0
    travelled = 0.0
    prev_s, _ = track.project(session.state.x, session.state.y)
    t = 0.0
    completed_at: float | None = None
    max_ticks = int(round((time_limit + 1.0) / dt)) + 1
    for _ in range(max_ticks):
        expert_action = session.agent_action()
        student_action = student.act(session.state, expert_action)
        if not started:
            if student_action == ZERO_ACTION:
                wait_ticks += 1
                if wait_ticks * dt >= max_wait:
                    break
                continue
            started = True
        result = session.tick(student_action)
        actions.append(result.executed)
        states.append(result.state)
        t += dt
        s, _ = track.project(result.state.x, result.state.y)
        delta = s - prev_s
        if delta > total / 2.0:
            delta -= total
        elif delta < -total / 2.0:
            delta += total
        travelled += delta
        prev_s = s
        if completed_at is None and travelled >= total:
            completed_at = t
        if completed_at is not None and t >= math.ceil(completed_at):
            break
        if t >= time_limit:
            break
    if not actions:
        # student never touched the controls; emit a one-tick standstill
        session.tick(ZERO_ACTION)
        states = [states[0], session.state]
        actions = [ZERO_ACTION]
    actions.append(ZERO_ACTION)
    traj = from_samples(states, actions, track, dt)
    return TrialResult(trajectory=traj, completed=completed_at is not None,
                       wait_ticks=wait_ticks)


@dataclass(frozen=True)
class PracticeLog:
    minutes: float
    rollouts: int
    sim_seconds: float


def run_practice(session: SimSession, student, minutes: float,
                 rollout_seconds: float = 20.0, rollouts: int = 1) -> PracticeLog:
    """Practice block: short partial-lap rollouts with resets.

    What the student learns depends only on the practice minutes (see
    practice_update); the rollouts exist so live and simulated sessions
    exercise the same machinery.
    """
    sim_s = 0.0
    for _ in range(rollouts):
        session.reset()
        ticks = int(round(rollout_seconds / session.dt))
        for _ in range(ticks):
            expert_action = session.agent_action()
            session.tick(student.act(session.state, expert_action))
            sim_s += session.dt
    return PracticeLog(minutes=float(minutes), rollouts=rollouts, sim_seconds=sim_s)
