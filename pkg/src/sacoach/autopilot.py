"""Reference-following autopilot: nearest-demo lookup plus PID tracking.

The agent policy follows recorded expert laps: find the nearest expert
sample to the current position, aim at a state a fixed interval further
along that demo, and track it with two PID loops (steering on a geometric
error, speed on the target's speed). The same controller, pointed at a
synthetic centerline reference, generates the expert demos in the first
place.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .track import Track
from .trajectory import Trajectory, from_samples, net_progress
from .vehicle import Action, VehicleParams, VehicleState, clamp, step, wrap_angle

GRID_CELL = 5.0           # m, spatial hash cell for nearest-sample queries
DEFAULT_LOOKAHEAD = 40    # samples ahead in the matched demo (2 s at 20 Hz)
DEMO_TIME_LIMIT = 180.0   # s, a clean demo lap must finish within this


@dataclass(frozen=True)
class PidGains:
    """Controller gains; tuned via the clean-lap rollout check, kept in config."""

    steer_kp: float = 1.8
    steer_ki: float = 0.0
    steer_kd: float = 0.3
    # the speed loop is stiff on purpose: following a recorded lap through a
    # 2 s lookahead softens every speed transient, and a soft loop would
    # barely touch the brake when tracking an already-anticipated profile
    speed_kp: float = 1.4
    speed_ki: float = 0.1
    speed_kd: float = 0.0
    cross_track_gain: float = 0.35  # rad of error per meter off the chord
    integral_limit: float = 3.0

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in (
            "steer_kp", "steer_ki", "steer_kd", "speed_kp", "speed_ki",
            "speed_kd", "cross_track_gain", "integral_limit")}

    @classmethod
    def from_dict(cls, data: dict) -> "PidGains":
        return cls(**{k: float(v) for k, v in data.items()})


@dataclass
class PidMemory:
    """Mutable per-session controller state; never shared across sessions."""

    steer_integral: float = 0.0
    steer_last_error: float | None = None
    speed_integral: float = 0.0
    speed_last_error: float | None = None

    def reset(self) -> None:
        self.steer_integral = 0.0
        self.steer_last_error = None
        self.speed_integral = 0.0
        self.speed_last_error = None


@dataclass(frozen=True)
class NearestPoint:
    demo: int
    index: int
    distance: float


class ExpertBank:
    """Expert demo laps with a uniform-grid index over sample positions."""

    def __init__(self, demos: list[Trajectory], lookahead: int = DEFAULT_LOOKAHEAD):
        if not demos:
            raise ValueError("expert bank needs at least one demo")
        if lookahead < 1:
            raise ValueError("lookahead must be at least one sample")
        self.demos = list(demos)
        self.lookahead = int(lookahead)
        xy = [d.xy for d in self.demos]
        self._points = np.vstack(xy)
        counts = [len(d) for d in self.demos]
        self._offsets = np.concatenate(([0], np.cumsum(counts)))
        self._demo_of = np.repeat(np.arange(len(self.demos)), counts)
        self._grid: dict[tuple[int, int], np.ndarray] = {}
        cells = np.floor(self._points / GRID_CELL).astype(int)
        order = np.arange(self._points.shape[0])
        for key_arr, idx in zip(cells, order):
            key = (int(key_arr[0]), int(key_arr[1]))
            self._grid.setdefault(key, []).append(idx)  # type: ignore[arg-type]
        self._grid = {k: np.asarray(v, dtype=int) for k, v in self._grid.items()}

    def __len__(self) -> int:
        return len(self.demos)

    def flat_state(self, flat_index: int) -> tuple[int, int]:
        demo = int(self._demo_of[flat_index])
        return demo, int(flat_index - self._offsets[demo])

    def nearest(self, x: float, y: float) -> NearestPoint:
        """Nearest sample by 2D Euclidean distance across all demos.

        Ties break toward the lowest (demo, sample) pair. Searches the grid
        in expanding rings and stops once no farther ring can contain a
        closer point.
        """
        cx = int(math.floor(x / GRID_CELL))
        cy = int(math.floor(y / GRID_CELL))
        best_idx = -1
        best_d2 = math.inf
        ring = 0
        max_ring = 2 + int(np.abs(self._points).max() / GRID_CELL) * 2
        while ring <= max_ring:
            candidates = []
            if ring == 0:
                cells = [(cx, cy)]
            else:
                cells = []
                for dx in range(-ring, ring + 1):
                    cells.append((cx + dx, cy - ring))
                    cells.append((cx + dx, cy + ring))
                for dy in range(-ring + 1, ring):
                    cells.append((cx - ring, cy + dy))
                    cells.append((cx + ring, cy + dy))
            for key in cells:
                got = self._grid.get(key)
                if got is not None:
                    candidates.append(got)
            if candidates:
                idx = np.sort(np.concatenate(candidates))
                diff = self._points[idx] - (x, y)
                d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2
                j = int(np.argmin(d2))
                if d2[j] < best_d2:
                    best_d2 = float(d2[j])
                    best_idx = int(idx[j])
            # Any point in ring k+1 is at least k * cell away from the query.
            if best_idx >= 0 and (ring * GRID_CELL) ** 2 > best_d2:
                break
            ring += 1
        if best_idx < 0:
            # query far outside the demo cloud (runaway vehicle): the grid is
            # only an accelerator, so fall back to the exhaustive scan
            diff = self._points - (x, y)
            d2 = diff[:, 0] ** 2 + diff[:, 1] ** 2
            best_idx = int(np.argmin(d2))
            best_d2 = float(d2[best_idx])
        demo, index = self.flat_state(best_idx)
        return NearestPoint(demo=demo, index=index, distance=math.sqrt(best_d2))

    def lookahead_target(self, near: NearestPoint, interval: int | None = None) -> VehicleState:
        """Expert state a fixed number of samples past the matched one, wrapping."""
        interval = self.lookahead if interval is None else int(interval)
        if interval < 1:
            raise ValueError("lookahead interval must be >= 1")
        demo = self.demos[near.demo]
        idx = (near.index + interval) % len(demo)
        return demo.state_at(idx)

    def near_state(self, near: NearestPoint) -> VehicleState:
        return self.demos[near.demo].state_at(near.index)

    # -- persistence ----------------------------------------------------------

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        names = []
        for i, demo in enumerate(self.demos):
            name = f"demo_{i:03d}.csv"
            demo.to_csv(directory / name)
            names.append(name)
        manifest = {"demos": names, "dt": self.demos[0].dt, "lookahead": self.lookahead}
        (directory / "bank.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory: str | Path) -> "ExpertBank":
        directory = Path(directory)
        manifest = json.loads((directory / "bank.json").read_text())
        demos = [
            Trajectory.from_csv(directory / name, dt=float(manifest["dt"]))
            for name in manifest["demos"]
        ]
        return cls(demos, lookahead=int(manifest.get("lookahead", DEFAULT_LOOKAHEAD)))


def pid_control(
    state: VehicleState,
    target: VehicleState,
    gains: PidGains,
    memory: PidMemory,
    dt: float,
    chord_start: tuple[float, float] | None = None,
) -> Action:
    """Track a target state with separate steering and speed PID loops.

    Steering acts on the heading error toward the target plus a weighted
    signed cross-track error to the chord running from ``chord_start``
    (normally the matched expert sample) to the target. The speed loop's
    output splits into throttle when positive and brake when negative, so
    the two are never engaged together.
    """
    dx = target.x - state.x
    dy = target.y - state.y
    if dx * dx + dy * dy < 1e-12:
        heading_error = wrap_angle(target.heading - state.heading)
    else:
        heading_error = wrap_angle(math.atan2(dy, dx) - state.heading)

    cross_track = 0.0
    if chord_start is not None:
        ux = target.x - chord_start[0]
        uy = target.y - chord_start[1]
        norm = math.hypot(ux, uy)
        if norm > 1e-9:
            px = state.x - chord_start[0]
            py = state.y - chord_start[1]
            # Positive when the car sits right of the chord: steer left.
            cross_track = -(ux * py - uy * px) / norm

    error = heading_error + gains.cross_track_gain * cross_track
    memory.steer_integral = clamp(
        memory.steer_integral + error * dt, -gains.integral_limit, gains.integral_limit
    )
    derivative = 0.0
    if memory.steer_last_error is not None:
        derivative = (error - memory.steer_last_error) / dt
    memory.steer_last_error = error
    steer = clamp(
        gains.steer_kp * error + gains.steer_ki * memory.steer_integral + gains.steer_kd * derivative,
        -1.0, 1.0,
    )

    speed_error = target.speed - state.speed
    memory.speed_integral = clamp(
        memory.speed_integral + speed_error * dt, -gains.integral_limit, gains.integral_limit
    )
    speed_derivative = 0.0
    if memory.speed_last_error is not None:
        speed_derivative = (speed_error - memory.speed_last_error) / dt
    memory.speed_last_error = speed_error
    u = (
        gains.speed_kp * speed_error
        + gains.speed_ki * memory.speed_integral
        + gains.speed_kd * speed_derivative
    )
    if u >= 0.0:
        return Action(steer=steer, throttle=clamp(u, 0.0, 1.0), brake=0.0)
    return Action(steer=steer, throttle=0.0, brake=clamp(-u, 0.0, 1.0))


class AutopilotController:
    """Stateful agent policy: nearest sample, lookahead target, PID tracking."""

    def __init__(self, bank: ExpertBank, gains: PidGains, dt: float):
        self.bank = bank
        self.gains = gains
        self.dt = dt
        self.memory = PidMemory()

    def reset(self) -> None:
        self.memory.reset()

    def action(self, state: VehicleState) -> tuple[Action, NearestPoint]:
        near = self.bank.nearest(state.x, state.y)
        target = self.bank.lookahead_target(near)
        near_state = self.bank.near_state(near)
        act = pid_control(
            state, target, self.gains, self.memory, self.dt,
            chord_start=(near_state.x, near_state.y),
        )
        return act, near

    def peek(self, state: VehicleState) -> tuple[Action, NearestPoint]:
        """The action a subsequent action() call would return, with no
        controller memory side effects."""
        saved = replace(self.memory)
        try:
            return self.action(state)
        finally:
            self.memory = saved


# -- demo generation ----------------------------------------------------------


def braking_aware_speeds(track: Track, decel: float = 5.6) -> np.ndarray:
    """Target speeds limited so each point is reachable under finite braking.

    Backward passes around the loop cap every point by how fast the car may
    still be going and slow down in time for the next corner. The track's
    published curvature profile stays untouched; this is only the reference
    the demo-lap autopilot chases. The default keeps comfortable pedal margin
    below the vehicle's peak so the reference stays trackable even when a
    trainee's inputs are blended in on top of it.
    """
    v = track.target_speed_profile.copy()
    ds = np.roll(track.cum_s, -1) - track.cum_s
    ds[-1] = track.total_length - track.cum_s[-1]
    for _ in range(2):
        for i in range(len(v) - 1, -1, -1):
            j = (i + 1) % len(v)
            v[i] = min(v[i], math.sqrt(v[j] ** 2 + 2.0 * decel * ds[i]))
    return v


def centerline_reference(track: Track, ref_dt: float = 0.1,
                         speed_scale: float = 1.0) -> Trajectory:
    """Synthetic demo lap along the centerline at braking-aware speeds.

    Resampled uniformly in time so a fixed sample lookahead scans ahead
    proportionally to speed, like on a recorded lap. ``speed_scale``
    shifts the whole pace of the lap without touching the line.
    """
    speeds = braking_aware_speeds(track) * speed_scale
    n = track.n_points
    order = (np.arange(n + 1) + track.start_index) % n
    pts = track.centerline[order]
    v = speeds[order]
    seg = np.diff(pts, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    pair_v = np.maximum(0.5 * (v[:-1] + v[1:]), 0.1)
    times = np.concatenate(([0.0], np.cumsum(seg_len / pair_v)))
    grid = np.arange(0.0, times[-1], ref_dt)
    x = np.interp(grid, times, pts[:, 0])
    y = np.interp(grid, times, pts[:, 1])
    speed = np.interp(grid, times, v)
    heading = np.arctan2(np.gradient(y), np.gradient(x))
    progress, lateral = track.project_many(np.column_stack([x, y]))
    zeros = np.zeros_like(grid)
    return Trajectory(
        t=grid, x=x, y=y, heading=heading, speed=speed,
        steer=zeros, throttle=zeros, brake=zeros,
        progress=progress, off_track=np.abs(lateral) > track.half_width,
        dt=ref_dt,
    )


def drive_lap(
    track: Track,
    bank: ExpertBank,
    gains: PidGains,
    params: VehicleParams,
    start: VehicleState,
    dt: float = 0.05,
    time_cap: float = 300.0,
) -> Trajectory:
    """Roll the pure autopilot from ``start`` until one full lap or the cap."""
    controller = AutopilotController(bank, gains, dt)
    states = [start]
    actions: list[Action] = []
    state = start
    lap_done = False
    travelled = 0.0
    last_s, _ = track.project(state.x, state.y)
    half = track.total_length / 2.0
    while state.time < time_cap:
        act, _ = controller.action(state)
        actions.append(act)
        state = step(state, act, dt, params)
        states.append(state)
        s, _ = track.project(state.x, state.y)
        delta = s - last_s
        if delta > half:
            delta -= track.total_length
        elif delta < -half:
            delta += track.total_length
        travelled += delta
        last_s = s
        if travelled >= track.total_length:
            lap_done = True
            break
    actions.append(Action())
    if not lap_done:
        raise RuntimeError(
            f"autopilot failed to close a lap within {time_cap:.0f} s "
            f"(covered {travelled:.0f} m of {track.total_length:.0f} m)"
        )
    return from_samples(states, actions, track, dt)


def generate_expert_demos(
    track: Track,
    k: int = 5,
    seed: int = 0,
    gains: PidGains | None = None,
    params: VehicleParams | None = None,
    dt: float = 0.05,
    lookahead: int = DEFAULT_LOOKAHEAD,
    pace_spread: float = 0.0,
) -> ExpertBank:
    """Record ``k`` clean autopilot laps and wrap them in a bank.

    Each lap starts from the start line with a small seeded jitter in
    lateral offset and heading, and chases the reference at its own pace
    (scales spread evenly over [1 - pace_spread, 1]), so the bank shows
    the same line driven at several speeds. Any lap that misses the time
    budget or leaves the lane aborts with a diagnostic; expert data is
    only ever clean.
    """
    if k < 1:
        raise ValueError("need at least one demo")
    if not 0.0 <= pace_spread < 1.0:
        raise ValueError("pace_spread must be in [0, 1)")
    gains = gains or PidGains()
    params = params or VehicleParams()
    scales = np.linspace(1.0, 1.0 - pace_spread, k)
    # flying laps: a discarded warm-up lap settles the controller, so the
    # recorded lap starts at the speed it naturally carries across the line
    # and is free of a launch transient no later lap would revisit
    v_line = float(braking_aware_speeds(track)[track.start_index])
    origin = track.point_at(0.0)
    line_heading = track.tangent_heading_at(0.0)
    demos: list[Trajectory] = []
    for i in range(k):
        reference = ExpertBank(
            [centerline_reference(track, speed_scale=float(scales[i]))],
            lookahead=20)
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(i,)))
        lateral = float(rng.uniform(-0.5, 0.5))
        heading_jitter = float(rng.normal(0.0, 0.01))
        warm_start = VehicleState(
            x=float(origin[0]), y=float(origin[1]), heading=line_heading,
            speed=v_line * float(scales[i]), time=0.0)
        warm = drive_lap(track, reference, gains, params, warm_start, dt=dt)
        heading = float(warm.heading[-1])
        normal = (math.cos(heading + math.pi / 2.0), math.sin(heading + math.pi / 2.0))
        start = VehicleState(
            x=float(warm.x[-1] + normal[0] * lateral),
            y=float(warm.y[-1] + normal[1] * lateral),
            heading=wrap_angle(heading + heading_jitter),
            speed=float(warm.speed[-1]),
            time=0.0,
        )
        lap = drive_lap(track, reference, gains, params, start, dt=dt)
        lap_time = lap.duration
        invasions = int(np.sum(lap.off_track))
        if lap_time >= DEMO_TIME_LIMIT or invasions > 0:
            raise RuntimeError(
                f"demo {i} is not clean: lap_time={lap_time:.1f} s, "
                f"off-track samples={invasions}"
            )
        demos.append(lap)
    return ExpertBank(demos, lookahead=lookahead)
