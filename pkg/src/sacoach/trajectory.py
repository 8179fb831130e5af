"""Recorded drive data: sample arrays, CSV round-trip, 1 Hz resampling."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .track import Track
from .vehicle import Action, VehicleState

CSV_HEADER = ["t", "x", "y", "heading", "speed", "steer", "throttle", "brake", "progress", "off_track"]


@dataclass
class Trajectory:
    """A sequence of (state, action) samples with track progress.

    All fields are float64 arrays of equal length except ``off_track`` which
    is boolean. ``dt`` is the nominal sample period; per-sample times are
    authoritative and must be strictly increasing.
    """

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    heading: np.ndarray
    speed: np.ndarray
    steer: np.ndarray
    throttle: np.ndarray
    brake: np.ndarray
    progress: np.ndarray
    off_track: np.ndarray
    dt: float = field(default=0.05)

    def __post_init__(self) -> None:
        arrays = [self.t, self.x, self.y, self.heading, self.speed,
                  self.steer, self.throttle, self.brake, self.progress, self.off_track]
        n = len(self.t)
        if n == 0:
            raise ValueError("trajectory must have at least one sample")
        for a in arrays:
            if len(a) != n:
                raise ValueError("trajectory arrays must share one length")
        if n > 1 and not np.all(np.diff(self.t) > 0.0):
            raise ValueError("sample times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    def state_at(self, i: int) -> VehicleState:
        return VehicleState(
            x=float(self.x[i]), y=float(self.y[i]), heading=float(self.heading[i]),
            speed=float(self.speed[i]), time=float(self.t[i]),
        )

    def action_at(self, i: int) -> Action:
        return Action(
            steer=float(self.steer[i]), throttle=float(self.throttle[i]),
            brake=float(self.brake[i]),
        )

    def slice(self, start: int, stop: int) -> "Trajectory":
        return Trajectory(
            t=self.t[start:stop], x=self.x[start:stop], y=self.y[start:stop],
            heading=self.heading[start:stop], speed=self.speed[start:stop],
            steer=self.steer[start:stop], throttle=self.throttle[start:stop],
            brake=self.brake[start:stop], progress=self.progress[start:stop],
            off_track=self.off_track[start:stop], dt=self.dt,
        )

    # -- CSV round trip -------------------------------------------------------

    def to_csv(self, path: str | Path | None = None) -> str | None:
        """Write SI-unit CSV; floats use repr so the round trip is exact."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for i in range(len(self)):
            writer.writerow([
                repr(float(self.t[i])), repr(float(self.x[i])), repr(float(self.y[i])),
                repr(float(self.heading[i])), repr(float(self.speed[i])),
                repr(float(self.steer[i])), repr(float(self.throttle[i])),
                repr(float(self.brake[i])), repr(float(self.progress[i])),
                "1" if self.off_track[i] else "0",
            ])
        text = buf.getvalue()
        if path is None:
            return text
        Path(path).write_text(text)
        return None

    @classmethod
    def from_csv(cls, path: str | Path, dt: float | None = None) -> "Trajectory":
        return cls.from_csv_text(Path(path).read_text(), dt=dt)

    @classmethod
    def from_csv_text(cls, text: str, dt: float | None = None) -> "Trajectory":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ValueError(f"bad trajectory header: {header}")
        cols: list[list[float]] = [[] for _ in CSV_HEADER]
        for row in reader:
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise ValueError(f"bad trajectory row: {row}")
            for c, value in zip(cols, row):
                c.append(float(value))
        arrays = [np.asarray(c, dtype=float) for c in cols]
        if dt is None:
            dt = float(arrays[0][1] - arrays[0][0]) if len(arrays[0]) > 1 else 1.0
        return cls(
            t=arrays[0], x=arrays[1], y=arrays[2], heading=arrays[3], speed=arrays[4],
            steer=arrays[5], throttle=arrays[6], brake=arrays[7], progress=arrays[8],
            off_track=arrays[9].astype(bool), dt=dt,
        )


def from_samples(states: list[VehicleState], actions: list[Action],
                 track: Track, dt: float) -> Trajectory:
    """Build a trajectory from rollout samples, projecting progress."""
    if len(states) != len(actions):
        raise ValueError("states and actions must pair up")
    xy = np.array([[s.x, s.y] for s in states], dtype=float)
    progress, lateral = track.project_many(xy)
    return Trajectory(
        t=np.array([s.time for s in states]),
        x=xy[:, 0], y=xy[:, 1],
        heading=np.array([s.heading for s in states]),
        speed=np.array([s.speed for s in states]),
        steer=np.array([a.steer for a in actions]),
        throttle=np.array([a.throttle for a in actions]),
        brake=np.array([a.brake for a in actions]),
        progress=progress,
        off_track=np.abs(lateral) > track.half_width,
        dt=dt,
    )


def resample_1hz(traj: Trajectory, track: Track) -> Trajectory:
    """Resample onto the 1-second grid covering the trajectory's time span.

    State and action channels are linearly interpolated (heading via unwrap
    so interpolation takes the short way around). Progress and the off-track
    flag are recomputed by projecting the interpolated position, which keeps
    them consistent with the track rather than blindly interpolating across
    the start line.
    """
    t0, t1 = float(traj.t[0]), float(traj.t[-1])
    start = math.ceil(t0 - 1e-9)
    stop = math.floor(t1 + 1e-9)
    if stop < start:
        raise ValueError("trajectory spans no 1 Hz sample point")
    ts = np.arange(start, stop + 1, dtype=float)

    def lerp(values: np.ndarray) -> np.ndarray:
        return np.interp(ts, traj.t, values)

    heading = np.interp(ts, traj.t, np.unwrap(traj.heading))
    heading = np.mod(heading + np.pi, 2.0 * np.pi) - np.pi
    heading = np.where(heading <= -np.pi, heading + 2.0 * np.pi, heading)
    x = lerp(traj.x)
    y = lerp(traj.y)
    progress, lateral = track.project_many(np.column_stack([x, y]))
    return Trajectory(
        t=ts, x=x, y=y, heading=heading,
        speed=lerp(traj.speed),
        steer=lerp(traj.steer), throttle=lerp(traj.throttle), brake=lerp(traj.brake),
        progress=progress,
        off_track=np.abs(lateral) > track.half_width,
        dt=1.0,
    )


def net_progress(traj: Trajectory, total_length: float) -> np.ndarray:
    """Cumulative signed progress from the first sample, unwrapped at the lap line."""
    deltas = np.diff(traj.progress)
    half = total_length / 2.0
    deltas = np.where(deltas > half, deltas - total_length, deltas)
    deltas = np.where(deltas < -half, deltas + total_length, deltas)
    return np.concatenate(([0.0], np.cumsum(deltas)))
