"""Zone-of-proximal-development estimation and the coaching decision.

Assisted and unassisted trajectories are compared segment by segment against
the segmented expert lap; the per-skill gap, weighted by segment-skill
posteriors, ranks which control channel coaching should target.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .metrics import dtw
from .skills import ClusterMap, Segmentation, SkillLibrary, skill_to_control
from .track import Track
from .trajectory import Trajectory, net_progress

BIN_METERS = 10.0
SPEED_WEIGHT = 1.0     # m of position error equivalent to 1 m/s of speed error
HEADING_WEIGHT = 2.0   # m of position error equivalent to a unit heading-vector gap
COACHABLE = ("steer", "throttle", "brake")


def _bin_centers(total_length: float) -> np.ndarray:
    """Center of each progress bin; the last bin absorbs the leftover arc."""
    edges = np.arange(0.0, total_length, BIN_METERS)
    edges = np.append(edges, total_length)
    return 0.5 * (edges[:-1] + edges[1:])


def _sample_at_bins(traj: Trajectory, track: Track) -> dict[int, np.ndarray]:
    """One interpolated state row per progress bin the trajectory drives through.

    Samples arrive sparser than BIN_METERS at speed, so the trajectory is
    read at each bin center by linear interpolation along its own unwrapped
    progress. A bin counts as empty only when the car never reached it; the
    first traversal wins if the car passes a bin twice. Rows hold
    (x, y, sin h, cos h, speed, steer, throttle, brake).
    """
    length = track.total_length
    u = traj.progress[0] + net_progress(traj, length)
    u = np.maximum.accumulate(u)   # projection jitter must not break interp
    lo, hi = float(u[0]), float(u[-1])
    centers = _bin_centers(length)
    fields = np.column_stack([
        traj.x, traj.y, np.sin(traj.heading), np.cos(traj.heading),
        traj.speed, traj.steer, traj.throttle, traj.brake,
    ])
    out: dict[int, np.ndarray] = {}
    for k, c in enumerate(centers):
        lap = math.ceil((lo - c) / length)
        cu = c + lap * length
        if not lo <= cu <= hi:
            continue
        out[k] = np.array([np.interp(cu, u, col) for col in fields.T])
    return out


def average_trajectories(trajs: list[Trajectory], track: Track) -> Trajectory:
    """Pointwise mean trajectory over progress bins of BIN_METERS arclength.

    Each input contributes its interpolated state at every bin center it
    covered; bins any input never reached are skipped, so truncated runs
    shrink the common support instead of polluting it. Position, speed, and
    actions average arithmetically, headings circularly. The result is
    ordered by progress with a synthetic 1 Hz clock, which downstream
    alignment and DTW ignore.
    """
    if not trajs:
        raise ValueError("no trajectories to average")
    per_traj = [_sample_at_bins(traj, track) for traj in trajs]
    common = set(per_traj[0])
    for rows in per_traj[1:]:
        common &= set(rows)
    if not common:
        raise ValueError("trajectories share no covered progress bins")
    order = sorted(common)
    mean = np.mean([[rows[k] for k in order] for rows in per_traj], axis=0)
    x, y, sin_h, cos_h, speed, steer, throttle, brake = mean.T
    s, d = track.project_many(np.column_stack([x, y]))
    return Trajectory(
        t=np.arange(len(order), dtype=float),
        x=x, y=y,
        heading=np.arctan2(sin_h, cos_h),
        speed=speed, steer=steer, throttle=throttle, brake=brake,
        progress=s, off_track=track.is_off_track(d).astype(bool),
        dt=1.0,
    )


def segment_intervals(seg: Segmentation, expert: Trajectory) -> list[tuple[float, float]]:
    """Progress interval [start, end] of each segment of the segmented demo."""
    out = []
    for lo, hi in seg.segment_slices():
        out.append((float(expert.progress[lo]), float(expert.progress[hi - 1])))
    return out


def align(traj: Trajectory, interval: tuple[float, float],
          total_length: float) -> Trajectory | None:
    """Maximal contiguous run of samples inside a progress interval.

    The interval may wrap the start line (start > end). A run touching both
    ends of the sample array is joined across the wrap, which keeps laps and
    progress-ordered averages contiguous through the start line. Returns
    None when no sample falls inside.
    """
    lo, hi = interval
    p = np.mod(traj.progress, total_length)
    if lo <= hi:
        mask = (p >= lo) & (p <= hi)
    else:
        mask = (p >= lo) | (p <= hi)
    if not mask.any():
        return None
    if mask.all():
        return traj
    # runs of consecutive True
    padded = np.concatenate([[False], mask, [False]])
    starts = np.nonzero(padded[1:].astype(int) - padded[:-1].astype(int) == 1)[0]
    ends = np.nonzero(padded[1:].astype(int) - padded[:-1].astype(int) == -1)[0]
    runs = [(int(a), int(b)) for a, b in zip(starts, ends)]
    joined = None
    if len(runs) >= 2 and runs[0][0] == 0 and runs[-1][1] == len(mask):
        # wraparound: the tail run continues into the head run
        joined = (runs[-1][0], runs[0][1], True)
        runs = runs[1:-1]
    candidates = [(b - a, -a, (a, b, False)) for a, b in runs]
    if joined is not None:
        a, b, _ = joined
        candidates.append(((len(mask) - a) + b, -a, joined))
    if not candidates:
        return None
    _, _, (a, b, wrapped) = max(candidates)
    if not wrapped:
        return traj.slice(a, b)
    idx = np.concatenate([np.arange(a, len(mask)), np.arange(0, b)])
    return _take(traj, idx)


def _take(traj: Trajectory, idx: np.ndarray) -> Trajectory:
    return Trajectory(
        t=np.arange(len(idx), dtype=float),
        x=traj.x[idx], y=traj.y[idx], heading=traj.heading[idx],
        speed=traj.speed[idx], steer=traj.steer[idx],
        throttle=traj.throttle[idx], brake=traj.brake[idx],
        progress=traj.progress[idx], off_track=traj.off_track[idx],
        dt=traj.dt,
    )


def _metric_columns(traj: Trajectory, metric: str, speed_weight: float,
                    heading_weight: float) -> np.ndarray:
    if metric == "xy":
        return traj.xy
    if metric == "xyv":
        return np.column_stack([traj.x, traj.y, speed_weight * traj.speed])
    if metric == "xyvh":
        return np.column_stack([traj.x, traj.y, speed_weight * traj.speed,
                                heading_weight * np.sin(traj.heading),
                                heading_weight * np.cos(traj.heading)])
    raise ValueError(f"unknown score metric {metric!r}")


def score(sub: Trajectory | None, expert_ref: Trajectory | None,
          metric: str = "xy", speed_weight: float = SPEED_WEIGHT,
          heading_weight: float = HEADING_WEIGHT) -> float | None:
    """Negated DTW distance; higher is better. None when an input is missing.

    The default metric compares positions only. "xyv" appends speed scaled
    by ``speed_weight`` (m per m/s) to the compared state, which makes
    pace-only errors visible: with a no-slip vehicle a driver can be badly
    off the reference speeds while tracing a near-perfect line. "xyvh"
    further appends the heading unit vector scaled by ``heading_weight``:
    steering faults announce themselves in heading well before the line
    visibly diverges, while pace faults leave heading untouched, so the
    extra columns sharpen the steer/speed attribution.
    """
    if sub is None or expert_ref is None:
        return None
    return -dtw(_metric_columns(sub, metric, speed_weight, heading_weight),
                _metric_columns(expert_ref, metric, speed_weight, heading_weight))


@dataclass(frozen=True)
class ZpdScores:
    values: dict[int, float]
    score_function: str
    trajectories_used: tuple[str, ...]

    def __post_init__(self):
        for z, v in self.values.items():
            if not np.isfinite(v):
                raise ValueError(f"non-finite zpd value for skill {z}")


@dataclass(frozen=True)
class CoachDecision:
    target_control: str
    skill_id: int
    ranking: tuple[tuple[str, int, float], ...]   # (channel, best skill, value)

    def __post_init__(self):
        if self.target_control not in COACHABLE:
            raise ValueError("coaching restricted to steer/throttle/brake")

    def to_dict(self) -> dict:
        return {"target_control": self.target_control,
                "skill_id": self.skill_id,
                "ranking": [list(r) for r in self.ranking]}


def zpd_scores(seg: Segmentation, expert_demo: Trajectory,
               expert_avg: Trajectory, student_avg: Trajectory,
               sa_avg: Trajectory, track: Track,
               sa_constant: float | None = None,
               metric: str = "xy",
               speed_weight: float = SPEED_WEIGHT,
               heading_weight: float = HEADING_WEIGHT) -> ZpdScores:
    """Per-skill assisted-minus-unassisted gap, posterior-weighted (Eq. of use).

    For every segment, both averaged trajectories are aligned to the
    segment's progress interval and scored against the progress-binned
    expert reference. Segments where either alignment is empty contribute
    nothing. Setting sa_constant replaces the assisted score with that
    constant (the ablation used for benchmarking); ``metric`` selects the
    compared state (see score).
    """
    intervals = segment_intervals(seg, expert_demo)
    length = track.total_length
    n_skills = seg.posteriors.shape[1]
    totals = np.zeros(n_skills)
    used = []
    for i, interval in enumerate(intervals):
        ref = align(expert_avg, interval, length)
        sa_sub = None if sa_constant is not None else align(sa_avg, interval, length)
        st_sub = align(student_avg, interval, length)
        st_score = score(st_sub, ref, metric, speed_weight, heading_weight)
        if sa_constant is not None:
            sa_score = sa_constant if st_score is not None else None
        else:
            sa_score = score(sa_sub, ref, metric, speed_weight, heading_weight)
        if sa_score is None or st_score is None:
            continue
        used.append(i)
        totals += seg.posteriors[i] * (sa_score - st_score)
    fn = f"neg_dtw_{metric}"
    if sa_constant is not None:
        fn = f"{fn}_ablation_const_{sa_constant}"
    return ZpdScores(values={z: float(totals[z]) for z in range(n_skills)},
                     score_function=fn,
                     trajectories_used=tuple(f"segment_{i}" for i in used))


def choose_skill(scores: ZpdScores, library: SkillLibrary,
                 cmap: ClusterMap) -> CoachDecision:
    """Highest-ZPD control channel: per-channel max over its skills, then argmax.

    Ties break in the fixed order steer > throttle > brake.
    """
    per_channel: dict[str, tuple[int, float]] = {}
    for z, value in scores.values.items():
        control = skill_to_control(library, cmap, z)
        if control not in COACHABLE:
            continue
        if control not in per_channel or value > per_channel[control][1]:
            per_channel[control] = (z, value)
    if not per_channel:
        raise ValueError("no skill maps to a coachable channel")
    ranking = tuple((c, per_channel[c][0], per_channel[c][1])
                    for c in COACHABLE if c in per_channel)
    winner = None
    for c in COACHABLE:   # fixed order makes ties fall to the earlier channel
        if c in per_channel and (winner is None or per_channel[c][1] > winner[2]):
            winner = (c, per_channel[c][0], per_channel[c][1])
    channel, skill_id, _ = winner
    return CoachDecision(target_control=channel, skill_id=skill_id, ranking=ranking)


def zpd_report(scores: ZpdScores, decision: CoachDecision,
               library: SkillLibrary, cmap: ClusterMap) -> dict:
    per_channel = {c: None for c in COACHABLE}
    for channel, skill_id, value in decision.ranking:
        per_channel[channel] = {"skill": skill_id, "value": value}
    return {
        "per_skill": {str(z): v for z, v in sorted(scores.values.items())},
        "per_channel": per_channel,
        "decision": decision.target_control,
        "score_function": scores.score_function,
    }


def save_zpd_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
