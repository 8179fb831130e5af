"""Evaluation suite: DTW, per-trial summaries, steering spectra, Welch tests.

All trajectory metrics consume 1 Hz resampled trajectories; the protocol
runner persists exactly those.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .track import Track
from .trajectory import Trajectory, net_progress

TIME_LIMIT = 180.0


def dtw(a: np.ndarray, b: np.ndarray) -> float:
    """Dynamic time warping distance between two point sequences.

    Classic full-matrix O(nm) dynamic program with Euclidean ground metric
    and no window. Returns the accumulated cost along the optimal monotone
    warping path.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("dtw requires non-empty sequences")
    # cost[i, j] = |a_i - b_j|
    diff = a[:, None, :] - b[None, :, :]
    cost = np.sqrt(np.sum(diff * diff, axis=2))
    n, m = cost.shape
    acc = np.empty((n, m))
    acc[0, 0] = cost[0, 0]
    acc[0, 1:] = np.cumsum(cost[0, :])[1:]
    acc[1:, 0] = np.cumsum(cost[:, 0])[1:]
    for i in range(1, n):
        row = acc[i]
        prev = acc[i - 1]
        ci = cost[i]
        for j in range(1, m):
            row[j] = ci[j] + min(prev[j], row[j - 1], prev[j - 1])
    return float(acc[-1, -1])


@dataclass(frozen=True)
class TrialMetrics:
    success: bool
    lap_progress: float
    lap_time: float | None
    expert_distance: float
    jerk: float
    lane_invasions: int

    def __post_init__(self):
        if self.success != (self.lap_time is not None):
            raise ValueError("lap_time must be present iff success")
        if not 0.0 <= self.lap_progress <= 1.0:
            raise ValueError("lap_progress outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "success": self.success,
            "lap_progress": self.lap_progress,
            "lap_time": self.lap_time,
            "expert_distance": self.expert_distance,
            "jerk": self.jerk,
            "lane_invasions": self.lane_invasions,
        }


@dataclass(frozen=True)
class StageMetrics:
    """Per-stage bundle: one TrialMetrics per trial plus within-stage consistency."""
    trials: tuple[TrialMetrics, ...]
    consistency: float | None   # mean pairwise DTW; defined only for >= 2 trials

    @classmethod
    def from_trials(cls, metrics: list[TrialMetrics], trajs: list[Trajectory]) -> "StageMetrics":
        return cls(tuple(metrics), consistency_of(trajs))


def consistency_of(trajs: list[Trajectory]) -> float | None:
    """Mean pairwise DTW within a stage; lower means more consistent driving."""
    if len(trajs) < 2:
        return None
    total = 0.0
    pairs = 0
    for i in range(len(trajs)):
        for j in range(i + 1, len(trajs)):
            total += dtw(trajs[i].xy, trajs[j].xy)
            pairs += 1
    return total / pairs


def lane_invasions(off_track: np.ndarray) -> int:
    """Count transitions from on-track to off-track; all-off counts as one."""
    off = np.asarray(off_track, dtype=bool)
    if off.size == 0:
        return 0
    entries = int(np.sum(~off[:-1] & off[1:]))
    return entries + (1 if off[0] else 0)


def lap_crossing_time(traj: Trajectory, total_length: float) -> float | None:
    """Time at which net progress first reaches one lap, linearly interpolated."""
    net = net_progress(traj, total_length)
    idx = np.nonzero(net >= total_length)[0]
    if idx.size == 0:
        return None
    k = int(idx[0])
    if k == 0:
        return float(traj.t[0])
    frac = (total_length - net[k - 1]) / (net[k] - net[k - 1])
    return float(traj.t[k - 1] + frac * (traj.t[k] - traj.t[k - 1]))


def trial_metrics(traj: Trajectory, track: Track, expert: Trajectory,
                  time_limit: float = TIME_LIMIT) -> TrialMetrics:
    """Summarize a single 1 Hz trial trajectory against the expert reference."""
    total = track.total_length
    net = net_progress(traj, total)
    progress = min(1.0, max(0.0, float(net.max()) / total))
    cross = lap_crossing_time(traj, total)
    elapsed = None if cross is None else cross - float(traj.t[0])
    success = elapsed is not None and elapsed <= time_limit
    # acceleration from finite-differenced speed on the 1 Hz grid
    if len(traj.t) >= 3:
        dt = np.diff(traj.t)
        accel = np.diff(traj.speed) / dt
        jerk = float(np.mean(np.abs(np.diff(accel) / dt[1:]))) if len(accel) >= 2 else 0.0
    else:
        jerk = 0.0
    return TrialMetrics(
        success=success,
        lap_progress=progress,
        lap_time=elapsed if success else None,
        expert_distance=dtw(traj.xy, expert.xy),
        jerk=jerk,
        lane_invasions=lane_invasions(traj.off_track),
    )


# -- Fourier steering analysis ---------------------------------------------------


def _bit_reverse_permutation(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=int)
    for _ in range(bits):
        rev = (rev << 1) | (idx & 1)
        idx >>= 1
    return rev


def fft_complex(x: np.ndarray) -> np.ndarray:
    """Iterative radix-2 decimation-in-time FFT. Length must be a power of two."""
    x = np.asarray(x, dtype=complex)
    n = x.size
    if n == 0 or n & (n - 1):
        raise ValueError("fft_complex requires power-of-two length")
    out = x[_bit_reverse_permutation(n)].copy()
    half = 1
    while half < n:
        step = half * 2
        twiddle = np.exp(-2j * math.pi * np.arange(half) / step)
        for start in range(0, n, step):
            lo = out[start:start + half]
            hi = out[start + half:start + step] * twiddle
            out[start:start + half] = lo + hi
            out[start + half:start + step] = lo - hi
        half = step
    return out


def next_pow2(n: int) -> int:
    return 1 << max(0, (n - 1)).bit_length()


def steering_fft(signal: np.ndarray) -> np.ndarray:
    """Single-sided amplitude spectrum of a steering signal.

    The signal is zero-padded to the next power of two; bins 0..n/2 of the
    transform magnitude are returned.
    """
    sig = np.asarray(signal, dtype=float)
    if sig.size < 8:
        raise ValueError("steering_fft requires at least 8 samples")
    n = next_pow2(sig.size)
    padded = np.zeros(n)
    padded[:sig.size] = sig
    spectrum = fft_complex(padded)
    return np.abs(spectrum[:n // 2 + 1])


def spectrum_rmse(a: np.ndarray, b: np.ndarray) -> float:
    """RMSE between two amplitude spectra over their common bins."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    k = min(a.size, b.size)
    if k == 0:
        raise ValueError("empty spectrum")
    d = a[:k] - b[:k]
    return float(np.sqrt(np.mean(d * d)))


# -- statistics -------------------------------------------------------------------


def welch_t(a: np.ndarray, b: np.ndarray) -> tuple[float, float, float]:
    """Welch's unequal-variance t-test: returns (t, degrees of freedom, p).

    Degenerate zero-variance inputs take an exact-equality fast path instead
    of dividing by zero.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise ValueError("welch_t requires at least 2 samples per group")
    ma, mb = a.mean(), b.mean()
    va, vb = a.var(ddof=1), b.var(ddof=1)
    if va == 0.0 and vb == 0.0:
        df = float(na + nb - 2)
        if ma == mb:
            return 0.0, df, 1.0
        return math.copysign(math.inf, ma - mb), df, 0.0
    se2 = va / na + vb / nb
    t = (ma - mb) / math.sqrt(se2)
    df = se2 * se2 / ((va / na) ** 2 / (na - 1) + (vb / nb) ** 2 / (nb - 1))
    p = 2.0 * float(stats.t.sf(abs(t), df))
    return float(t), float(df), p


def mean_ci(x: np.ndarray, confidence: float = 0.95) -> tuple[float, float, float]:
    """Sample mean with a two-sided t confidence interval (lo, hi)."""
    x = np.asarray(x, dtype=float)
    m = float(x.mean())
    if x.size < 2:
        return m, m, m
    sem = float(x.std(ddof=1)) / math.sqrt(x.size)
    if sem == 0.0:
        return m, m, m
    half = float(stats.t.ppf(0.5 + confidence / 2.0, x.size - 1)) * sem
    return m, m - half, m + half


DELTA_METRICS = ("success_rate", "lap_progress", "lap_time", "consistency",
                 "expert_distance", "jerk", "lane_invasions")


def _stage_value(sm: StageMetrics, metric: str, time_limit: float) -> float | None:
    trials = sm.trials
    if metric == "success_rate":
        return float(np.mean([t.success for t in trials]))
    if metric == "lap_progress":
        return float(np.mean([t.lap_progress for t in trials]))
    if metric == "lap_time":
        # failed trials are censored at the time limit so every student
        # contributes a well-defined delta
        return float(np.mean([t.lap_time if t.success else time_limit for t in trials]))
    if metric == "consistency":
        return sm.consistency
    if metric == "expert_distance":
        return float(np.mean([t.expert_distance for t in trials]))
    if metric == "jerk":
        return float(np.mean([t.jerk for t in trials]))
    if metric == "lane_invasions":
        return float(np.mean([t.lane_invasions for t in trials]))
    raise ValueError(f"unknown metric {metric!r}")


def delta_table(records: list[dict], arms: tuple[str, str],
                alpha: float = 0.05, time_limit: float = TIME_LIMIT) -> dict:
    """Baseline-to-evaluation comparison between two study arms.

    Each record is {"arm": name, "baseline": StageMetrics, "evaluation":
    StageMetrics}. For every metric the table reports each arm's mean delta
    with a 95% confidence interval plus Welch's t-test between arms, flagged
    at the raw threshold and at the Bonferroni-corrected one.
    """
    for arm in arms:
        if sum(1 for r in records if r["arm"] == arm) < 2:
            raise ValueError(f"arm {arm!r} needs at least 2 students")
    corrected = alpha / len(DELTA_METRICS)
    table: dict = {"arms": list(arms), "alpha": alpha,
                   "alpha_bonferroni": corrected, "metrics": {}}
    for metric in DELTA_METRICS:
        deltas: dict[str, list[float]] = {arm: [] for arm in arms}
        for rec in records:
            if rec["arm"] not in deltas:
                continue
            base = _stage_value(rec["baseline"], metric, time_limit)
            ev = _stage_value(rec["evaluation"], metric, time_limit)
            if base is None or ev is None:
                continue
            deltas[rec["arm"]].append(ev - base)
        row: dict = {}
        for arm in arms:
            vals = np.asarray(deltas[arm])
            m, lo, hi = mean_ci(vals)
            row[arm] = {"mean": m, "ci_low": lo, "ci_high": hi, "n": int(vals.size)}
        t, df, p = welch_t(np.asarray(deltas[arms[0]]), np.asarray(deltas[arms[1]]))
        row["welch"] = {"t": t, "df": df, "p": p,
                        "significant": bool(p < alpha),
                        "significant_bonferroni": bool(p < corrected)}
        table["metrics"][metric] = row
    return table
