"""Simulated student drivers with known per-channel deficits.

Every constant that shapes the benchmark cohort lives in DEFAULT_PARAMS and
is shipped as ``data/student_model.json`` so the cohort design is auditable
in one place.

Deficit styles are confined to channel-appropriate pools chosen so each
corruption leaves a signature in the state the estimator compares (driven
line and speed) in the regions where its channel is actually worked:
steering noise and sluggish steering weave or run wide through corners,
late or weak braking carries extra speed past the braking points, and timid
or jittery throttle falls off the reference speeds along the straights. A
no-slip vehicle never translates pace errors into line errors on its own,
which is why throttle styles express through speed rather than position.

The "noise" style is mostly systematic: each student carries a fixed,
seed-derived error waveform keyed to track position, so they misjudge the
same corners the same way lap after lap, the way a real habit would. Purely
white jitter would average out of a multi-lap mean trajectory and leave
nothing for a coach to see.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import TYPE_CHECKING

import numpy as np

from .vehicle import Action, CHANNELS, VehicleState, clamp

if TYPE_CHECKING:
    from .track import Track

STYLES = ("noise", "lag", "bias_timid", "bias_aggressive")

DEFAULT_PARAMS = {
    # gate: brake practice only sticks while throttle control is adequate
    "brake_gate_throttle_deficit": 0.3,
    "deficit_threshold": 0.1,        # below this a channel is considered fine
    # corruption scales, all multiplied by the deficit magnitude
    # peak additive noise at deficit 1; the tracking loop recovers steering
    # excursions up to a peak error of about 1.7, so the top cohort
    # magnitude below keeps a hair of margin before spins set in
    "noise_scale": 2.0,
    "noise_activity_ref": 0.3,       # |expert action| where noise reaches half strength
    "noise_systematic_fraction": 0.9,  # share of noise tied to track position
    "noise_harmonics": 6,            # sinusoids in each systematic error waveform
    "noise_wavelengths_m": [50.0, 120.0],
    # onset smoothing time constants at deficit 1; steering hesitation visibly
    # shorter than pedal hesitation or the car never makes the corner at all
    "lag_tau": {"steer": 0.5, "throttle": 1.5, "brake": 3.0},
    "lag_release_fraction": 0.2,     # hesitant on, quick off the pedals
    "aggressive_gain": 0.85,         # fraction of the gap to the extreme covered
    # benchmark cohort design: one dominant learnable deficit plus decoys.
    # decoy ceilings are per channel because equal magnitudes are nowhere
    # near equally loud: a throttle deficit shifts speed along every straight
    # and into every corner entry, so even a small one can drown out how
    # hard the braking zones work the brake
    "dominant_range": [0.6, 0.85],
    "decoy_range": {"steer": [0.05, 0.2], "throttle": [0.02, 0.08],
                    "brake": [0.05, 0.15]},
    "focused_rate_range": [0.08, 0.12],   # deficit drop per focused practice-minute
    "self_rate_range": [0.008, 0.02],
    # the pools pick styles whose severity the trajectory actually grades.
    # Throttle: with the speed loop holding the pedal near full on every
    # straight, additive noise mostly clips away and the closed loop absorbs
    # the rest, while timidity shows up exactly where throttle skill lives
    # (depressed top speed down every straight). Steer: hesitation is
    # anticipated away by the lookahead until, past a threshold, the car
    # simply spins; noisy hands are the one steering fault that worsens
    # smoothly, so the benchmark leans on them.
    "style_pools": {
        "steer": ["noise"],
        "throttle": ["bias_timid"],
        "brake": ["lag", "bias_timid"],
    },
    "gated_brake_fraction": 0.2,     # share of brake-decoy students with the gate unmet
}

UNGATED_FOCUS_FACTOR = 0.1   # focused practice on a gated channel barely sticks


@dataclass(frozen=True)
class ChannelDeficit:
    magnitude: float
    style: str

    def __post_init__(self):
        if not 0.0 <= self.magnitude <= 1.0:
            raise ValueError("deficit magnitude outside [0, 1]")
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}")


@dataclass(frozen=True)
class StudentProfile:
    student_id: int
    steer: ChannelDeficit
    throttle: ChannelDeficit
    brake: ChannelDeficit
    focused_rates: tuple[float, float, float]   # per channel, per practice-minute
    self_rates: tuple[float, float, float]
    seed: int

    def __post_init__(self):
        for f, s in zip(self.focused_rates, self.self_rates):
            if s < 0 or f < s:
                raise ValueError("rates must satisfy focused >= self >= 0")

    def deficit(self, channel: str) -> ChannelDeficit:
        return getattr(self, channel)

    def to_dict(self) -> dict:
        return {
            "student_id": self.student_id,
            "channels": {c: {"magnitude": self.deficit(c).magnitude,
                             "style": self.deficit(c).style} for c in CHANNELS},
            "focused_rates": list(self.focused_rates),
            "self_rates": list(self.self_rates),
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StudentProfile":
        ch = {c: ChannelDeficit(float(v["magnitude"]), str(v["style"]))
              for c, v in data["channels"].items()}
        return cls(student_id=int(data["student_id"]),
                   steer=ch["steer"], throttle=ch["throttle"], brake=ch["brake"],
                   focused_rates=tuple(float(v) for v in data["focused_rates"]),
                   self_rates=tuple(float(v) for v in data["self_rates"]),
                   seed=int(data["seed"]))


def gate_satisfied(profile: StudentProfile, channel: str,
                   params: dict | None = None) -> bool:
    p = params or DEFAULT_PARAMS
    if channel == "brake":
        return profile.throttle.magnitude < p["brake_gate_throttle_deficit"]
    return True


def ground_truth_zpd(profile: StudentProfile, params: dict | None = None) -> str | None:
    """The channel a perfect coach would target: largest gated deficit.

    None when every deficit is below threshold. An unmet brake gate implies
    throttle deficit at or above the gate cutoff, so a candidate always
    exists otherwise.
    """
    p = params or DEFAULT_PARAMS
    candidates = [(profile.deficit(c).magnitude, c) for c in CHANNELS
                  if profile.deficit(c).magnitude >= p["deficit_threshold"]
                  and gate_satisfied(profile, c, p)]
    if not candidates:
        return None
    best = max(candidates, key=lambda mc: (mc[0], -CHANNELS.index(mc[1])))
    return best[1]


class StudentDriver:
    """Stateful actor: corrupts expert actions per the profile's deficits.

    Owns a seeded generator and per-channel lag memories; create one per
    trial (or call reset between trials) for reproducible sequences. Pass
    the track to key the systematic part of "noise" deficits to position:
    the waveforms derive from the profile seed alone, so they survive
    resets and repeat across trials. Without a track the noise degrades to
    white jitter.

    Pass a clean reference lap as well to gate noise by how hard that lap
    works each channel at the current position. Gating by the live command
    instead turns recovery into a feedback loop: the farther off line the
    car gets, the harder the corrective commands, the louder the noise.
    """

    def __init__(self, profile: StudentProfile, dt: float,
                 params: dict | None = None, stream_key: tuple[int, ...] = (),
                 track: "Track | None" = None, reference=None):
        self.profile = profile
        self.dt = float(dt)
        self.params = params or DEFAULT_PARAMS
        self.track = track
        self._rng = np.random.default_rng(
            np.random.SeedSequence(entropy=profile.seed, spawn_key=stream_key))
        self._lag_state: dict[str, float] = {}
        self._patterns = {c: self._error_pattern(c) for c in CHANNELS} \
            if track is not None else {}
        self._effort = self._reference_effort(reference) \
            if reference is not None and track is not None else None
        self._s: float | None = None

    def reset(self) -> None:
        self._lag_state.clear()

    def _reference_effort(self, reference):
        """Per-channel |action| by progress, lightly smoothed, for noise gating."""
        order = np.argsort(np.asarray(reference.progress, dtype=float))
        prog = np.asarray(reference.progress, dtype=float)[order]
        kernel = np.ones(11) / 11.0
        curves = {}
        for c in CHANNELS:
            effort = np.abs(np.asarray(getattr(reference, c), dtype=float))[order]
            curves[c] = np.convolve(effort, kernel, mode="same")
        return prog, curves

    def _error_pattern(self, channel: str):
        """Unit-peak sum of lap-periodic sinusoids, fixed per student+channel.

        Normalized by the waveform's own maximum rather than its rms: the
        rms fixes the average misjudgment but leaves the worst one unbounded,
        and on the steering channel a bad draw's peak is the difference
        between running wide and spinning out.
        """
        p = self.params
        rng = np.random.default_rng(np.random.SeedSequence(
            entropy=self.profile.seed, spawn_key=(7, CHANNELS.index(channel))))
        length = self.track.total_length
        lam_lo, lam_hi = p["noise_wavelengths_m"]
        n = int(p["noise_harmonics"])
        # integer cycle counts keep the waveform seamless across the line
        cycles = np.maximum(1.0, np.round(length / rng.uniform(lam_lo, lam_hi, n)))
        amps = rng.standard_normal(n)
        phases = rng.uniform(0.0, 2.0 * math.pi, n)
        omega = 2.0 * math.pi * cycles / length
        grid = np.linspace(0.0, length, 2048, endpoint=False)
        wave = np.sin(np.outer(grid, omega) + phases) @ amps
        amps /= float(np.max(np.abs(wave)))

        def pattern(s: float) -> float:
            return float(np.sum(amps * np.sin(omega * s + phases)))

        return pattern

    def _noise_sample(self, channel: str) -> float:
        """Mix of the positional waveform and white jitter, unit rms overall."""
        p = self.params
        white = self._rng.standard_normal()
        if self._s is None:
            return white
        f = p["noise_systematic_fraction"]
        return f * self._patterns[channel](self._s) + (1.0 - f) * white

    def _corrupt(self, channel: str, value: float, lo: float, hi: float) -> float:
        d = self.profile.deficit(channel)
        m = d.magnitude
        p = self.params
        if m == 0.0:
            return value
        if d.style == "noise":
            # noise is gated by how hard the channel is worked here, so the
            # corruption concentrates where the channel actually matters
            effort = abs(value)
            if self._effort is not None and self._s is not None:
                prog, curves = self._effort
                effort = float(np.interp(self._s, prog, curves[channel]))
            act = effort / (effort + p["noise_activity_ref"])
            return value + m * p["noise_scale"] * act * self._noise_sample(channel)
        if d.style == "lag":
            tau = m * p["lag_tau"][channel]
            prev = self._lag_state.get(channel, value if tau == 0.0 else 0.0)
            # hesitation delays committing to a pedal, not backing off it;
            # steering stays symmetric since its sign flips mid-corner
            if channel != "steer" and value < prev:
                tau *= p["lag_release_fraction"]
            alpha = self.dt / (tau + self.dt)
            out = prev + alpha * (value - prev)
            self._lag_state[channel] = out
            return out
        if d.style == "bias_timid":
            return value * (1.0 - m)
        # bias_aggressive: push toward the channel's extreme
        extreme = hi if channel != "steer" else math.copysign(1.0, value)
        if channel == "steer" and value == 0.0:
            return value
        return value + m * p["aggressive_gain"] * (extreme - value)

    def act(self, state: VehicleState, expert_action: Action) -> Action:
        if self.track is not None:
            self._s = self.track.project(state.x, state.y)[0]
        steer = self._corrupt("steer", expert_action.steer, -1.0, 1.0)
        throttle = self._corrupt("throttle", expert_action.throttle, 0.0, 1.0)
        brake = self._corrupt("brake", expert_action.brake, 0.0, 1.0)
        return Action(steer=clamp(steer, -1.0, 1.0),
                      throttle=clamp(throttle, 0.0, 1.0),
                      brake=clamp(brake, 0.0, 1.0))


def student_act(driver: StudentDriver, state: VehicleState,
                expert_action: Action) -> Action:
    return driver.act(state, expert_action)


def practice_update(profile: StudentProfile, minutes: float,
                    coached_channel: str | None,
                    params: dict | None = None) -> StudentProfile:
    """Deficit reduction after a practice block.

    Focused shared-autonomy practice improves the coached channel at its
    focused rate (a tenth of it if the channel's gate is unmet); unassisted
    practice improves every channel at its self rate, gates still applying.
    Deficits never increase and floor at zero.
    """
    if minutes < 0:
        raise ValueError("negative practice duration")
    if minutes == 0:
        return profile
    p = params or DEFAULT_PARAMS
    updates = {}
    for i, c in enumerate(CHANNELS):
        d = profile.deficit(c)
        if coached_channel is not None:
            if c != coached_channel:
                continue
            rate = profile.focused_rates[i]
            if not gate_satisfied(profile, c, p):
                rate *= UNGATED_FOCUS_FACTOR
        else:
            rate = profile.self_rates[i]
            if not gate_satisfied(profile, c, p):
                rate *= UNGATED_FOCUS_FACTOR
        updates[c] = replace(d, magnitude=max(0.0, d.magnitude - rate * minutes))
    return replace(profile, **updates)


def make_cohort(n: int, seed: int,
                params: dict | None = None) -> list[tuple[StudentProfile, str | None]]:
    """Seeded benchmark cohort with one dominant learnable deficit each.

    Dominant channels rotate so any n >= 3k gives at least k students per
    channel; decoy deficits on the other channels stay below the dominant
    one. A seeded fraction of brake-dominant students instead get the gate
    broken on purpose (throttle pushed past the gate cutoff) so their ground
    truth flips to throttle.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    p = params or DEFAULT_PARAMS
    root = np.random.SeedSequence(entropy=seed)
    order_rng = np.random.default_rng(root.spawn(1)[0])
    cohort = []
    for i in range(n):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=seed, spawn_key=(2, i)))
        dominant = CHANNELS[i % 3]
        mags = {}
        styles = {}
        dom_lo, dom_hi = p["dominant_range"]
        for c in CHANNELS:
            pool = p["style_pools"][c]
            styles[c] = pool[int(rng.integers(len(pool)))]
            if c == dominant:
                mags[c] = float(rng.uniform(dom_lo, dom_hi))
            else:
                dec_lo, dec_hi = p["decoy_range"][c]
                mags[c] = float(rng.uniform(dec_lo, dec_hi))
        if dominant == "brake" and rng.random() < p["gated_brake_fraction"]:
            # broken prerequisite: throttle is now the true coaching target,
            # and at least as bad as the braking that brought them here
            lo = max(p["brake_gate_throttle_deficit"] + 0.1, mags["brake"])
            mags["throttle"] = float(rng.uniform(lo, max(lo, dom_hi)))
            styles["throttle"] = p["style_pools"]["throttle"][
                int(rng.integers(len(p["style_pools"]["throttle"])))]
        f_lo, f_hi = p["focused_rate_range"]
        s_lo, s_hi = p["self_rate_range"]
        focused = tuple(float(rng.uniform(f_lo, f_hi)) for _ in CHANNELS)
        selfr = tuple(float(rng.uniform(s_lo, min(s_hi, f))) for f in focused)
        profile = StudentProfile(
            student_id=i,
            steer=ChannelDeficit(mags["steer"], styles["steer"]),
            throttle=ChannelDeficit(mags["throttle"], styles["throttle"]),
            brake=ChannelDeficit(mags["brake"], styles["brake"]),
            focused_rates=focused,
            self_rates=selfr,
            seed=int(rng.integers(0, 2 ** 31)),
        )
        cohort.append((profile, ground_truth_zpd(profile, p)))
    # seeded shuffle so dominant channels are not position-correlated
    perm = order_rng.permutation(n)
    return [cohort[int(k)] for k in perm]


def save_cohort(cohort: list[tuple[StudentProfile, str | None]],
                path: str | Path) -> None:
    payload = [{"profile": prof.to_dict(), "ground_truth": gt}
               for prof, gt in cohort]
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def load_cohort(path: str | Path) -> list[tuple[StudentProfile, str | None]]:
    raw = json.loads(Path(path).read_text())
    return [(StudentProfile.from_dict(r["profile"]), r["ground_truth"])
            for r in raw]


def default_params() -> dict:
    return json.loads(json.dumps(DEFAULT_PARAMS))
