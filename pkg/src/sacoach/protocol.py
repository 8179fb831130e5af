"""Five-stage study protocol over simulated cohorts.

Stages: 2 unassisted baseline trials, 2 assisted modeling trials, 1
unassisted trial, a 5-minute practice block steered by the coach decision,
and 3 unassisted evaluation trials. Every trial is persisted at 1 Hz and
appended to a JSONL run log whose bytes depend only on the seed.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .autopilot import ExpertBank, PidGains
from .blending import SaMode, UNASSISTED, skill_sa
from .metrics import (StageMetrics, TrialMetrics, consistency_of, delta_table,
                      steering_fft, trial_metrics)
from .simulate import SimSession, TRIAL_TIME_LIMIT, run_practice, run_trial
from .skills import ClusterMap, SkillLibrary, attach_annotations, load_annotations, segment_dp
from .students import (StudentDriver, StudentProfile, load_cohort,
                       make_cohort, practice_update, save_cohort)
from .track import Track
from .trajectory import Trajectory, resample_1hz
from .zpd import (HEADING_WEIGHT, average_trajectories, choose_skill,
                  zpd_report, zpd_scores)

log = logging.getLogger(__name__)

STAGE_PLAN = ((1, 2), (2, 2), (3, 1), (4, 0), (5, 3))   # (stage, trials)
MODELING_ARMS = ("strong_sa", "weak_sa")
PRACTICE_ARMS = ("skill_sa", "self_practice")


class ConfigError(ValueError):
    """Invalid study configuration; maps to CLI exit code 2."""


@dataclass
class StudyConfig:
    track_path: str
    bank_dir: str
    library_path: str
    annotations_path: str
    cluster_map_path: str
    out_dir: str
    seed: int = 0
    cohort_size: int = 50
    cohort_path: str | None = None
    modeling_arms: tuple[str, ...] = ("strong_sa",)
    practice_arms: tuple[str, ...] = ("skill_sa", "self_practice")
    practice_minutes: float = 5.0
    time_limit: float = TRIAL_TIME_LIMIT
    include_stage3: bool = True     # fold stage 3 into the unassisted average
    # full-state scoring: pace-only deficits never bend a no-slip vehicle's
    # line, and steering faults surface in heading before the line moves,
    # so the runner compares (x, y, speed, heading) by default
    zpd_metric: str = "xyvh"
    zpd_speed_weight: float = 1.0
    zpd_heading_weight: float = HEADING_WEIGHT
    stage_plan: tuple[tuple[int, int], ...] = STAGE_PLAN
    allow_custom_protocol: bool = False

    def validate(self) -> None:
        if self.zpd_metric not in ("xy", "xyv", "xyvh"):
            raise ConfigError(f"unknown zpd metric {self.zpd_metric!r}")
        if tuple(map(tuple, self.stage_plan)) != STAGE_PLAN and not self.allow_custom_protocol:
            raise ConfigError("stage plan deviates from 2/2/1/practice/3; "
                              "pass allow_custom_protocol to override")
        for arm in self.modeling_arms:
            if arm not in MODELING_ARMS:
                raise ConfigError(f"unknown modeling arm {arm!r}")
        for arm in self.practice_arms:
            if arm not in PRACTICE_ARMS:
                raise ConfigError(f"unknown practice arm {arm!r}")
        if not self.modeling_arms or not self.practice_arms:
            raise ConfigError("at least one arm required on each axis")
        if self.cohort_size < 1:
            raise ConfigError("cohort_size must be >= 1")
        if self.practice_minutes < 0:
            raise ConfigError("practice_minutes must be >= 0")
        for name in ("track_path", "bank_dir", "library_path",
                     "annotations_path", "cluster_map_path"):
            if not Path(getattr(self, name)).exists():
                raise ConfigError(f"{name} does not exist: {getattr(self, name)}")

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "StudyConfig":
        data = json.loads(Path(path).read_text())
        data.update(overrides)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("modeling_arms", "practice_arms"):
            if key in data:
                data[key] = tuple(data[key])
        if "stage_plan" in data:
            data["stage_plan"] = tuple(tuple(p) for p in data["stage_plan"])
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modeling_arms"] = list(self.modeling_arms)
        d["practice_arms"] = list(self.practice_arms)
        d["stage_plan"] = [list(p) for p in self.stage_plan]
        return d


def _mode_for(stage: int, modeling_arm: str) -> SaMode:
    if stage == 2:
        return SaMode.parse(modeling_arm)
    return UNASSISTED

def _json_line(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(",", ":")) + "\n"


@dataclass
class StudyArtifacts:
    track: Track
    bank: ExpertBank
    library: SkillLibrary
    cmap: ClusterMap
    demos_1hz: list[Trajectory]
    expert_avg: Trajectory
    expert_demo: Trajectory
    segmentation: object
    gains: PidGains = field(default_factory=PidGains)


def load_artifacts(config: StudyConfig) -> StudyArtifacts:
    track = Track.load(config.track_path)
    bank = ExpertBank.load(config.bank_dir)
    library = SkillLibrary.load(config.library_path)
    cmap = ClusterMap.load(config.cluster_map_path)
    annotations = load_annotations(config.annotations_path)
    demos_1hz = [resample_1hz(d, track) for d in bank.demos]
    expert_avg = average_trajectories(demos_1hz, track)
    expert_demo = demos_1hz[0]
    labels = attach_annotations(expert_demo, annotations)
    segmentation = segment_dp(expert_demo, track, labels, library)
    return StudyArtifacts(track=track, bank=bank, library=library, cmap=cmap,
                          demos_1hz=demos_1hz, expert_avg=expert_avg,
                          expert_demo=expert_demo, segmentation=segmentation)


def assign_arms(labels: list, modeling_arms, practice_arms, seed: int) -> list[tuple[str, str]]:
    """Seeded blocked assignment: arm pairings dealt evenly within each label.

    ``labels`` carries one blocking key per student (the cohort's ground-truth
    channel in the bundled study). Students with different deficit channels
    stress different outcome metrics, so an unblocked deal can pile one
    channel into one arm and bury the between-arm contrast under cohort
    composition luck. The deal cursor runs across blocks so the pairing
    shares also stay equal globally.
    """
    pairings = list(itertools.product(modeling_arms, practice_arms))
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))
    assignment: list[tuple[str, str]] = [None] * len(labels)
    groups: dict = {}
    for idx, label in enumerate(labels):
        groups.setdefault(label, []).append(idx)
    cursor = 0
    for label in sorted(groups, key=str):
        members = groups[label]
        for j in rng.permutation(len(members)):
            assignment[members[int(j)]] = pairings[cursor % len(pairings)]
            cursor += 1
    return assignment


def _run_stage_trials(artifacts: StudyArtifacts, profile: StudentProfile,
                      stage: int, n_trials: int, mode: SaMode,
                      time_limit: float) -> list[tuple[Trajectory, bool]]:
    out = []
    for j in range(n_trials):
        session = SimSession(artifacts.track, artifacts.bank, mode,
                             gains=artifacts.gains)
        driver = StudentDriver(profile, session.dt, stream_key=(stage, j),
                               track=artifacts.track,
                               reference=artifacts.bank.demos[0])
        result = run_trial(session, driver, time_limit=time_limit)
        traj_1hz = resample_1hz(result.trajectory, artifacts.track)
        out.append((traj_1hz, result.completed))
    return out


def run_student(artifacts: StudyArtifacts, config: StudyConfig,
                profile: StudentProfile, arms: tuple[str, str],
                out_dir: Path, records: list[dict]) -> dict:
    """Full protocol for one student; returns stage metrics for the report."""
    modeling_arm, practice_arm = arms
    sid = profile.student_id
    stage_trajs: dict[int, list[Trajectory]] = {}
    stage_metrics: dict[int, list[TrialMetrics]] = {}
    current = profile
    decision = None
    report = None
    for stage, n_trials in config.stage_plan:
        if stage == 4:
            coached = None
            if practice_arm == "skill_sa" and decision is not None:
                coached = decision.target_control
            mode = skill_sa(coached) if coached else UNASSISTED
            session = SimSession(artifacts.track, artifacts.bank, mode,
                                 gains=artifacts.gains)
            driver = StudentDriver(current, session.dt, stream_key=(4, 0),
                                   track=artifacts.track,
                                   reference=artifacts.bank.demos[0])
            plog = run_practice(session, driver, config.practice_minutes)
            current = practice_update(current, plog.minutes, coached)
            records.append({
                "student": sid, "stage": 4, "trial": 0, "mode": str(mode),
                "arm_modeling": modeling_arm, "arm_practice": practice_arm,
                "practice": {"minutes": plog.minutes, "coached": coached,
                             "rollouts": plog.rollouts},
                "zpd": report,
            })
            continue
        mode = _mode_for(stage, modeling_arm)
        trials = _run_stage_trials(artifacts, current, stage, n_trials, mode,
                                   config.time_limit)
        stage_trajs[stage] = [t for t, _ in trials]
        stage_metrics[stage] = []
        for j, (traj, completed) in enumerate(trials):
            rel = f"trajectories/s{sid:03d}_stage{stage}_trial{j}.csv"
            traj.to_csv(out_dir / rel)
            tm = trial_metrics(traj, artifacts.track, artifacts.expert_avg,
                               config.time_limit)
            stage_metrics[stage].append(tm)
            records.append({
                "student": sid, "stage": stage, "trial": j, "mode": str(mode),
                "arm_modeling": modeling_arm, "arm_practice": practice_arm,
                "trajectory": rel, "completed": completed,
                "metrics": tm.to_dict(),
            })
        if stage == 3:
            unassisted = stage_trajs[1] + (stage_trajs[3] if config.include_stage3 else [])
            student_avg = average_trajectories(unassisted, artifacts.track)
            sa_avg = average_trajectories(stage_trajs[2], artifacts.track)
            scores = zpd_scores(artifacts.segmentation, artifacts.expert_demo,
                                artifacts.expert_avg, student_avg, sa_avg,
                                artifacts.track, metric=config.zpd_metric,
                                speed_weight=config.zpd_speed_weight,
                                heading_weight=config.zpd_heading_weight)
            decision = choose_skill(scores, artifacts.library, artifacts.cmap)
            report = zpd_report(scores, decision, artifacts.library, artifacts.cmap)
    return {
        "student": sid, "arm": practice_arm, "arm_modeling": modeling_arm,
        "baseline": StageMetrics.from_trials(stage_metrics[1], stage_trajs[1]),
        "evaluation": StageMetrics.from_trials(stage_metrics[5], stage_trajs[5]),
        "decision": None if decision is None else decision.target_control,
    }


def run_study(config: StudyConfig) -> dict:
    """Execute the full study; returns the delta-table report."""
    config.validate()
    artifacts = load_artifacts(config)
    out_dir = Path(config.out_dir)
    (out_dir / "trajectories").mkdir(parents=True, exist_ok=True)
    if config.cohort_path:
        cohort = load_cohort(config.cohort_path)
    else:
        cohort = make_cohort(config.cohort_size, config.seed)
    save_cohort(cohort, out_dir / "cohort.json")
    assignment = assign_arms([gt for _, gt in cohort], config.modeling_arms,
                             config.practice_arms, config.seed)
    records: list[dict] = []
    results = []
    for (profile, _gt), arms in zip(cohort, assignment):
        try:
            results.append(run_student(artifacts, config, profile, arms,
                                       out_dir, records))
        except Exception as exc:       # isolate per-student failures
            log.exception("student %d aborted", profile.student_id)
            records.append({"student": profile.student_id, "stage": None,
                            "error": f"{type(exc).__name__}: {exc}",
                            "arm_modeling": arms[0], "arm_practice": arms[1]})
    with open(out_dir / "runlog.jsonl", "w") as fh:
        for rec in records:
            fh.write(_json_line(rec))
    report = build_report([r for r in results if r is not None],
                          tuple(config.practice_arms), config.time_limit)
    write_report(report, out_dir)
    write_spectra(results, artifacts, out_dir)
    (out_dir / "study_config.json").write_text(
        json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return report


def build_report(results: list[dict], arms: tuple[str, ...],
                 time_limit: float) -> dict:
    if len(arms) >= 2:
        counts = {arm: sum(1 for r in results if r["arm"] == arm) for arm in arms[:2]}
        if all(c >= 2 for c in counts.values()):
            return delta_table(results, (arms[0], arms[1]), time_limit=time_limit)
    return {"arms": list(arms), "metrics": {},
            "note": "delta table needs two arms with >= 2 students each"}


def write_report(report: dict, out_dir: Path) -> None:
    (out_dir / "report.json").write_text(
        json.dumps(report, indent=2, sort_keys=True) + "\n")
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    arms = report.get("arms", [])[:2]
    header = ["metric"]
    for arm in arms:
        header += [f"{arm}_mean_delta", f"{arm}_ci_low", f"{arm}_ci_high", f"{arm}_n"]
    header += ["welch_t", "welch_df", "p_value", "significant", "significant_bonferroni"]
    writer.writerow(header)
    for metric, row in report.get("metrics", {}).items():
        out = [metric]
        for arm in arms:
            cell = row[arm]
            out += [repr(cell["mean"]), repr(cell["ci_low"]),
                    repr(cell["ci_high"]), cell["n"]]
        w = row["welch"]
        out += [repr(w["t"]), repr(w["df"]), repr(w["p"]),
                int(w["significant"]), int(w["significant_bonferroni"])]
        writer.writerow(out)
    (out_dir / "report.csv").write_text(buf.getvalue())


def write_spectra(results: list[dict], artifacts: StudyArtifacts,
                  out_dir: Path) -> None:
    """Steering amplitude spectra of the expert reference, for plot tooling."""
    demo = artifacts.demos_1hz[0]
    if len(demo.steer) < 8:
        return
    spec = steering_fft(demo.steer)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["bin", "expert_amplitude"])
    for i, v in enumerate(spec):
        writer.writerow([i, repr(float(v))])
    (out_dir / "expert_spectrum.csv").write_text(buf.getvalue())


def report_from_runlog(out_dir: str | Path, track: Track,
                       expert_avg: Trajectory,
                       time_limit: float = TRIAL_TIME_LIMIT) -> dict:
    """Rebuild the delta table from a persisted run log and its trajectories."""
    out_dir = Path(out_dir)
    per_student: dict[int, dict] = {}
    arms_seen: list[str] = []
    with open(out_dir / "runlog.jsonl") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("error") or rec.get("stage") not in (1, 5):
                continue
            sid = rec["student"]
            entry = per_student.setdefault(
                sid, {"arm": rec["arm_practice"], "stages": {1: [], 5: []}})
            traj = Trajectory.from_csv(out_dir / rec["trajectory"])
            entry["stages"][rec["stage"]].append(traj)
            if rec["arm_practice"] not in arms_seen:
                arms_seen.append(rec["arm_practice"])
    results = []
    for sid, entry in sorted(per_student.items()):
        stages = {}
        for stage in (1, 5):
            trajs = entry["stages"][stage]
            if not trajs:
                break
            tms = [trial_metrics(t, track, expert_avg, time_limit) for t in trajs]
            stages[stage] = StageMetrics.from_trials(tms, trajs)
        if len(stages) == 2:
            results.append({"student": sid, "arm": entry["arm"],
                            "baseline": stages[1], "evaluation": stages[5]})
    if len(arms_seen) < 2:
        raise ConfigError("run log contains fewer than two practice arms")
    return build_report(results, tuple(arms_seen[:2]), time_limit)


def run_modeling_benchmark(track: Track, bank: ExpertBank, library: SkillLibrary,
                           cmap: ClusterMap, annotations, n: int = 20,
                           seed: int = 0, modeling_mode: str = "strong_sa",
                           ablation_constant: float = 0.0,
                           metric: str = "xyvh", speed_weight: float = 1.0,
                           heading_weight: float = HEADING_WEIGHT,
                           time_limit: float = TRIAL_TIME_LIMIT) -> dict:
    """Skill-targeting accuracy over a cohort with known ground truth.

    Runs stages 1-3 per student, then compares choose_skill decisions (full
    estimator vs the constant-assisted-score ablation, both under the same
    score metric) against the cohort generator's designated channel.
    """
    demos_1hz = [resample_1hz(d, track) for d in bank.demos]
    expert_avg = average_trajectories(demos_1hz, track)
    expert_demo = demos_1hz[0]
    labels = attach_annotations(expert_demo, annotations)
    segmentation = segment_dp(expert_demo, track, labels, library)
    artifacts = StudyArtifacts(track=track, bank=bank, library=library,
                               cmap=cmap, demos_1hz=demos_1hz,
                               expert_avg=expert_avg, expert_demo=expert_demo,
                               segmentation=segmentation)
    cohort = make_cohort(n, seed)
    mode = SaMode.parse(modeling_mode)
    hits = 0
    ablation_hits = 0
    evaluated = 0
    per_student = []
    for profile, gt in cohort:
        if gt is None:
            continue
        t1 = _run_stage_trials(artifacts, profile, 1, 2, UNASSISTED, time_limit)
        t2 = _run_stage_trials(artifacts, profile, 2, 2, mode, time_limit)
        t3 = _run_stage_trials(artifacts, profile, 3, 1, UNASSISTED, time_limit)
        student_avg = average_trajectories([t for t, _ in t1 + t3], track)
        sa_avg = average_trajectories([t for t, _ in t2], track)
        scores = zpd_scores(segmentation, expert_demo, expert_avg,
                            student_avg, sa_avg, track,
                            metric=metric, speed_weight=speed_weight,
                            heading_weight=heading_weight)
        decision = choose_skill(scores, library, cmap)
        ab_scores = zpd_scores(segmentation, expert_demo, expert_avg,
                               student_avg, sa_avg, track,
                               sa_constant=ablation_constant,
                               metric=metric, speed_weight=speed_weight,
                               heading_weight=heading_weight)
        ab_decision = choose_skill(ab_scores, library, cmap)
        evaluated += 1
        hits += int(decision.target_control == gt)
        ablation_hits += int(ab_decision.target_control == gt)
        per_student.append({"student": profile.student_id, "truth": gt,
                            "decision": decision.target_control,
                            "ablation_decision": ab_decision.target_control})
    return {
        "evaluated": evaluated,
        "accuracy": hits / evaluated if evaluated else float("nan"),
        "ablation_accuracy": ablation_hits / evaluated if evaluated else float("nan"),
        "per_student": per_student,
    }
