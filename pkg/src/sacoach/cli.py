"""Command-line entry points.

Every subcommand reads and writes the documented file formats. Exit codes:
0 on success, 2 when inputs fail validation (bad flags, malformed or
missing files), 1 when a run fails at runtime.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import assets
from .autopilot import ExpertBank, generate_expert_demos
from .protocol import (ConfigError, StudyConfig, load_artifacts,
                       report_from_runlog, run_study, write_report)
from .skills import (DEFAULT_AUX_WEIGHT, DEFAULT_MAX_SEGMENTS,
                     DEFAULT_N_SKILLS, DEFAULT_RESTARTS,
                     DEFAULT_SWITCH_PENALTY, ClusterMap, SkillLibrary,
                     attach_annotations, compression_ratio, fit_library,
                     load_annotations, reconstruction_mse, segment_dp)
from .track import Track
from .trajectory import Trajectory, resample_1hz
from .zpd import (average_trajectories, choose_skill, save_zpd_report,
                  zpd_report, zpd_scores)

log = logging.getLogger(__name__)


def _bundled(name: str) -> Path:
    return assets.data_dir() / name


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}")
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    return data


def _merge(args: argparse.Namespace, config: dict, key: str, fallback):
    """Priority: explicit flag > config file > fallback."""
    value = getattr(args, key.replace("-", "_"), None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return fallback


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None, help="root random seed")
    p.add_argument("--config", default=None, help="JSON file with defaults for this command")
    p.add_argument("--out", default=None, help="output directory")


def cmd_gen_track(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    out = Path(_merge(args, cfg, "out", "assets_out"))
    assets.write_assets(out)
    track = Track.load(out / "default_track.json")
    print(f"track: {track.total_length:.1f} m, {track.n_points} points -> {out}")
    return 0


def cmd_gen_expert(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    track = Track.load(_merge(args, cfg, "track", _bundled("default_track.json")))
    out = Path(_merge(args, cfg, "out", "bank"))
    bank = generate_expert_demos(
        track,
        k=int(_merge(args, cfg, "demos", 5)),
        seed=int(_merge(args, cfg, "seed", 0)),
        pace_spread=float(_merge(args, cfg, "pace_spread", 0.0)),
    )
    bank.save(out)
    laps = ", ".join(f"{d.duration:.1f}s" for d in bank.demos)
    print(f"{len(bank.demos)} clean demos ({laps}) -> {out}")
    return 0


def cmd_fit_skills(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    track = Track.load(_merge(args, cfg, "track", _bundled("default_track.json")))
    bank = ExpertBank.load(_merge(args, cfg, "bank", "bank"))
    annotations = load_annotations(
        _merge(args, cfg, "annotations", _bundled("annotations.json")))
    cmap = ClusterMap.load(_merge(args, cfg, "clusters", _bundled("cluster_map.json")))
    out = Path(_merge(args, cfg, "out", "skills_out"))
    out.mkdir(parents=True, exist_ok=True)
    # the library is fitted on the primary demo: segmentation and scoring
    # both run against that lap, and a mixed-demo fit blurs its boundaries
    demos = [resample_1hz(bank.demos[0], track)]
    library, segs = fit_library(
        demos, track, annotations, n_clusters=len(cmap),
        n_skills=int(_merge(args, cfg, "n_skills", DEFAULT_N_SKILLS)),
        max_segments=int(_merge(args, cfg, "max_segments", DEFAULT_MAX_SEGMENTS)),
        switch_penalty=float(_merge(args, cfg, "switch_penalty", DEFAULT_SWITCH_PENALTY)),
        w_aux=float(_merge(args, cfg, "w_aux", DEFAULT_AUX_WEIGHT)),
        iterations=int(_merge(args, cfg, "iterations", 30)),
        seed=int(_merge(args, cfg, "seed", 0)),
        restarts=int(_merge(args, cfg, "restarts", DEFAULT_RESTARTS)),
    )
    library.save(out / "library.json")
    for i, seg in enumerate(segs):
        (out / f"segmentation_demo{i}.csv").write_text(seg.to_csv())
    mse = reconstruction_mse(demos, track, library, segs)
    ratios = [compression_ratio(s) for s in segs]
    print(f"library: {len(library.skills)} skills, {len(library.history)} EM iterations")
    print(f"reconstruction mse {mse:.4f}, compression " +
          ", ".join(f"{r:.2f}" for r in ratios) + f" -> {out}")
    return 0


def cmd_segment(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    track = Track.load(_merge(args, cfg, "track", _bundled("default_track.json")))
    library = SkillLibrary.load(_merge(args, cfg, "library", "skills_out/library.json"))
    annotations = load_annotations(
        _merge(args, cfg, "annotations", _bundled("annotations.json")))
    traj = Trajectory.from_csv(args.trajectory)
    labels = attach_annotations(traj, annotations)
    seg = segment_dp(traj, track, labels, library,
                     max_segments=int(_merge(args, cfg, "max_segments",
                                             library.max_segments)))
    csv_text = seg.to_csv()
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(csv_text)
        print(f"{seg.n_segments} segments, compression {compression_ratio(seg):.2f} -> {out}")
    else:
        sys.stdout.write(csv_text)
    return 0


def cmd_zpd(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    track = Track.load(_merge(args, cfg, "track", _bundled("default_track.json")))
    bank = ExpertBank.load(_merge(args, cfg, "bank", "bank"))
    library = SkillLibrary.load(_merge(args, cfg, "library", "skills_out/library.json"))
    annotations = load_annotations(
        _merge(args, cfg, "annotations", _bundled("annotations.json")))
    cmap = ClusterMap.load(_merge(args, cfg, "clusters", _bundled("cluster_map.json")))
    if not args.student or not args.assisted:
        raise ConfigError("zpd needs at least one --student and one --assisted trajectory")
    demos = [resample_1hz(d, track) for d in bank.demos]
    expert_avg = average_trajectories(demos, track)
    expert_demo = demos[0]
    labels = attach_annotations(expert_demo, annotations)
    seg = segment_dp(expert_demo, track, labels, library)
    student_avg = average_trajectories(
        [Trajectory.from_csv(p) for p in args.student], track)
    sa_avg = average_trajectories(
        [Trajectory.from_csv(p) for p in args.assisted], track)
    scores = zpd_scores(seg, expert_demo, expert_avg, student_avg, sa_avg, track)
    decision = choose_skill(scores, library, cmap)
    report = zpd_report(scores, decision, library, cmap)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_zpd_report(report, out)
    print(f"recommend practicing {decision.target_control} "
          f"(skill {decision.skill_id})")
    return 0


def cmd_run_study(args: argparse.Namespace) -> int:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.config:
        config = StudyConfig.from_file(args.config, **overrides)
    else:
        raise ConfigError("run-study requires --config")
    report = run_study(config)
    n = len(report.get("metrics", {}))
    print(f"study complete: {config.cohort_size} students, "
          f"{n} metrics compared -> {config.out_dir}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    cfg = _load_config(args.config)
    run_dir = Path(args.runlog).parent if args.runlog.endswith(".jsonl") \
        else Path(args.runlog)
    track = Track.load(_merge(args, cfg, "track", _bundled("default_track.json")))
    bank = ExpertBank.load(_merge(args, cfg, "bank", "bank"))
    demos = [resample_1hz(d, track) for d in bank.demos]
    expert_avg = average_trajectories(demos, track)
    report = report_from_runlog(run_dir, track, expert_avg)
    out = Path(_merge(args, cfg, "out", run_dir))
    out.mkdir(parents=True, exist_ok=True)
    write_report(report, out)
    print(f"delta table over {report.get('arms')} -> {out}")
    return 0


def cmd_serve(args: argparse.Namespace) -> int:
    from .server import ServerConfig, serve
    overrides = {}
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.config:
        config = ServerConfig.from_file(args.config, **overrides)
    else:
        config = ServerConfig(**overrides)
    serve(config, host=args.host, port=args.port, static_dir=args.static)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sacoach",
        description="shared-autonomy driving coach: track and demo generation, "
                    "skill discovery, coaching analysis, studies, live sessions")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-track", help="write the bundled circuit, cluster map and annotations")
    _add_common(p)
    p.set_defaults(func=cmd_gen_track)

    p = sub.add_parser("gen-expert", help="record clean autopilot demo laps")
    _add_common(p)
    p.add_argument("--track", default=None)
    p.add_argument("--demos", type=int, default=None, help="number of laps")
    p.add_argument("--pace-spread", type=float, default=None,
                   help="spread of per-lap pace scales below 1.0")
    p.set_defaults(func=cmd_gen_expert)

    p = sub.add_parser("fit-skills", help="fit a skill library to the demo bank")
    _add_common(p)
    p.add_argument("--track", default=None)
    p.add_argument("--bank", default=None)
    p.add_argument("--annotations", default=None)
    p.add_argument("--clusters", default=None)
    p.add_argument("--n-skills", type=int, default=None)
    p.add_argument("--max-segments", type=int, default=None)
    p.add_argument("--switch-penalty", type=float, default=None)
    p.add_argument("--w-aux", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--restarts", type=int, default=None)
    p.set_defaults(func=cmd_fit_skills)

    p = sub.add_parser("segment", help="segment one trajectory CSV with a fitted library")
    _add_common(p)
    p.add_argument("trajectory", help="1 Hz trajectory CSV")
    p.add_argument("--track", default=None)
    p.add_argument("--library", default=None)
    p.add_argument("--annotations", default=None)
    p.add_argument("--max-segments", type=int, default=None)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("zpd", help="score skills and pick the channel to coach")
    _add_common(p)
    p.add_argument("--track", default=None)
    p.add_argument("--bank", default=None)
    p.add_argument("--library", default=None)
    p.add_argument("--annotations", default=None)
    p.add_argument("--clusters", default=None)
    p.add_argument("--student", action="append", default=None,
                   help="unassisted trajectory CSV (repeatable)")
    p.add_argument("--assisted", action="append", default=None,
                   help="assisted trajectory CSV (repeatable)")
    p.set_defaults(func=cmd_zpd)

    p = sub.add_parser("run-study", help="run the five-stage study over a simulated cohort")
    _add_common(p)
    p.set_defaults(func=cmd_run_study)

    p = sub.add_parser("report", help="rebuild the delta table from a run log")
    _add_common(p)
    p.add_argument("runlog", help="run directory or runlog.jsonl path")
    p.add_argument("--track", default=None)
    p.add_argument("--bank", default=None)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("serve", help="serve live sessions over a WebSocket")
    _add_common(p)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8700)
    p.add_argument("--static", default=None, help="directory of cockpit assets to serve")
    p.set_defaults(func=cmd_serve)
    return parser


VALIDATION_ERRORS = (ConfigError, FileNotFoundError, NotADirectoryError,
                     json.JSONDecodeError, KeyError)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:    # pragma: no cover - defensive
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
