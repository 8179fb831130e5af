"""Bundled benchmark assets: the default circuit, cluster map, and annotations.

Everything here is deterministic so the data files shipped under
``sacoach/data`` can be regenerated byte-for-byte with
``python -m sacoach.assets``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .autopilot import braking_aware_speeds
from .track import Track, chaikin_closed, resample_closed

DEFAULT_HALF_WIDTH = 4.0
CENTERLINE_SPACING = 2.0

# Circuit recipe: ("s", length_m) straights and ("a", degrees_ccw, radius_m)
# arcs, dead-reckoned from the start line heading +x. Turn angles sum to
# +360 degrees; the small closure miss is spread along the whole loop before
# smoothing. Gives roughly 1.2 km with a long straight, two fast sweepers,
# a tight hairpin and an S-shaped infield complex.
CIRCUIT_SEGMENTS: list[tuple] = [
    ("s", 280.0),
    ("a", 90.0, 60.0),
    ("s", 50.0),
    ("a", 180.0, 20.0),
    ("s", 60.0),
    ("a", -90.0, 28.0),
    ("s", 90.0),
    ("a", -90.0, 28.0),
    ("s", 60.0),
    ("a", 90.0, 45.0),
    ("s", 140.0),
    ("a", 90.0, 55.0),
    ("s", 40.0),
    ("a", 90.0, 60.0),
]

# Feedback vocabulary used by the bundled annotations. The id order matters
# for downstream tie-breaks: id 0 must not map to a control channel so that
# skills with no label evidence fall back to "no channel".
CLUSTERS = {
    0: {"description": "encouragement and reassurance", "control": "none"},
    1: {"description": "braking point and brake pressure", "control": "brake"},
    2: {"description": "throttle application and speed", "control": "throttle"},
    3: {"description": "steering and turn-in", "control": "steer"},
    4: {"description": "lane position relative to track edges", "control": "none"},
    5: {"description": "navigation and upcoming corners", "control": "none"},
    6: {"description": "general car handling", "control": "none"},
    7: {"description": "aiming at a reference point", "control": "none"},
}

ANNOTATION_SPACING = 12.0       # m between anchors along the centerline
NONE_SPRINKLE_PERIOD = 7        # every n-th anchor becomes a non-control cue
CORNER_CURVATURE = 0.01         # 1/m; tighter than R=100 counts as cornering
BRAKE_ZONE_MARGIN = 0.8         # m/s of backward-pass slowdown marks braking


def _dead_reckon(segments: list[tuple], step: float = 4.0) -> np.ndarray:
    pts = [np.array([0.0, 0.0])]
    heading = 0.0
    for seg in segments:
        if seg[0] == "s":
            length = float(seg[1])
            n = max(1, int(length / step))
            d = length / n
            for _ in range(n):
                pts.append(pts[-1] + d * np.array([math.cos(heading), math.sin(heading)]))
        else:
            _, deg, radius = seg
            ang = math.radians(float(deg))
            arc_len = abs(ang) * float(radius)
            n = max(3, int(arc_len / min(step, radius / 2.0)))
            dang = ang / n
            chord = 2.0 * radius * math.sin(abs(dang) / 2.0)
            for _ in range(n):
                mid = heading + dang / 2.0
                pts.append(pts[-1] + chord * np.array([math.cos(mid), math.sin(mid)]))
                heading += dang
    return np.asarray(pts)


def default_track() -> Track:
    """Construct the bundled circuit from the fixed recipe."""
    pts = _dead_reckon(CIRCUIT_SEGMENTS)
    # Spread the dead-reckoning closure error along the loop, then smooth.
    miss = pts[0] - pts[-1]
    weights = np.linspace(0.0, 1.0, len(pts))[:, None]
    closed = (pts + weights * miss[None, :])[:-1]
    smooth = chaikin_closed(closed, iterations=3)
    centerline = resample_closed(smooth, CENTERLINE_SPACING)
    return Track(centerline, half_width=DEFAULT_HALF_WIDTH, start_index=0)


def classify_zones(track: Track) -> np.ndarray:
    """Per-centerline-point coaching zone: cluster id of the dominant cue.

    Braking zones are where the braking-aware reference actually has to slow
    down below the curvature-limited profile; cornering is any point tighter
    than ``CORNER_CURVATURE``; everything else is throttle territory.
    """
    slowdown = track.target_speed_profile - braking_aware_speeds(track)
    zones = np.full(track.n_points, 2, dtype=int)
    # cornering trumps braking where they overlap: the backward pass keeps
    # slowing deep into multi-apex complexes, but mid-corner the driver's
    # job is the wheel, and braking cues belong on the approach
    zones[slowdown > BRAKE_ZONE_MARGIN] = 1
    zones[np.abs(track.curvature) >= CORNER_CURVATURE] = 3
    return zones


def synthesize_annotations(track: Track) -> list[dict]:
    """Coaching cue anchors along the centerline, one every few meters.

    A deterministic sprinkling of non-control cues (navigation,
    encouragement, ...) replaces every ``NONE_SPRINKLE_PERIOD``-th anchor so
    the whole vocabulary appears in the data.
    """
    zones = classify_zones(track)
    none_ids = [0, 4, 5, 6, 7]
    annotations: list[dict] = []
    s = 0.0
    i = 0
    while s < track.total_length - ANNOTATION_SPACING / 2.0:
        point = track.point_at(s)
        idx = int(track._raw_index(s))
        cluster = int(zones[idx])
        if i % NONE_SPRINKLE_PERIOD == NONE_SPRINKLE_PERIOD - 1:
            cluster = none_ids[(i // NONE_SPRINKLE_PERIOD) % len(none_ids)]
        annotations.append({
            "x": round(float(point[0]), 3),
            "y": round(float(point[1]), 3),
            "cluster_id": cluster,
        })
        s += ANNOTATION_SPACING
        i += 1
    return annotations


# -- bundled file access --------------------------------------------------------


def data_dir() -> Path:
    return Path(__file__).parent / "data"


def load_default_track() -> Track:
    return Track.load(data_dir() / "default_track.json")


def load_cluster_map_file() -> dict:
    return json.loads((data_dir() / "cluster_map.json").read_text())


def load_annotations_file() -> list[dict]:
    return json.loads((data_dir() / "annotations.json").read_text())


def write_assets(directory: str | Path | None = None) -> None:
    """Regenerate the bundled data files (deterministic)."""
    directory = Path(directory) if directory is not None else data_dir()
    directory.mkdir(parents=True, exist_ok=True)
    track = default_track()
    track.save(directory / "default_track.json")
    cluster_map = {str(k): v for k, v in CLUSTERS.items()}
    (directory / "cluster_map.json").write_text(
        json.dumps(cluster_map, indent=2, sort_keys=True) + "\n"
    )
    (directory / "annotations.json").write_text(
        json.dumps(synthesize_annotations(track), indent=2) + "\n"
    )
    from .students import DEFAULT_PARAMS
    (directory / "student_model.json").write_text(
        json.dumps(DEFAULT_PARAMS, indent=2, sort_keys=True) + "\n"
    )


if __name__ == "__main__":
    write_assets()
    print(f"assets written to {data_dir()}")
