"""Skill discovery: weakly-supervised segmentation of expert laps.

A library of N discrete skills is fitted to expert trajectories by hard EM.
Each skill is an affine-Gaussian action predictor over state features plus a
categorical over feedback cluster ids; the E-step is an exact dynamic program
over segment boundaries, the M-step refits predictors by least squares and
categoricals by add-one counts.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .track import Track
from .trajectory import Trajectory
from .vehicle import CHANNELS, wrap_angle

log = logging.getLogger(__name__)

FEATURE_NAMES = ("speed", "curvature", "lateral_offset", "heading_error")
NO_LABEL = -1
ATTACH_RADIUS = 50.0    # m; annotations farther from every sample are dropped
LABEL_RADIUS = 10.0     # m; nearest sample must be this close to get labeled
NOISE_FLOOR = 0.02      # minimum per-channel action noise scale

DEFAULT_N_SKILLS = 8
# generous segment allowance: the bundled circuit alternates zone types about
# twenty times per lap, and starving the DP below that forces skills to
# straddle unrelated zones
DEFAULT_MAX_SEGMENTS = 20
DEFAULT_SWITCH_PENALTY = 1.0
DEFAULT_AUX_WEIGHT = 3.0
DEFAULT_RESTARTS = 5

VALID_CONTROLS = ("steer", "throttle", "brake", "none")


@dataclass(frozen=True)
class FeedbackAnnotation:
    """A coaching cue anchored to a 2D track position."""
    x: float
    y: float
    cluster_id: int

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError("annotation anchor must be finite")
        if self.cluster_id < 0:
            raise ValueError("cluster_id must be non-negative")


def load_annotations(path: str | Path) -> list[FeedbackAnnotation]:
    raw = json.loads(Path(path).read_text())
    return [FeedbackAnnotation(float(r["x"]), float(r["y"]), int(r["cluster_id"]))
            for r in raw]


class ClusterMap:
    """Cluster id -> description and control-channel association."""

    def __init__(self, entries: dict[int, dict]):
        if not entries:
            raise ValueError("empty cluster map")
        ids = sorted(entries)
        if ids != list(range(len(ids))):
            raise ValueError("cluster ids must be contiguous from 0")
        for cid, info in entries.items():
            if info["control"] not in VALID_CONTROLS:
                raise ValueError(f"cluster {cid}: bad control {info['control']!r}")
        self.entries = {int(c): {"description": str(v["description"]),
                                 "control": str(v["control"])}
                        for c, v in entries.items()}

    def __len__(self) -> int:
        return len(self.entries)

    def control_of(self, cluster_id: int) -> str:
        return self.entries[cluster_id]["control"]

    @classmethod
    def load(cls, path: str | Path) -> "ClusterMap":
        raw = json.loads(Path(path).read_text())
        return cls({int(k): v for k, v in raw.items()})

    def to_dict(self) -> dict:
        return {str(k): dict(v) for k, v in sorted(self.entries.items())}


def state_features(traj: Trajectory, track: Track) -> np.ndarray:
    """Per-sample feature matrix (speed, curvature, lateral offset, heading error)."""
    s, d = track.project_many(traj.xy)
    curv = track.curvature_at(s)
    tangent = np.array([track.tangent_heading_at(float(si)) for si in s])
    herr = np.array([wrap_angle(h - th) for h, th in zip(traj.heading, tangent)])
    return np.column_stack([traj.speed, curv, d, herr])


def attach_annotations(traj: Trajectory, annotations: list[FeedbackAnnotation]) -> np.ndarray:
    """Per-sample auxiliary label array; NO_LABEL where no annotation lands.

    Each annotation labels exactly the sample nearest to its anchor. Anchors
    farther than LABEL_RADIUS from their nearest sample label nothing;
    farther than ATTACH_RADIUS from every sample they are dropped with a
    warning. When several annotations pick the same sample, the later one in
    file order wins.
    """
    labels = np.full(len(traj.t), NO_LABEL, dtype=int)
    if not annotations:
        return labels
    xy = traj.xy
    dropped = 0
    overridden = 0
    for ann in annotations:
        d = np.hypot(xy[:, 0] - ann.x, xy[:, 1] - ann.y)
        k = int(np.argmin(d))
        if d[k] > ATTACH_RADIUS:
            dropped += 1
            continue
        if d[k] > LABEL_RADIUS:
            continue
        if labels[k] != NO_LABEL:
            overridden += 1
            log.debug("annotation at (%.1f, %.1f) overrides label on sample %d",
                      ann.x, ann.y, k)
        labels[k] = ann.cluster_id
    if dropped:
        log.warning("dropped %d annotations farther than %.0f m from every sample",
                    dropped, ATTACH_RADIUS)
    if overridden:
        log.warning("%d samples received multiple annotations; later file order kept",
                    overridden)
    return labels


@dataclass
class Skill:
    """Affine-Gaussian action predictor plus a categorical over cluster ids."""
    weights: np.ndarray   # (3, n_features + 1), last column is the intercept
    noise: np.ndarray     # (3,) per-channel sigma, > 0
    aux: np.ndarray       # (n_clusters,) normalized

    def predict(self, features: np.ndarray) -> np.ndarray:
        x1 = np.column_stack([features, np.ones(len(features))])
        return x1 @ self.weights.T

    def validate(self):
        if np.any(self.noise <= 0.0):
            raise ValueError("skill noise scales must be positive")
        if abs(float(self.aux.sum()) - 1.0) > 1e-9 or np.any(self.aux <= 0.0):
            raise ValueError("skill aux distribution must be strictly positive and normalized")


@dataclass
class SkillLibrary:
    skills: list[Skill]
    n_clusters: int
    w_aux: float
    switch_penalty: float
    max_segments: int = DEFAULT_MAX_SEGMENTS
    history: list[float] = field(default_factory=list)

    @property
    def n_skills(self) -> int:
        return len(self.skills)

    def validate(self):
        if self.max_segments < 1:
            raise ValueError("max_segments must be >= 1")
        for sk in self.skills:
            sk.validate()
            if sk.aux.shape != (self.n_clusters,):
                raise ValueError("aux distribution size mismatch")

    def to_dict(self) -> dict:
        return {
            "n_clusters": self.n_clusters,
            "w_aux": self.w_aux,
            "switch_penalty": self.switch_penalty,
            "max_segments": self.max_segments,
            "feature_names": list(FEATURE_NAMES),
            "history": list(self.history),
            "skills": [{
                "weights": sk.weights.tolist(),
                "noise": sk.noise.tolist(),
                "aux": sk.aux.tolist(),
            } for sk in self.skills],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SkillLibrary":
        skills = [Skill(weights=np.asarray(s["weights"], dtype=float),
                        noise=np.asarray(s["noise"], dtype=float),
                        aux=np.asarray(s["aux"], dtype=float))
                  for s in data["skills"]]
        lib = cls(skills=skills, n_clusters=int(data["n_clusters"]),
                  w_aux=float(data["w_aux"]),
                  switch_penalty=float(data["switch_penalty"]),
                  max_segments=int(data.get("max_segments", DEFAULT_MAX_SEGMENTS)),
                  history=[float(v) for v in data.get("history", [])])
        lib.validate()
        return lib

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SkillLibrary":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Segmentation:
    """Contiguous partition of a trajectory with per-segment skill posteriors."""
    boundaries: np.ndarray   # (m + 1,) fenceposts, boundaries[0] = 0, [-1] = n
    posteriors: np.ndarray   # (m, n_skills) row-stochastic
    max_segments: int        # the allowance the segmentation was computed under
    cost: float

    @property
    def n_segments(self) -> int:
        return len(self.boundaries) - 1

    @property
    def argmax_skills(self) -> np.ndarray:
        return np.argmax(self.posteriors, axis=1)

    def segment_slices(self) -> list[tuple[int, int]]:
        b = self.boundaries
        return [(int(b[i]), int(b[i + 1])) for i in range(self.n_segments)]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        n_sk = self.posteriors.shape[1]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["segment", "start_index", "end_index", "argmax_skill"]
                        + [f"p_{z}" for z in range(n_sk)])
        for i, (a, b) in enumerate(self.segment_slices()):
            writer.writerow([i, a, b - 1, int(self.argmax_skills[i])]
                            + [repr(float(p)) for p in self.posteriors[i]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _sample_costs(traj: Trajectory, track: Track, labels: np.ndarray,
                  library: SkillLibrary) -> np.ndarray:
    """Per-skill per-sample cost: action NLL plus weighted auxiliary NLL."""
    library.validate()
    feats = state_features(traj, track)
    actions = np.column_stack([traj.steer, traj.throttle, traj.brake])
    n = len(traj.t)
    costs = np.empty((library.n_skills, n))
    labeled = labels != NO_LABEL
    for z, sk in enumerate(library.skills):
        resid = actions - sk.predict(feats)
        nll = np.sum(0.5 * (resid / sk.noise) ** 2
                     + np.log(sk.noise) + 0.5 * np.log(2.0 * np.pi), axis=1)
        if library.w_aux > 0.0 and labeled.any():
            aux_nll = np.zeros(n)
            aux_nll[labeled] = -np.log(sk.aux[labels[labeled]])
            nll = nll + library.w_aux * aux_nll
        costs[z] = nll
    return costs


def segment_dp(traj: Trajectory, track: Track, labels: np.ndarray,
               library: SkillLibrary, max_segments: int | None = None,
               switch_penalty: float | None = None) -> Segmentation:
    """Exact minimum-cost segmentation with at most max_segments segments.

    Minimizes sum over segments of the best skill's accumulated per-sample
    cost, plus switch_penalty per internal boundary. Per-segment posteriors
    are the softmax of negative per-segment losses across skills. The
    allowance and penalty default to the values the library was fitted with.
    """
    lam = library.switch_penalty if switch_penalty is None else float(switch_penalty)
    if max_segments is None:
        max_segments = library.max_segments
    n = len(traj.t)
    if n < 1:
        raise ValueError("empty trajectory")
    max_segments = min(int(max_segments), n)
    if max_segments < 1:
        raise ValueError("max_segments must be >= 1")
    costs = _sample_costs(traj, track, labels, library)
    prefix = np.concatenate([np.zeros((library.n_skills, 1)),
                             np.cumsum(costs, axis=1)], axis=1)
    # seg_cost[i, j] = min over skills of cost of one segment spanning [i, j)
    seg_all = prefix[:, None, :] - prefix[:, :, None]    # (z, i, j)
    seg_cost = seg_all.min(axis=0)
    large = np.inf
    # dp[m][j]: best cost of covering [0, j) with exactly m segments
    dp = np.full((max_segments + 1, n + 1), large)
    parent = np.zeros((max_segments + 1, n + 1), dtype=int)
    dp[0, 0] = 0.0
    forbidden = np.tril_indices(n + 1, k=0)  # i >= j would make an empty segment
    for m in range(1, max_segments + 1):
        cand = dp[m - 1][:, None] + seg_cost
        cand[forbidden] = large
        best_i = np.argmin(cand, axis=0)
        dp[m] = cand[best_i, np.arange(n + 1)] + (lam if m > 1 else 0.0)
        parent[m] = best_i
    totals = dp[1:, n]
    m_best = int(np.argmin(totals)) + 1
    bounds = [n]
    j = n
    for m in range(m_best, 0, -1):
        j = int(parent[m, j])
        bounds.append(j)
    boundaries = np.array(bounds[::-1], dtype=int)
    post = np.empty((m_best, library.n_skills))
    for i in range(m_best):
        a, b = boundaries[i], boundaries[i + 1]
        losses = prefix[:, b] - prefix[:, a]
        stable = -(losses - losses.min())
        w = np.exp(stable)
        post[i] = w / w.sum()
    return Segmentation(boundaries=boundaries, posteriors=post,
                        max_segments=max_segments, cost=float(totals[m_best - 1]))


def compression_ratio(seg: Segmentation) -> float:
    """Allowance divided by the number of maximal runs of identical skills."""
    labels = seg.argmax_skills
    runs = sum(1 for _ in itertools.groupby(labels))
    return seg.max_segments / runs


def skill_to_control(library: SkillLibrary, cmap: ClusterMap, z: int) -> str:
    """Control channel associated with skill z's dominant feedback cluster."""
    cluster = int(np.argmax(library.skills[z].aux))  # ties resolve to lowest id
    return cmap.control_of(cluster)


def _fit_skill(features: np.ndarray, actions: np.ndarray, labels: np.ndarray,
               n_clusters: int) -> Skill:
    """Least-squares affine predictor with constrained-MLE noise, add-one aux."""
    x1 = np.column_stack([features, np.ones(len(features))])
    # minimum-norm least squares stays an exact NLL minimizer even when a
    # short segment makes the system singular
    weights = np.linalg.lstsq(x1, actions, rcond=None)[0].T
    resid = actions - x1 @ weights.T
    noise = np.maximum(NOISE_FLOOR, np.sqrt(np.mean(resid * resid, axis=0)))
    counts = np.ones(n_clusters)
    lab = labels[labels != NO_LABEL]
    if lab.size:
        counts += np.bincount(lab, minlength=n_clusters)
    return Skill(weights=weights, noise=noise, aux=counts / counts.sum())


def _uniform_aux(n_clusters: int) -> np.ndarray:
    return np.full(n_clusters, 1.0 / n_clusters)


def _pseudo_count_nll(library: SkillLibrary) -> float:
    """Auxiliary NLL of the add-one pseudo-counts; part of the EM objective."""
    total = 0.0
    for sk in library.skills:
        total -= float(np.sum(np.log(sk.aux)))
    return library.w_aux * total


def fit_library(demos: list[Trajectory], track: Track,
                annotations: list[FeedbackAnnotation], n_clusters: int,
                n_skills: int = DEFAULT_N_SKILLS,
                max_segments: int = DEFAULT_MAX_SEGMENTS,
                switch_penalty: float = DEFAULT_SWITCH_PENALTY,
                w_aux: float = DEFAULT_AUX_WEIGHT,
                iterations: int = 30, seed: int = 0,
                restarts: int = DEFAULT_RESTARTS,
                ) -> tuple[SkillLibrary, list[Segmentation]]:
    """Hard-EM fit of a skill library to 1 Hz expert demos.

    Runs ``restarts`` independent fits from seeded random inits and keeps
    the one with the lowest final objective. Returns the fitted library
    (with its objective history) and the final per-demo segmentations.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best: tuple[SkillLibrary, list[Segmentation]] | None = None
    for r in range(restarts):
        init = np.random.SeedSequence(entropy=seed, spawn_key=(r,))
        lib, segs = _fit_once(demos, track, annotations, n_clusters, n_skills,
                              max_segments, switch_penalty, w_aux, iterations,
                              init)
        if best is None or lib.history[-1] < best[0].history[-1]:
            best = (lib, segs)
    return best


def _fit_once(demos, track, annotations, n_clusters, n_skills, max_segments,
              switch_penalty, w_aux, iterations, seed_seq,
              ) -> tuple[SkillLibrary, list[Segmentation]]:
    """One EM run. The objective — total DP cost plus the auxiliary NLL of
    the smoothing pseudo-counts — is non-increasing across iterations: each
    M-step exactly minimizes it over parameters (least squares;
    constrained-MLE noise; add-one categoricals) and each E-step over
    segmentations. Skills left without samples are refit to the currently
    worst-explained segment with a uniform categorical, which cannot raise
    the objective since an unused skill only widens the E-step's choices.
    """
    if not demos:
        raise ValueError("no demos")
    if n_skills < 1:
        raise ValueError("n_skills must be >= 1")
    rng = np.random.default_rng(seed_seq)
    all_labels = [attach_annotations(d, annotations) for d in demos]
    all_feats = [state_features(d, track) for d in demos]
    all_actions = [np.column_stack([d.steer, d.throttle, d.brake]) for d in demos]

    # init: chop each demo into max_segments chunks, deal skills at random
    assign = [np.repeat(rng.integers(0, n_skills, size=max_segments),
                        -(-len(d.t) // max_segments))[:len(d.t)] for d in demos]

    library = SkillLibrary(skills=[], n_clusters=n_clusters, w_aux=w_aux,
                           switch_penalty=switch_penalty,
                           max_segments=max_segments)
    prev_assign = None
    for it in range(iterations):
        # M-step
        skills: list[Skill] = []
        for z in range(n_skills):
            feats = np.concatenate([f[a == z] for f, a in zip(all_feats, assign)])
            acts = np.concatenate([ac[a == z] for ac, a in zip(all_actions, assign)])
            labs = np.concatenate([l[a == z] for l, a in zip(all_labels, assign)])
            if len(feats) == 0:
                skills.append(None)  # filled by the restart rule below
            else:
                skills.append(_fit_skill(feats, acts, labs, n_clusters))
        library.skills = [s for s in skills]
        empty = [z for z, s in enumerate(skills) if s is None]
        if empty:
            library.skills = [s if s is not None else
                              Skill(weights=np.zeros((3, len(FEATURE_NAMES) + 1)),
                                    noise=np.full(3, 1.0),
                                    aux=_uniform_aux(n_clusters))
                              for s in skills]
            _restart_empty_skills(library, empty, demos, track, all_labels,
                                  all_feats, all_actions, assign, n_clusters)

        # E-step
        segs = [segment_dp(d, track, l, library, max_segments)
                for d, l in zip(demos, all_labels)]
        assign = []
        for d, seg in zip(demos, segs):
            a = np.empty(len(d.t), dtype=int)
            for (lo, hi), z in zip(seg.segment_slices(), seg.argmax_skills):
                a[lo:hi] = z
            assign.append(a)
        objective = sum(s.cost for s in segs) + _pseudo_count_nll(library)
        library.history.append(float(objective))
        if prev_assign is not None and all(np.array_equal(a, b)
                                           for a, b in zip(assign, prev_assign)):
            break
        prev_assign = [a.copy() for a in assign]
    return library, segs


def _restart_empty_skills(library: SkillLibrary, empty: list[int],
                          demos, track, all_labels, all_feats, all_actions,
                          assign, n_clusters) -> None:
    """Refit unused skills to the worst-explained segments, one segment each.

    Only unused skills change, so the current assignment's cost is untouched
    and the next E-step minimizes over a strictly wider set of options.
    """
    segments: list[tuple[float, int, int, int]] = []  # (cost, demo, lo, hi)
    for di, (d, lab, a) in enumerate(zip(demos, all_labels, assign)):
        costs = _sample_costs(d, track, lab, library)
        per_sample = costs[a, np.arange(len(a))]
        lo = 0
        for _, grp in itertools.groupby(a):
            hi = lo + len(list(grp))
            segments.append((float(per_sample[lo:hi].sum()), di, lo, hi))
            lo = hi
    segments.sort(reverse=True)
    for z, (cost, di, lo, hi) in zip(empty, segments):
        refit = _fit_skill(all_feats[di][lo:hi], all_actions[di][lo:hi],
                           all_labels[di][lo:hi], n_clusters)
        # uniform aux: the restarted skill claims no label evidence yet
        library.skills[z] = Skill(weights=refit.weights, noise=refit.noise,
                                  aux=_uniform_aux(n_clusters))
        log.debug("restarted empty skill %d from segment (%d, %d:%d) cost %.2f",
                  z, di, lo, hi, cost)


def reconstruction_mse(demos: list[Trajectory], track: Track,
                       library: SkillLibrary, segs: list[Segmentation]) -> float:
    """Mean squared action error under each segment's argmax skill."""
    total = 0.0
    count = 0
    for demo, seg in zip(demos, segs):
        feats = state_features(demo, track)
        actions = np.column_stack([demo.steer, demo.throttle, demo.brake])
        for (lo, hi), z in zip(seg.segment_slices(), seg.argmax_skills):
            pred = library.skills[z].predict(feats[lo:hi])
            err = actions[lo:hi] - pred
            total += float(np.sum(err * err))
            count += err.size
    return total / count
