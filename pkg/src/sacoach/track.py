"""Closed-loop track geometry: arclength parametrization, projection, curvature.

A track is a closed polyline centerline with a constant half width. The
closing segment from the last point back to the first is implicit; points are
stored without a duplicated endpoint. Progress along the track is arclength
in meters from the start line, measured along the centerline.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

V_MAX = 30.0        # m/s, straight-line speed cap for the target profile
A_LAT_MAX = 6.0     # m/s^2, lateral acceleration budget for cornering speed


class Track:
    """Immutable closed centerline with derived arclength tables.

    Parameters
    ----------
    centerline : (n, 2) array
        Ordered centerline points. The loop closes from the last point back
        to the first; do not duplicate the first point at the end.
    half_width : float
        Lateral distance from centerline to track edge, meters.
    start_index : int
        Index of the centerline point that marks the start line.
    """

    def __init__(self, centerline: np.ndarray, half_width: float, start_index: int = 0):
        pts = np.asarray(centerline, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
            raise ValueError(f"centerline must be (n>=3, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("centerline contains non-finite values")
        # Tolerate a stored duplicate endpoint by dropping it.
        if np.array_equal(pts[0], pts[-1]):
            pts = pts[:-1]
        if pts.shape[0] < 3:
            raise ValueError("centerline too short after closing")
        nxt = np.roll(pts, -1, axis=0)
        seg = nxt - pts
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            raise ValueError("consecutive centerline points must be distinct")
        if not (half_width > 0.0 and np.isfinite(half_width)):
            raise ValueError(f"half_width must be positive, got {half_width!r}")
        if not (0 <= int(start_index) < pts.shape[0]):
            raise ValueError(f"start_index out of range: {start_index}")

        self.centerline = pts
        self.half_width = float(half_width)
        self.start_index = int(start_index)
        self._seg = seg
        self._seg_len = seg_len
        self._seg_len_sq = seg_len * seg_len
        # Raw arclength of each vertex from point 0; progress is measured
        # from the start line, i.e. shifted by _s0 and wrapped.
        self.cum_s = np.concatenate(([0.0], np.cumsum(seg_len)))[:-1]
        self.total_length = float(np.sum(seg_len))
        self._s0 = float(self.cum_s[self.start_index])
        self._tangent = seg / seg_len[:, None]
        self.curvature = self._signed_curvature()
        self.target_speed_profile = np.minimum(
            V_MAX, np.sqrt(A_LAT_MAX / np.maximum(np.abs(self.curvature), 1e-9))
        )

    # -- derived geometry ---------------------------------------------------

    def _signed_curvature(self, smooth_window: int = 9) -> np.ndarray:
        """Menger curvature at each vertex, sign positive for left turns.

        Smoothed with a circular moving average so the discrete polyline
        does not produce a jagged speed profile.
        """
        pts = self.centerline
        prev = np.roll(pts, 1, axis=0)
        nxt = np.roll(pts, -1, axis=0)
        a = pts - prev
        b = nxt - pts
        c = nxt - prev
        cross = a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]
        la = np.hypot(a[:, 0], a[:, 1])
        lb = np.hypot(b[:, 0], b[:, 1])
        lc = np.hypot(c[:, 0], c[:, 1])
        denom = la * lb * lc
        kappa = np.where(denom > 0.0, 2.0 * cross / np.maximum(denom, 1e-12), 0.0)
        if smooth_window > 1:
            w = smooth_window
            kernel = np.ones(w) / w
            padded = np.concatenate([kappa[-(w // 2):], kappa, kappa[: w // 2]])
            kappa = np.convolve(padded, kernel, mode="valid")[: pts.shape[0]]
        return kappa

    @property
    def n_points(self) -> int:
        return self.centerline.shape[0]

    def wrap_s(self, s: float | np.ndarray) -> float | np.ndarray:
        return np.mod(s, self.total_length)

    # -- queries ------------------------------------------------------------

    def project(self, x: float, y: float) -> tuple[float, float]:
        """Project a point onto the centerline.

        Returns
        -------
        (s, d) : tuple of float
            ``s`` is arclength progress in [0, total_length) and ``d`` the
            signed lateral offset, positive to the left of travel direction.
            Among equidistant segments the lowest segment index wins.
        """
        q = np.array([x, y], dtype=float)
        rel = q - self.centerline
        t = (rel[:, 0] * self._seg[:, 0] + rel[:, 1] * self._seg[:, 1]) / self._seg_len_sq
        t = np.clip(t, 0.0, 1.0)
        foot = self.centerline + t[:, None] * self._seg
        diff = q - foot
        dist_sq = diff[:, 0] ** 2 + diff[:, 1] ** 2
        i = int(np.argmin(dist_sq))
        s = self.wrap_s(self.cum_s[i] + t[i] * self._seg_len[i] - self._s0)
        cross = self._seg[i, 0] * diff[i, 1] - self._seg[i, 1] * diff[i, 0]
        d = float(np.sqrt(dist_sq[i]))
        if cross < 0.0:
            d = -d
        return float(s), d

    def project_many(self, xy: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Vectorized :meth:`project` for an (m, 2) array of points."""
        q = np.asarray(xy, dtype=float)
        rel = q[:, None, :] - self.centerline[None, :, :]
        t = (rel[..., 0] * self._seg[:, 0] + rel[..., 1] * self._seg[:, 1]) / self._seg_len_sq
        t = np.clip(t, 0.0, 1.0)
        foot = self.centerline[None, :, :] + t[..., None] * self._seg[None, :, :]
        diff = q[:, None, :] - foot
        dist_sq = diff[..., 0] ** 2 + diff[..., 1] ** 2
        idx = np.argmin(dist_sq, axis=1)
        rows = np.arange(q.shape[0])
        ti = t[rows, idx]
        s = self.wrap_s(self.cum_s[idx] + ti * self._seg_len[idx] - self._s0)
        cross = (
            self._seg[idx, 0] * diff[rows, idx, 1]
            - self._seg[idx, 1] * diff[rows, idx, 0]
        )
        d = np.sqrt(dist_sq[rows, idx]) * np.where(cross < 0.0, -1.0, 1.0)
        return s, d

    def is_off_track(self, d: float | np.ndarray) -> bool | np.ndarray:
        return np.abs(d) > self.half_width

    def _raw_index(self, s: float | np.ndarray) -> np.ndarray:
        """Segment index containing progress ``s`` (measured from the start line)."""
        raw = self.wrap_s(np.asarray(s, dtype=float) + self._s0)
        return np.clip(np.searchsorted(self.cum_s, raw, side="right") - 1, 0, self.n_points - 1)

    def point_at(self, s: float) -> np.ndarray:
        """Centerline position at progress ``s`` (wrapped)."""
        raw = float(self.wrap_s(s + self._s0))
        i = int(np.searchsorted(self.cum_s, raw, side="right") - 1)
        frac = (raw - self.cum_s[i]) / self._seg_len[i]
        return self.centerline[i] + frac * self._seg[i]

    def tangent_heading_at(self, s: float) -> float:
        i = int(self._raw_index(s))
        return float(np.arctan2(self._tangent[i, 1], self._tangent[i, 0]))

    def curvature_at(self, s: float | np.ndarray) -> float | np.ndarray:
        idx = self._raw_index(s)
        return self.curvature[idx] if idx.ndim else float(self.curvature[int(idx)])

    def target_speed_at(self, s: float | np.ndarray) -> float | np.ndarray:
        idx = self._raw_index(s)
        if idx.ndim:
            return self.target_speed_profile[idx]
        return float(self.target_speed_profile[int(idx)])

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "centerline": [[float(x), float(y)] for x, y in self.centerline],
            "half_width": self.half_width,
            "start_index": self.start_index,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Track":
        try:
            return cls(
                np.asarray(data["centerline"], dtype=float),
                float(data["half_width"]),
                int(data.get("start_index", 0)),
            )
        except KeyError as exc:
            raise ValueError(f"track file missing field {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Track":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- polyline construction helpers -------------------------------------------


def chaikin_closed(points: np.ndarray, iterations: int = 3) -> np.ndarray:
    """Chaikin corner cutting on a closed polygon; stays closed."""
    pts = np.asarray(points, dtype=float)
    for _ in range(iterations):
        nxt = np.roll(pts, -1, axis=0)
        q = 0.75 * pts + 0.25 * nxt
        r = 0.25 * pts + 0.75 * nxt
        pts = np.empty((2 * pts.shape[0], 2))
        pts[0::2] = q
        pts[1::2] = r
    return pts


def resample_closed(points: np.ndarray, spacing: float) -> np.ndarray:
    """Resample a closed polyline to (nearly) uniform arclength spacing."""
    pts = np.asarray(points, dtype=float)
    closed = np.vstack([pts, pts[:1]])
    seg = np.diff(closed, axis=0)
    seg_len = np.hypot(seg[:, 0], seg[:, 1])
    cum = np.concatenate(([0.0], np.cumsum(seg_len)))
    total = cum[-1]
    n = max(8, int(round(total / spacing)))
    targets = np.linspace(0.0, total, n, endpoint=False)
    x = np.interp(targets, cum, closed[:, 0])
    y = np.interp(targets, cum, closed[:, 1])
    return np.column_stack([x, y])
