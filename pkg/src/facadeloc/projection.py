"""Inverse sensor model: predict the facades a virtual camera sees on the map.

Pose convention: ``gamma_deg`` is the yaw, 0 facing map north (+y) and
increasing clockwise.  In the camera frame x points right and z forward;
a map offset ``d`` maps to ``X = d . (cos g, -sin g)``, ``Z = d . (sin g, cos g)``.
Columns grow to the right: ``col = W/2 + f * X / Z``.

``theta_deg`` of a predicted facade is ``atan2(-dZ, dX) mod 180`` for the
edge direction ``(dX, dZ)``, the same convention the vanishing point
estimate in :mod:`facadeloc.scene` produces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mapdata import BuildingMap, edge_arrays
from .scene import CameraIntrinsics

_NEAR_M = 1e-9


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    gamma_deg: float = 0.0

    def __post_init__(self):
        g = float(self.gamma_deg) % 360.0
        object.__setattr__(self, "gamma_deg", 0.0 if g >= 360.0 else g)


@dataclass(frozen=True)
class PredictedFacade:
    start_col: int
    end_col: int
    theta_deg: float
    building: str
    distance_m: float


def pixel_to_bearing(col: float, intr: CameraIntrinsics) -> float:
    """Bearing in degrees of an image column, positive to the right."""
    return math.degrees(math.atan((col - intr.cx) / intr.focal_cols))


def bearing_to_pixel(bearing_deg: float, intr: CameraIntrinsics) -> float:
    if abs(bearing_deg) > intr.hfov_deg / 2.0 + 1e-12:
        raise ValueError(f"bearing {bearing_deg} deg outside the +/-{intr.hfov_deg / 2.0} deg field of view")
    return intr.cx + intr.focal_cols * math.tan(math.radians(bearing_deg))


def rasterize_extent(c_lo, c_hi, width_cols: int):
    """Half-open integer columns whose centers fall in [c_lo, c_hi)."""
    start = np.clip(np.floor(np.asarray(c_lo) + 0.5), 0, width_cols).astype(int)
    end = np.clip(np.floor(np.asarray(c_hi) + 0.5), 0, width_cols).astype(int)
    return start, end


@dataclass
class ProjectionBatch:
    """Projection of E map edges for O orientations at one camera location.

    All per-edge arrays have shape (O, E); ``building`` has shape (E,).
    ``seg_cam`` holds the clipped endpoints in camera (X, Z) coordinates,
    shape (O, E, 2, 2).
    """

    valid: np.ndarray
    start: np.ndarray
    end: np.ndarray
    theta: np.ndarray
    distance: np.ndarray
    seg_cam: np.ndarray
    building: np.ndarray


def _clip_constraint(a0, a1, tlo, thi, bad):
    da = a1 - a0
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -a0 / da
    tlo = np.where(da > 0, np.maximum(tlo, t), tlo)
    thi = np.where(da < 0, np.minimum(thi, t), thi)
    bad = bad | ((da == 0) & (a0 < 0))
    return tlo, thi, bad


def project_edges(segments: np.ndarray, building: np.ndarray, x: float, y: float,
                  gammas_deg: Sequence[float], intr: CameraIntrinsics) -> ProjectionBatch:
    """Clip and project map edges for every yaw in ``gammas_deg``.

    Edges whose outward normal (CCW polygons) points away from the camera
    are culled.  The surviving part of each edge is clipped to the frustum,
    projected, and dropped when it covers no column center.
    """
    segments = np.asarray(segments, dtype=float).reshape(-1, 2, 2)
    gam = np.radians(np.atleast_1d(np.asarray(gammas_deg, dtype=float)))[:, None]
    d0 = segments[:, 0, :] - (x, y)
    d1 = segments[:, 1, :] - (x, y)
    e = d1 - d0
    # outward normal of a CCW edge is (ey, -ex); facing when camera lies outside
    facing = -(d0[:, 0] * e[:, 1] - d0[:, 1] * e[:, 0]) > 0
    E = len(segments)
    keep = np.nonzero(facing)[0]
    d0, d1 = d0[keep], d1[keep]

    cg, sg = np.cos(gam), np.sin(gam)
    X0 = d0[:, 0] * cg - d0[:, 1] * sg
    Z0 = d0[:, 0] * sg + d0[:, 1] * cg
    X1 = d1[:, 0] * cg - d1[:, 1] * sg
    Z1 = d1[:, 0] * sg + d1[:, 1] * cg

    th = intr.half_fov_tan
    shape = X0.shape
    tlo = np.zeros(shape)
    thi = np.ones(shape)
    bad = np.zeros(shape, dtype=bool)
    tlo, thi, bad = _clip_constraint(th * Z0 + X0, th * Z1 + X1, tlo, thi, bad)
    tlo, thi, bad = _clip_constraint(th * Z0 - X0, th * Z1 - X1, tlo, thi, bad)
    tlo, thi, bad = _clip_constraint(Z0 - _NEAR_M, Z1 - _NEAR_M, tlo, thi, bad)
    valid = ~bad & (tlo < thi)

    dX, dZ = X1 - X0, Z1 - Z0
    Xa, Za = X0 + tlo * dX, Z0 + tlo * dZ
    Xb, Zb = X0 + thi * dX, Z0 + thi * dZ
    with np.errstate(divide="ignore", invalid="ignore"):
        ca = intr.cx + intr.focal_cols * Xa / Za
        cb = intr.cx + intr.focal_cols * Xb / Zb
    ca = np.where(valid, ca, 0.0)
    cb = np.where(valid, cb, 0.0)
    start, end = rasterize_extent(np.minimum(ca, cb), np.maximum(ca, cb), intr.width_cols)
    valid &= end > start

    theta = np.degrees(np.arctan2(-dZ, dX)) % 180.0
    theta = np.where(theta >= 180.0, 0.0, theta)
    dist = np.minimum(np.hypot(Xa, Za), np.hypot(Xb, Zb))
    seg_cam = np.stack([np.stack([Xa, Za], axis=-1), np.stack([Xb, Zb], axis=-1)], axis=-2)

    def scatter(a, fill):
        out = np.full((gam.shape[0], E) + a.shape[2:], fill, dtype=a.dtype)
        out[:, keep] = a
        return out

    return ProjectionBatch(scatter(valid, False), scatter(np.where(valid, start, 0), 0),
                           scatter(np.where(valid, end, 0), 0), scatter(theta, 0.0),
                           scatter(np.where(valid, dist, np.inf), np.inf), scatter(seg_cam, 0.0),
                           np.asarray(building))


def ray_depths(seg_cam: np.ndarray, cols: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Forward depth and segment parameter where column rays meet segments.

    ``seg_cam`` is (N, 2, 2) in camera (X, Z); ``cols`` are continuous
    column positions.  Returns arrays of shape (N, len(cols)); ``s`` is
    clamped to [0, 1].
    """
    u = (np.asarray(cols, dtype=float) - intr.cx) / intr.focal_cols
    A = seg_cam[:, 0, :][:, None, :]
    D = (seg_cam[:, 1, :] - seg_cam[:, 0, :])[:, None, :]
    denom = D[..., 0] - u * D[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(np.abs(denom) > 1e-15, (u * A[..., 1] - A[..., 0]) / denom, 0.0)
    s = np.clip(s, 0.0, 1.0)
    Z = A[..., 1] + s * D[..., 1]
    return Z, s


def _occlude(batch: ProjectionBatch, o: int, idx: np.ndarray, intr: CameraIntrinsics):
    """Per-column nearest-facade z-buffer for orientation ``o``.

    Returns (edge_index, start, end, distance) for every contiguous run of
    columns won by one edge.
    """
    W = intr.width_cols
    if len(idx) == 0:
        return []
    segs = batch.seg_cam[o, idx]
    centers = np.arange(W) + 0.5
    depth, _ = ray_depths(segs, centers, intr)
    cover = (centers[None, :] >= batch.start[o, idx][:, None]) & (centers[None, :] < batch.end[o, idx][:, None])
    depth = np.where(cover, depth, np.inf)
    winner = np.argmin(depth, axis=0)
    winner = np.where(np.isfinite(depth.min(axis=0)), winner, -1)
    runs = []
    k = 0
    while k < W:
        w = winner[k]
        j = k
        while j < W and winner[j] == w:
            j += 1
        if w >= 0:
            runs.append((int(w), k, j))
        k = j
    pieces = []
    for w, lo, hi in runs:
        _, s = ray_depths(segs[w:w + 1], np.array([lo, hi], dtype=float), intr)
        p = segs[w, 0] + s[0][:, None] * (segs[w, 1] - segs[w, 0])
        d = float(np.min(np.hypot(p[:, 0], p[:, 1])))
        pieces.append((int(idx[w]), lo, hi, d))
    pieces.sort(key=lambda t: (t[0], t[1]))
    return pieces


def project_map(bmap: BuildingMap, pose: Pose, intr: CameraIntrinsics,
                occlusion: bool = False) -> list[PredictedFacade]:
    """Predicted facades Z visible from ``pose``, in map edge order."""
    segments, bidx, ids = edge_arrays(bmap)
    if len(segments) == 0:
        return []
    batch = project_edges(segments, bidx, pose.x, pose.y, [pose.gamma_deg], intr)
    visible = np.nonzero(batch.valid[0])[0]
    if not occlusion:
        return [PredictedFacade(int(batch.start[0, e]), int(batch.end[0, e]), float(batch.theta[0, e]),
                                ids[bidx[e]], float(batch.distance[0, e])) for e in visible]
    return [PredictedFacade(lo, hi, float(batch.theta[0, e]), ids[bidx[e]], d)
            for e, lo, hi, d in _occlude(batch, 0, visible, intr)]
