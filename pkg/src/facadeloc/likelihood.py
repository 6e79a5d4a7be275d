"""Pose likelihood from predicted (map) and observed (image) facades.

The likelihood is the ratio ``S / S_max``: S accumulates, column by column,
``|cos(theta_pred - theta_obs)| * w`` over intersecting pairs and S_max is
the weighted union of observed and predicted coverage.  Both are computed
by sweeping the elementary column intervals delimited by facade
endpoints, never by touching single columns.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .mapdata import BuildingMap, edge_arrays
from .projection import Pose, PredictedFacade, ProjectionBatch, _occlude, project_edges, project_map
from .scene import CameraIntrinsics, ObservedFacade, SceneModel


@dataclass(frozen=True)
class LikelihoodParams:
    sigma_m: float = 50.0
    identity_aware: bool = False
    cap_per_column: bool = True
    occlusion: bool = False

    def __post_init__(self):
        if not self.sigma_m > 0:
            raise ValueError(f"sigma_m must be positive, got {self.sigma_m}")


def distance_weight(d_m, sigma_m: float):
    """Unnormalized Gaussian kernel, 1 at zero distance."""
    d = np.asarray(d_m, dtype=float)
    w = np.exp(-(d * d) / (2.0 * sigma_m * sigma_m))
    return float(w) if w.ndim == 0 else w


def identity_weights(obs: Sequence[ObservedFacade], pred_buildings: Sequence[str]) -> np.ndarray:
    """(P, L) weight of predicted facade p matching observed facade l.

    Observed facades without an identity distribution match everything.
    """
    out = np.ones((len(pred_buildings), len(obs)))
    for j, f in enumerate(obs):
        if f.identity_dist is not None:
            out[:, j] = [f.identity_dist.get(b, 0.0) for b in pred_buildings]
    return out


def interval_scores(ps: np.ndarray, pe: np.ndarray, pw: np.ndarray, terms: np.ndarray,
                    os_: np.ndarray, oe: np.ndarray, cap_per_column: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """S and S_max for a batch of predictions against one observation set.

    ``ps``, ``pe``, ``pw`` have shape (B, P): half-open predicted extents
    (empty rows use ps == pe) and distance weights.  ``terms`` (B, P, L)
    holds the per-pair column contribution.  ``os_``, ``oe`` (L,) are the
    observed extents.  Returns two arrays of shape (B,).
    """
    ps = np.asarray(ps)
    B, P = ps.shape
    L = len(os_)
    if P == 0 and L == 0:
        return np.zeros(B), np.zeros(B)
    os_ = np.asarray(os_, dtype=ps.dtype)
    oe = np.asarray(oe, dtype=ps.dtype)
    os_b = np.broadcast_to(os_, (B, L))
    oe_b = np.broadcast_to(oe, (B, L))
    bp = np.sort(np.concatenate([ps, pe, os_b, oe_b], axis=1), axis=1)
    lo, hi = bp[:, :-1], bp[:, 1:]
    length = (hi - lo).astype(float)  # (B, S)
    p_on = (ps[:, None, :] <= lo[:, :, None]) & (lo[:, :, None] < pe[:, None, :])  # (B, S, P)

    if _disjoint(os_, oe):
        # every elementary segment lies in at most one observed facade
        order = np.argsort(os_, kind="stable")
        k = np.searchsorted(os_[order], lo, side="right") - 1
        kc = np.clip(k, 0, max(L - 1, 0))
        inside = (k >= 0) & (lo < oe[order][kc]) if L else np.zeros_like(lo, dtype=bool)
        pred_w = np.where(p_on, pw[:, None, :], 0.0).max(axis=2, initial=0.0)
        smax = np.where(inside, length, pred_w * length).sum(axis=1)
        if P == 0 or L == 0:
            return np.zeros(B), smax
        if cap_per_column:
            # (B, P, S) term of each prediction against the segment's observed facade
            t = np.take_along_axis(terms[:, :, order], np.broadcast_to(kc[:, None, :], (B, P, kc.shape[1])), axis=2)
            best = np.where(p_on & inside[:, :, None], t.transpose(0, 2, 1), 0.0).max(axis=2)
            return (best * length).sum(axis=1), smax
    else:
        o_on = (os_b[:, None, :] <= lo[:, :, None]) & (lo[:, :, None] < oe_b[:, None, :])  # (B, S, L)
        pred_w = np.where(p_on, pw[:, None, :], 0.0).max(axis=2, initial=0.0)
        smax = np.where(o_on.any(axis=2), length, pred_w * length).sum(axis=1)
        if P == 0 or L == 0:
            return np.zeros(B), smax
        if cap_per_column:
            best = np.where(p_on[..., None] & o_on[:, :, None, :], terms[:, None, :, :], 0.0)
            return (best.max(axis=(2, 3)) * length).sum(axis=1), smax
    overlap = (np.minimum(pe[:, :, None], oe_b[:, None, :])
               - np.maximum(ps[:, :, None], os_b[:, None, :])).clip(min=0)
    return (terms * overlap).sum(axis=(1, 2)), smax


def _disjoint(os_, oe) -> bool:
    order = np.argsort(os_, kind="stable")
    lo, hi = np.asarray(os_)[order], np.asarray(oe)[order]
    return bool(np.all(lo[1:] >= hi[:-1]))


def _pair_terms(ptheta, pw, id_w, obs_theta):
    dtheta = np.radians(ptheta[..., None] - obs_theta)
    return np.abs(np.cos(dtheta)) * pw[..., None] * id_w


def _score_lists(Z: Sequence[PredictedFacade], Zhat: Sequence[ObservedFacade], params: LikelihoodParams):
    ps = np.array([[z.start_col for z in Z]], dtype=int).reshape(1, -1)
    pe = np.array([[z.end_col for z in Z]], dtype=int).reshape(1, -1)
    pw = distance_weight(np.array([z.distance_m for z in Z], dtype=float), params.sigma_m).reshape(1, -1)
    ptheta = np.array([z.theta_deg for z in Z], dtype=float).reshape(1, -1)
    if params.identity_aware:
        id_w = identity_weights(Zhat, [z.building for z in Z])[None]
    else:
        id_w = np.ones((1, len(Z), len(Zhat)))
    obs_theta = np.array([f.theta_deg for f in Zhat], dtype=float)
    terms = _pair_terms(ptheta, pw, id_w, obs_theta)
    os_ = np.array([f.start_col for f in Zhat], dtype=int)
    oe = np.array([f.end_col for f in Zhat], dtype=int)
    s, smax = interval_scores(ps, pe, pw, terms, os_, oe, params.cap_per_column)
    return float(s[0]), float(smax[0])


def similarity(Z: Sequence[PredictedFacade], Zhat: Sequence[ObservedFacade],
               params: LikelihoodParams = LikelihoodParams()) -> float:
    return _score_lists(Z, Zhat, params)[0]


def similarity_max(Z: Sequence[PredictedFacade], Zhat: Sequence[ObservedFacade],
                   params: LikelihoodParams = LikelihoodParams()) -> float:
    return _score_lists(Z, Zhat, params)[1]


def likelihood_ratio(s, smax):
    s = np.asarray(s, dtype=float)
    smax = np.asarray(smax, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(smax > 0, s / np.where(smax > 0, smax, 1.0), 0.0)
    return p


def pose_likelihood(scene: SceneModel, pose: Pose, bmap: BuildingMap,
                    intr: Optional[CameraIntrinsics] = None,
                    params: LikelihoodParams = LikelihoodParams()) -> float:
    intr = intr or scene.intrinsics
    Z = project_map(bmap, pose, intr, occlusion=params.occlusion)
    s, smax = _score_lists(Z, scene.facades, params)
    return float(likelihood_ratio(s, smax))


# -- batched evaluation over yaw ---------------------------------------------

@dataclass
class _Padded:
    start: np.ndarray     # (O, P)
    end: np.ndarray
    theta: np.ndarray
    weight: np.ndarray
    building: np.ndarray  # (O, P) index into map ids, -1 when padded
    distance: np.ndarray


def _compact(batch: ProjectionBatch, sigma_m: float) -> _Padded:
    valid = batch.valid
    O = valid.shape[0]
    P = int(valid.sum(axis=1).max()) if valid.size else 0
    order = np.argsort(~valid, axis=1, kind="stable")[:, :P]
    take = lambda a: np.take_along_axis(a, order, axis=1)
    keep = take(valid)
    bld = np.broadcast_to(batch.building[None, :], valid.shape)
    dist = np.where(keep, take(batch.distance), np.inf)
    w = distance_weight(np.where(keep, dist, 0.0), sigma_m)
    return _Padded(np.where(keep, take(batch.start), 0), np.where(keep, take(batch.end), 0),
                   take(batch.theta), np.where(keep, w, 0.0), np.where(keep, take(bld), -1), dist)


def _rows(batch: ProjectionBatch, idx: np.ndarray) -> ProjectionBatch:
    return ProjectionBatch(batch.valid[idx], batch.start[idx], batch.end[idx], batch.theta[idx],
                           batch.distance[idx], batch.seg_cam[idx], batch.building)


def _occluded_padded(batch: ProjectionBatch, intr: CameraIntrinsics, sigma_m: float) -> _Padded:
    rows = []
    for o in range(batch.valid.shape[0]):
        idx = np.nonzero(batch.valid[o])[0]
        rows.append(_occlude(batch, o, idx, intr))
    O = len(rows)
    P = max((len(r) for r in rows), default=0)
    out = _Padded(np.zeros((O, P), dtype=int), np.zeros((O, P), dtype=int), np.zeros((O, P)),
                  np.zeros((O, P)), np.full((O, P), -1), np.full((O, P), np.inf))
    for o, r in enumerate(rows):
        for p, (e, lo, hi, d) in enumerate(r):
            out.start[o, p], out.end[o, p] = lo, hi
            out.theta[o, p] = batch.theta[o, e]
            out.weight[o, p] = distance_weight(d, sigma_m)
            out.building[o, p] = batch.building[e]
            out.distance[o, p] = d
    return out


class SceneScorer:
    """Vectorized likelihood of one scene over many poses of one map."""

    GROUP = 30

    def __init__(self, scene: SceneModel, bmap: BuildingMap, intr: Optional[CameraIntrinsics] = None,
                 params: LikelihoodParams = LikelihoodParams()):
        self.scene = scene
        self.bmap = bmap
        self.intr = intr or scene.intrinsics
        self.params = params
        self.segments, self.bidx, self.ids = edge_arrays(bmap)
        obs = scene.facades
        self.obs_start = np.array([f.start_col for f in obs], dtype=int)
        self.obs_end = np.array([f.end_col for f in obs], dtype=int)
        self.obs_theta = np.array([f.theta_deg for f in obs], dtype=float)
        # (n_buildings + 1, L): last row serves padded predictions
        idw = identity_weights(obs, self.ids) if params.identity_aware else np.ones((len(self.ids), len(obs)))
        self.id_table = np.vstack([idw, np.zeros((1, len(obs)))])

    def project(self, x: float, y: float, gammas_deg: Sequence[float]) -> _Padded:
        if len(self.segments) == 0:
            O = len(np.atleast_1d(gammas_deg))
            empty = np.zeros((O, 0))
            return _Padded(empty.astype(int), empty.astype(int), empty, empty,
                           empty.astype(int), empty)
        batch = project_edges(self.segments, self.bidx, x, y, gammas_deg, self.intr)
        if self.params.occlusion:
            return _occluded_padded(batch, self.intr, self.params.sigma_m)
        return _compact(batch, self.params.sigma_m)

    def scores(self, x: float, y: float, gammas_deg: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
        """(S, S_max) for each yaw at location (x, y)."""
        gammas = np.atleast_1d(np.asarray(gammas_deg, dtype=float))
        if self.params.occlusion or len(self.segments) == 0 or len(gammas) <= self.GROUP:
            return self.scores_padded(self.project(x, y, gammas))
        batch = project_edges(self.segments, self.bidx, x, y, gammas, self.intr)
        # yaws see very different numbers of edges; pad within groups of similar count
        order = np.argsort(batch.valid.sum(axis=1), kind="stable")
        s = np.zeros(len(gammas))
        smax = np.zeros(len(gammas))
        for chunk in np.array_split(order, -(-len(order) // self.GROUP)):
            s[chunk], smax[chunk] = self.scores_padded(_compact(_rows(batch, chunk), self.params.sigma_m))
        return s, smax

    def scores_padded(self, pad: _Padded) -> tuple[np.ndarray, np.ndarray]:
        id_w = self.id_table[pad.building]  # (O, P, L)
        terms = _pair_terms(pad.theta, pad.weight, id_w, self.obs_theta)
        return interval_scores(pad.start, pad.end, pad.weight, terms,
                               self.obs_start, self.obs_end, self.params.cap_per_column)

    def likelihoods(self, x: float, y: float, gammas_deg: Sequence[float]) -> np.ndarray:
        s, smax = self.scores(x, y, gammas_deg)
        return likelihood_ratio(s, smax)

    def column_buildings(self, pad: _Padded) -> np.ndarray:
        """(O, W) index of the nearest predicted building per column, -1 if none."""
        W = self.intr.width_cols
        cols = np.arange(W)
        cover = (pad.start[..., None] <= cols) & (cols < pad.end[..., None])  # (O, P, W)
        depth = np.where(cover, pad.distance[..., None], np.inf)
        if depth.shape[1] == 0:
            return np.full((depth.shape[0], W), -1)
        nearest = np.argmin(depth, axis=1)
        bld = np.take_along_axis(pad.building, nearest, axis=1)
        return np.where(np.isfinite(depth.min(axis=1)), bld, -1)
