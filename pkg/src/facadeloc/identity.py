"""Building identities for image pixels.

Reference views get identities from the map: every building pixel takes
the identity of the nearest predicted facade covering its column, either
at the single most likely pose (greedy) or accumulated over all sampled
poses weighted by their likelihood (marginalized).  Query views inherit
identities through feature matches with labeled reference views.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .likelihood import LikelihoodParams, SceneScorer, likelihood_ratio
from .localizer import LikelihoodGrid, PoseSampling, reference_sampling
from .mapdata import BuildingMap, FormatError, ValidationError
from .projection import Pose, project_map
from .scene import CameraIntrinsics, ObservedFacade, SceneModel


class PixelIdentityField:
    """Per-pixel distribution over building ids.

    ``probs`` has shape (height, width, len(ids)); an all-zero pixel carries
    no identity.
    """

    def __init__(self, width: int, height: int, ids: Sequence[str], probs: Optional[np.ndarray] = None):
        self.width = int(width)
        self.height = int(height)
        self.ids = tuple(ids)
        if probs is None:
            probs = np.zeros((self.height, self.width, len(self.ids)))
        probs = np.asarray(probs, dtype=float)
        if probs.shape != (self.height, self.width, len(self.ids)):
            raise ValidationError(f"probability array shape {probs.shape} does not match field")
        if probs.size and (probs.min() < 0 or probs.sum(axis=2).max() > 1 + 1e-6):
            raise ValidationError("pixel probabilities must be non-negative and sum to at most 1")
        self.probs = probs

    @classmethod
    def empty(cls, width: int, height: int) -> "PixelIdentityField":
        return cls(width, height, ())

    def __eq__(self, other) -> bool:
        if not isinstance(other, PixelIdentityField):
            return NotImplemented
        return (self.width, self.height) == (other.width, other.height) and \
            _as_dict_rows(self) == _as_dict_rows(other)

    @property
    def labeled(self) -> np.ndarray:
        """Boolean (height, width) mask of pixels carrying an identity."""
        return self.probs.sum(axis=2) > 0

    def argmax_ids(self) -> np.ndarray:
        """(height, width) object array of the most probable id, None if unlabeled."""
        out = np.full((self.height, self.width), None, dtype=object)
        if self.ids:
            best = np.argmax(self.probs, axis=2)
            lab = self.labeled
            out[lab] = np.asarray(self.ids, dtype=object)[best[lab]]
        return out

    def at(self, col: int, row: int) -> dict[str, float]:
        v = self.probs[row, col]
        return {b: float(p) for b, p in zip(self.ids, v) if p > 0}

    def normalized(self) -> "PixelIdentityField":
        tot = self.probs.sum(axis=2, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            p = np.where(tot > 0, self.probs / np.where(tot > 0, tot, 1.0), 0.0)
        return PixelIdentityField(self.width, self.height, self.ids, p)


def _as_dict_rows(f: PixelIdentityField):
    rows, cols = np.nonzero(f.labeled)
    return [(int(c), int(r), f.at(c, r)) for r, c in zip(rows, cols)]


def field_from_columns(mask: np.ndarray, col_dist: np.ndarray, ids: Sequence[str]) -> PixelIdentityField:
    """Paint per-column distributions ``col_dist`` (W, K) onto building pixels."""
    h, w = mask.shape
    probs = mask[:, :, None] * col_dist[None, :, :]
    return PixelIdentityField(w, h, ids, probs)


def _compact_ids(f: PixelIdentityField) -> PixelIdentityField:
    """Drop ids with no mass, keep the rest in sorted order."""
    used = f.probs.reshape(-1, len(f.ids)).sum(axis=0) > 0 if f.ids else np.zeros(0, dtype=bool)
    keep = sorted((b, k) for k, b in enumerate(f.ids) if used[k])
    return PixelIdentityField(f.width, f.height, [b for b, _ in keep],
                              f.probs[:, :, [k for _, k in keep]] if keep else None)


def _building_mask(scene: SceneModel) -> np.ndarray:
    if scene.segmentation is None:
        raise ValidationError("assigning pixel identities needs a semantic label map")
    return scene.segmentation.building_mask


def identity_at_pose(scene: SceneModel, pose: Pose, bmap: BuildingMap,
                     intr: Optional[CameraIntrinsics] = None, occlusion: bool = False) -> PixelIdentityField:
    """Hard assignment under one pose; overlapping predictions go to the nearest."""
    intr = intr or scene.intrinsics
    mask = _building_mask(scene)
    ids = bmap.ids
    col_dist = np.zeros((intr.width_cols, len(ids)))
    nearest = np.full(intr.width_cols, np.inf)
    slot = {b: k for k, b in enumerate(ids)}
    for z in project_map(bmap, pose, intr, occlusion=occlusion):
        cols = np.arange(z.start_col, z.end_col)
        win = cols[z.distance_m < nearest[cols]]
        nearest[win] = z.distance_m
        col_dist[win] = 0.0
        col_dist[win, slot[z.building]] = 1.0
    return _compact_ids(field_from_columns(mask, col_dist, ids))


@dataclass
class ReferenceLabeling:
    """Likelihood grid plus per-pose column assignments of a reference view."""

    grid: LikelihoodGrid
    column_buildings: np.ndarray  # (L, O, W) building index, -1 if none
    ids: list[str]

    def assignment(self, li: int, oi: int, mask: np.ndarray) -> PixelIdentityField:
        lab = self.column_buildings[li, oi]
        col_dist = np.zeros((len(lab), len(self.ids)))
        hit = lab >= 0
        col_dist[np.nonzero(hit)[0], lab[hit]] = 1.0
        return _compact_ids(field_from_columns(mask, col_dist, self.ids))


def score_reference(scene: SceneModel, bmap: BuildingMap, sampling: PoseSampling,
                    intr: Optional[CameraIntrinsics] = None,
                    params: LikelihoodParams = LikelihoodParams()) -> ReferenceLabeling:
    """Evaluate every sampled pose once, keeping likelihoods and column labels."""
    scorer = SceneScorer(scene, bmap, intr, params)
    L, O = len(sampling.locations), len(sampling.orientations)
    W = scorer.intr.width_cols
    values = np.zeros((L, O))
    labels = np.full((L, O, W), -1, dtype=int)
    for i, (x, y) in enumerate(sampling.locations):
        pad = scorer.project(float(x), float(y), sampling.orientations)
        if scene.facades:
            values[i] = likelihood_ratio(*scorer.scores_padded(pad))
        labels[i] = scorer.column_buildings(pad)
    return ReferenceLabeling(LikelihoodGrid(sampling, values), labels, scorer.ids)


def _sampling_for(geotag, sampling):
    if sampling is None:
        if geotag is None:
            raise ValueError("need a geotag or an explicit pose sampling")
        return reference_sampling(geotag)
    return sampling


def label_reference_greedy(scene: SceneModel, geotag: Optional[Sequence[float]], bmap: BuildingMap,
                           intr: Optional[CameraIntrinsics] = None, sampling: Optional[PoseSampling] = None,
                           params: LikelihoodParams = LikelihoodParams(),
                           labeling: Optional[ReferenceLabeling] = None) -> PixelIdentityField:
    """Identities under the single most likely pose (first in scan order on ties)."""
    lab = labeling or score_reference(scene, bmap, _sampling_for(geotag, sampling), intr, params)
    mask = _building_mask(scene)
    vals = lab.grid.values
    if vals.max() <= 0:
        return PixelIdentityField.empty(mask.shape[1], mask.shape[0])
    li, oi = divmod(int(np.argmax(vals)), vals.shape[1])
    return lab.assignment(li, oi, mask)


def label_reference_marginalized(scene: SceneModel, geotag: Optional[Sequence[float]], bmap: BuildingMap,
                                 intr: Optional[CameraIntrinsics] = None,
                                 sampling: Optional[PoseSampling] = None,
                                 params: LikelihoodParams = LikelihoodParams(),
                                 labeling: Optional[ReferenceLabeling] = None) -> PixelIdentityField:
    """Per-pixel identity distribution summed over poses weighted by likelihood."""
    lab = labeling or score_reference(scene, bmap, _sampling_for(geotag, sampling), intr, params)
    mask = _building_mask(scene)
    vals = lab.grid.values
    K = len(lab.ids)
    W = lab.column_buildings.shape[-1]
    acc = np.zeros((W, K + 1))
    cols = np.broadcast_to(np.arange(W), lab.column_buildings.shape)
    b = np.where(lab.column_buildings >= 0, lab.column_buildings, K)
    np.add.at(acc, (cols.ravel(), b.ravel()), np.repeat(vals.ravel(), W))
    acc = acc[:, :K]
    tot = acc.sum(axis=1, keepdims=True)
    col_dist = np.where(tot > 0, acc / np.where(tot > 0, tot, 1.0), 0.0)
    return _compact_ids(field_from_columns(mask, col_dist, lab.ids))


def likelihood_peaks(grid: LikelihoodGrid, rel: float = 0.8) -> int:
    """Separate likelihood modes within ``rel`` of the maximum.

    Poses are neighbours when their locations are adjacent (8-connected on
    the location lattice) and their yaws are at most one step apart
    (circularly).  Modes are connected groups of such high-scoring poses
    that contain a local maximum.
    """
    from scipy.sparse import coo_matrix
    from scipy.sparse.csgraph import connected_components

    vals = grid.values
    top = vals.max()
    if top <= 0:
        return 0
    locs = grid.locations
    L, O = vals.shape
    d = np.hypot(*(locs[:, None, :] - locs[None, :, :]).transpose(2, 0, 1))
    spacing = np.min(d[d > 0]) if L > 1 else 1.0
    loc_adj = (d <= spacing * np.sqrt(2) + 1e-9)
    hi = vals >= rel * top
    idx = np.arange(L * O).reshape(L, O)
    rows, cols = [], []
    li, lj = np.nonzero(loc_adj)
    for do in (-1, 0, 1):
        a = idx[li][:, :]
        bb = np.roll(idx[lj], -do, axis=1)
        rows.append(a.ravel())
        cols.append(bb.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    flat = vals.ravel()
    # local maxima: >= every neighbour
    neigh_max = np.full(L * O, -np.inf)
    np.maximum.at(neigh_max, rows, flat[cols])
    is_peak = flat >= neigh_max
    keep = hi.ravel()[rows] & hi.ravel()[cols]
    graph = coo_matrix((np.ones(keep.sum()), (rows[keep], cols[keep])), shape=(L * O, L * O))
    _, comp = connected_components(graph, directed=False)
    return len({comp[i] for i in np.nonzero(is_peak & hi.ravel())[0]})


# -- query identity transfer ----------------------------------------------------

@dataclass
class CorrespondenceSet:
    query: str
    entries: list[tuple[str, list[tuple]]] = field(default_factory=list)

    def refs(self) -> list[str]:
        return [r for r, _ in self.entries]

    def restricted(self, refs: Sequence[str]) -> "CorrespondenceSet":
        keep = set(refs)
        return CorrespondenceSet(self.query, [(r, m) for r, m in self.entries if r in keep])


def transfer_identity(query: SceneModel, corr: CorrespondenceSet,
                      ref_fields: Mapping[str, PixelIdentityField]) -> list[Optional[dict[str, float]]]:
    """Identity distribution per query facade from matched reference pixels.

    Each inlier match adds the reference pixel's distribution to every
    query facade whose column extent holds the match; facades without any
    labeled match get None.
    """
    W = query.intrinsics.width_cols
    contributions = []
    for ref, matches in corr.entries:
        if ref not in ref_fields:
            raise ValidationError(f"correspondences reference unknown image {ref!r}")
        rf = ref_fields[ref]
        for qc, qr, rc, rr in matches:
            c, r = int(np.floor(rc)), int(np.floor(rr))
            if not (0 <= c < rf.width and 0 <= r < rf.height):
                raise ValidationError(f"match ({rc}, {rr}) outside reference {ref!r}")
            if not 0 <= qc < W:
                raise ValidationError(f"match column {qc} outside the query image")
            dist = rf.at(c, r)
            if dist:
                contributions.append((float(qc), tuple(sorted(dist.items()))))
    contributions.sort()  # summation order independent of match order
    out: list[Optional[dict[str, float]]] = []
    for f in query.facades:
        acc: dict[str, float] = {}
        for qc, dist in contributions:
            if f.start_col <= qc < f.end_col:
                for b, p in dist:
                    acc[b] = acc.get(b, 0.0) + p
        tot = sum(acc.values())
        out.append({b: acc[b] / tot for b in sorted(acc)} if tot > 0 else None)
    return out


def apply_identity(scene: SceneModel, dists: Sequence[Optional[Mapping[str, float]]]) -> SceneModel:
    facades = [ObservedFacade(f.start_col, f.end_col, f.theta_deg, None if d is None else dict(d))
               for f, d in zip(scene.facades, dists)]
    return scene.with_facades(facades)


def identified_buildings(scene: SceneModel) -> set[str]:
    """Most probable building of every facade carrying an identity."""
    out = set()
    for f in scene.facades:
        if f.identity_dist:
            out.add(max(sorted(f.identity_dist), key=lambda b: f.identity_dist[b]))
    return out


def facade_identity_field(scene: SceneModel) -> PixelIdentityField:
    """Paint each facade's identity distribution over its building pixels."""
    mask = _building_mask(scene)
    ids = sorted({b for f in scene.facades if f.identity_dist for b in f.identity_dist})
    slot = {b: k for k, b in enumerate(ids)}
    col_dist = np.zeros((scene.intrinsics.width_cols, len(ids)))
    for f in scene.facades:
        if f.identity_dist:
            for b, p in f.identity_dist.items():
                col_dist[f.start_col:f.end_col, slot[b]] = p
    tot = col_dist.sum(axis=1, keepdims=True)
    col_dist = np.where(tot > 1, col_dist / np.where(tot > 0, tot, 1.0), col_dist)
    return field_from_columns(mask, col_dist, ids)


def pixel_accuracy(pred: PixelIdentityField, truth: PixelIdentityField) -> float:
    """Fraction of ground-truth building pixels whose predicted argmax matches.

    Returns NaN when the truth has no labeled pixels.
    """
    if (pred.width, pred.height) != (truth.width, truth.height):
        raise ValidationError(f"field sizes differ: {pred.width}x{pred.height} vs {truth.width}x{truth.height}")
    t = truth.argmax_ids()
    m = truth.labeled
    n = int(m.sum())
    if n == 0:
        return float("nan")
    p = pred.argmax_ids()
    return float((p[m] == t[m]).sum()) / n


# -- file formats ---------------------------------------------------------------

def dumps_field(f: PixelIdentityField) -> str:
    f = _compact_ids(f)
    rows = [json.dumps([c, r, dist], separators=(",", ":")) for c, r, dist in _as_dict_rows(f)]
    body = ",\n".join(rows)
    return (f'{{"width":{f.width},"height":{f.height},"entries":[\n' + body + ("\n" if rows else "") + "]}\n")


def loads_field(text: str) -> PixelIdentityField:
    try:
        doc = json.loads(text)
        w, h = int(doc["width"]), int(doc["height"])
        entries = doc["entries"]
        ids = sorted({b for e in entries for b in e[2]})
        slot = {b: k for k, b in enumerate(ids)}
        probs = np.zeros((h, w, len(ids)))
        for c, r, dist in entries:
            for b, p in dist.items():
                probs[r, c, slot[b]] = float(p)
    except (json.JSONDecodeError, KeyError, TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, ValidationError):
            raise
        raise FormatError(f"malformed identity field: {exc}") from exc
    return PixelIdentityField(w, h, ids, probs)


def save_field(f: PixelIdentityField, path) -> None:
    Path(path).write_text(dumps_field(f), encoding="utf-8")


def load_field(path) -> PixelIdentityField:
    return loads_field(Path(path).read_text(encoding="utf-8"))


def id_color(building_id: str) -> tuple[int, int, int]:
    h = hashlib.md5(building_id.encode("utf-8")).digest()
    return (64 + h[0] % 192, 64 + h[1] % 192, 64 + h[2] % 192)


def save_field_png(f: PixelIdentityField, path) -> None:
    img = np.zeros((f.height, f.width, 3), dtype=np.uint8)
    lab = f.argmax_ids()
    for b in f.ids:
        img[lab == b] = id_color(b)
    Image.fromarray(img, mode="RGB").save(path, format="PNG")


def dumps_correspondences(c: CorrespondenceSet) -> str:
    parts = []
    for ref, matches in c.entries:
        m = ",\n".join("  " + json.dumps(list(x), separators=(",", ":")) for x in matches)
        parts.append(json.dumps({"ref": ref})[:-1] + ',"matches":[\n' + m + ("\n" if matches else "") + "]}")
    return (json.dumps({"query": c.query})[:-1] + ',"refs":[\n' + ",\n".join(parts)
            + ("\n" if parts else "") + "]}\n")


def loads_correspondences(text: str) -> CorrespondenceSet:
    try:
        doc = json.loads(text)
        entries = []
        for e in doc["refs"]:
            matches = []
            for m in e["matches"]:
                if len(m) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in m):
                    raise FormatError(f"match must be [qc, qr, rc, rr], got {m!r}")
                matches.append(tuple(m))
            entries.append((str(e["ref"]), matches))
        return CorrespondenceSet(str(doc["query"]), entries)
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"malformed correspondence file: {exc}") from exc


def save_correspondences(c: CorrespondenceSet, path) -> None:
    Path(path).write_text(dumps_correspondences(c), encoding="utf-8")


def load_correspondences(path) -> CorrespondenceSet:
    return loads_correspondences(Path(path).read_text(encoding="utf-8"))


def save_retrieval(query: str, ranked_refs: Sequence[str], path) -> None:
    doc = {"query": query, "ranked_refs": list(ranked_refs)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_retrieval(path) -> tuple[str, list[str]]:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return str(doc["query"]), [str(r) for r in doc["ranked_refs"]]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed retrieval list ({exc})") from exc
