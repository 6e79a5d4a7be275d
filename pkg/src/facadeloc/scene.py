"""Image-side observations and the facade decomposition.

Inputs are precomputed: line segments labeled with a vanishing point index
and a per-pixel semantic label image.  The decomposition votes a dominant
vanishing point per column, cuts the image where that vote changes, and
turns each surviving interval into an :class:`ObservedFacade`.

Angles follow one convention everywhere: ``theta_deg`` is the facade line
direction as a rotation about the camera's down axis starting from the
image x-axis, reduced mod 180.  0 is fronto-parallel, 90 recedes along the
optical axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .mapdata import FormatError, ValidationError

SKY, BUILDING, TREE, ROAD, CAR = 0, 1, 2, 3, 4
CATEGORIES = {SKY: "sky", BUILDING: "building", TREE: "tree", ROAD: "road", CAR: "car"}
PALETTE = {SKY: (128, 192, 255), BUILDING: (160, 64, 64), TREE: (32, 160, 32),
           ROAD: (96, 96, 96), CAR: (255, 200, 0)}

VERTICAL = -1  # vp label of a vertical line segment
EMPTY = -1     # column label where no line votes


@dataclass(frozen=True)
class CameraIntrinsics:
    width_cols: int
    hfov_deg: float

    def __post_init__(self):
        if int(self.width_cols) != self.width_cols or self.width_cols <= 0:
            raise ValidationError(f"width_cols must be a positive integer, got {self.width_cols}")
        if not 0.0 < self.hfov_deg < 180.0:
            raise ValidationError(f"hfov_deg must lie in (0, 180), got {self.hfov_deg}")

    @property
    def cx(self) -> float:
        return self.width_cols / 2.0

    @property
    def focal_cols(self) -> float:
        return (self.width_cols / 2.0) / math.tan(math.radians(self.hfov_deg) / 2.0)

    @property
    def half_fov_tan(self) -> float:
        return math.tan(math.radians(self.hfov_deg) / 2.0)


@dataclass(frozen=True)
class LabeledLineSegment:
    p0: tuple[float, float]  # (col, row)
    p1: tuple[float, float]
    vp: int  # vanishing point index or VERTICAL


class SemanticLabelMap:
    """Per-pixel semantic categories with connected building components.

    ``components`` holds 0 off-building and 1..n on building pixels
    (4-connectivity).
    """

    def __init__(self, labels: np.ndarray):
        labels = np.asarray(labels)
        if labels.ndim != 2:
            raise ValidationError("label map must be 2-D")
        if labels.size and (labels.min() < 0 or labels.max() > CAR):
            raise ValidationError(f"label values must be in 0..{CAR}")
        self.labels = labels.astype(np.uint8)
        self.components, self.n_components = ndimage.label(self.labels == BUILDING)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def building_mask(self) -> np.ndarray:
        return self.labels == BUILDING

    def building_columns(self) -> np.ndarray:
        return self.building_mask.any(axis=0)

    @classmethod
    def from_png(cls, path) -> "SemanticLabelMap":
        with Image.open(path) as im:
            if im.mode not in ("P", "L"):
                raise FormatError(f"{path}: segmentation must be an indexed or 8-bit gray image")
            return cls(np.array(im))

    def to_png(self, path) -> None:
        im = Image.fromarray(self.labels, mode="P")
        pal = []
        for k in range(256):
            pal.extend(PALETTE.get(k, (0, 0, 0)))
        im.putpalette(pal)
        im.save(path, format="PNG")


def _normalize_theta(theta: float) -> float:
    t = float(theta) % 180.0
    return 0.0 if t >= 180.0 else t


@dataclass(frozen=True)
class ObservedFacade:
    start_col: int
    end_col: int
    theta_deg: float
    identity_dist: Optional[Mapping[str, float]] = None

    def __post_init__(self):
        if not (0 <= self.start_col < self.end_col):
            raise ValidationError(f"facade extent [{self.start_col}, {self.end_col}) is empty or negative")
        if not 0.0 <= self.theta_deg < 180.0:
            raise ValidationError(f"theta_deg {self.theta_deg} outside [0, 180)")
        if self.identity_dist is not None:
            total = sum(self.identity_dist.values())
            if abs(total - 1.0) > 1e-6 or any(p < 0 for p in self.identity_dist.values()):
                raise ValidationError(f"identity_dist must be a distribution (sums to {total})")


@dataclass(frozen=True)
class SceneModel:
    intrinsics: CameraIntrinsics
    facades: tuple[ObservedFacade, ...]
    per_column_theta: Optional[np.ndarray] = field(default=None, compare=False)
    segmentation: Optional[SemanticLabelMap] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "facades", tuple(self.facades))
        w = self.intrinsics.width_cols
        for f in self.facades:
            if f.end_col > w:
                raise ValidationError(f"facade [{f.start_col}, {f.end_col}) exceeds image width {w}")
        if self.segmentation is not None and self.segmentation.width != w:
            raise ValidationError(f"segmentation width {self.segmentation.width} != width_cols {w}")

    def with_facades(self, facades: Sequence[ObservedFacade]) -> "SceneModel":
        return SceneModel(self.intrinsics, tuple(facades), None, self.segmentation)


# -- decomposition ------------------------------------------------------------

def _raster_line(p0, p1) -> tuple[np.ndarray, np.ndarray]:
    """DDA pixels (cols, rows) of a segment, endpoints included."""
    (c0, r0), (c1, r1) = p0, p1
    n = int(math.ceil(max(abs(c1 - c0), abs(r1 - r0)))) + 1
    t = np.linspace(0.0, 1.0, n)
    cols = np.floor(c0 + t * (c1 - c0) + 0.5).astype(int)
    rows = np.floor(r0 + t * (r1 - r0) + 0.5).astype(int)
    return cols, rows


def filter_lines(lines: Sequence[LabeledLineSegment], seg: SemanticLabelMap) -> list[LabeledLineSegment]:
    """Keep the lines touching at least one building pixel."""
    mask = seg.building_mask
    h, w = mask.shape
    kept = []
    for ln in lines:
        cols, rows = _raster_line(ln.p0, ln.p1)
        if cols.min() < 0 or rows.min() < 0 or cols.max() >= w or rows.max() >= h:
            raise ValidationError(f"line {ln.p0}-{ln.p1} falls outside the {w}x{h} label map")
        if mask[rows, cols].any():
            kept.append(ln)
    return kept


def column_vp_vote(lines: Sequence[LabeledLineSegment], width_cols: int) -> np.ndarray:
    """Dominant vanishing point index per column (EMPTY where unvoted).

    A line votes on every integer column between its endpoints' columns.
    Ties go to the lower index.
    """
    v = np.full(width_cols, EMPTY, dtype=int)
    voting = [ln for ln in lines if ln.vp != VERTICAL]
    if not voting:
        return v
    vps = sorted({ln.vp for ln in voting})
    slot = {vp: k for k, vp in enumerate(vps)}
    diff = np.zeros((width_cols + 1, len(vps)), dtype=int)
    for ln in voting:
        lo = max(math.ceil(min(ln.p0[0], ln.p1[0])), 0)
        hi = min(math.floor(max(ln.p0[0], ln.p1[0])), width_cols - 1)
        if lo > hi:
            continue
        diff[lo, slot[ln.vp]] += 1
        diff[hi + 1, slot[ln.vp]] -= 1
    counts = np.cumsum(diff[:-1], axis=0)
    best = np.argmax(counts, axis=1)
    voted = counts.max(axis=1) > 0
    v[voted] = np.asarray(vps)[best[voted]]
    return v


def cutting_lines(v: np.ndarray) -> list[int]:
    v = np.asarray(v)
    switches = np.nonzero(v[1:] != v[:-1])[0] + 1
    return [0] + [int(x) for x in switches] + [len(v)]


def facade_angle_from_vp(vp_col: Optional[float], intr: CameraIntrinsics) -> float:
    """Camera-frame facade angle implied by a horizontal vanishing point column.

    ``None`` or a non-finite column is a point at infinity (fronto-parallel).
    """
    if vp_col is None or not math.isfinite(vp_col):
        return 0.0
    ang = math.degrees(math.atan((vp_col - intr.cx) / intr.focal_cols)) + 90.0
    return _normalize_theta(ang)


def decompose_facades(v: np.ndarray, cuts: Sequence[int], vp_angles: Mapping[int, float],
                      seg: Optional[SemanticLabelMap], min_building_cols: int = 5) -> list[ObservedFacade]:
    """One facade per cut interval with a voted label and enough building columns.

    Intervals whose label is EMPTY are dropped rather than merged into a
    neighbour.  Without a label map every column counts as building.
    """
    v = np.asarray(v)
    bcols = seg.building_columns() if seg is not None else np.ones(len(v), dtype=bool)
    facades = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        label = int(v[lo])
        if label == EMPTY:
            continue
        if label not in vp_angles:
            raise ValidationError(f"no facade angle for vanishing point {label}")
        if int(bcols[lo:hi].sum()) < min_building_cols:
            continue
        facades.append(ObservedFacade(int(lo), int(hi), _normalize_theta(vp_angles[label])))
    return facades


def circular_mean_mod180(angles: Sequence[float], weights: Optional[Sequence[float]] = None) -> float:
    a = np.radians(np.asarray(angles, dtype=float) * 2.0)
    wts = np.ones_like(a) if weights is None else np.asarray(weights, dtype=float)
    ang = math.degrees(math.atan2(float(np.dot(wts, np.sin(a))), float(np.dot(wts, np.cos(a))))) / 2.0
    # snap float noise so 1e-15 does not print as 179.99999...
    ang = round(ang, 12)
    return _normalize_theta(ang)


def per_column_estimates(facades: Sequence[ObservedFacade], seg: Optional[SemanticLabelMap],
                         width_cols: Optional[int] = None) -> np.ndarray:
    """Per-column facade angle, NaN where no facade covers the column.

    Each facade belongs to the building component holding most of its
    pixels; a column averages the facades of its own dominant component and
    falls back to all covering facades when none belong to it.
    """
    if width_cols is None:
        if seg is None:
            raise ValueError("width_cols is required without a label map")
        width_cols = seg.width
    out = np.full(width_cols, np.nan)
    if not facades:
        return out

    if seg is not None and seg.n_components:
        comp = seg.components
        n = seg.n_components
        # pixel counts per (column, component)
        col_counts = np.zeros((width_cols, n + 1), dtype=int)
        rows, cols = np.nonzero(comp)
        np.add.at(col_counts, (cols, comp[rows, cols]), 1)
        col_counts[:, 0] = 0
        col_comp = np.where(col_counts.max(axis=1) > 0, np.argmax(col_counts, axis=1), 0)
        fac_comp = []
        for f in facades:
            tot = col_counts[f.start_col:f.end_col].sum(axis=0)
            fac_comp.append(int(np.argmax(tot)) if tot.max() > 0 else 0)
    else:
        col_comp = np.zeros(width_cols, dtype=int)
        fac_comp = [0] * len(facades)

    for k in range(width_cols):
        covering = [i for i, f in enumerate(facades) if f.start_col <= k < f.end_col]
        if not covering:
            continue
        own = [i for i in covering if fac_comp[i] == col_comp[k]]
        chosen = own or covering
        out[k] = circular_mean_mod180([facades[i].theta_deg for i in chosen])
    return out


def build_scene(lines: Sequence[LabeledLineSegment], vp_cols: Mapping[int, Optional[float]],
                seg: SemanticLabelMap, intr: CameraIntrinsics, min_building_cols: int = 5) -> SceneModel:
    """Run the full decomposition from labeled lines and a label map."""
    if seg.width != intr.width_cols:
        raise ValidationError(f"label map width {seg.width} != width_cols {intr.width_cols}")
    kept = filter_lines(lines, seg)
    v = column_vp_vote(kept, intr.width_cols)
    cuts = cutting_lines(v)
    angles = {idx: facade_angle_from_vp(col, intr) for idx, col in vp_cols.items()}
    facades = decompose_facades(v, cuts, angles, seg, min_building_cols)
    pct = per_column_estimates(facades, seg, intr.width_cols)
    return SceneModel(intr, tuple(facades), pct, seg)


# -- scene file ---------------------------------------------------------------

@dataclass
class SceneFile:
    """The on-disk scene document, kept verbatim for lossless rewrite."""

    intrinsics: CameraIntrinsics
    lines: Optional[list[LabeledLineSegment]] = None
    vps: Optional[dict[int, Optional[float]]] = None
    segmentation: Optional[str] = None
    facades: Optional[list[ObservedFacade]] = None
    name: Optional[str] = None
    base_dir: Path = field(default_factory=Path, compare=False)

    def to_dict(self) -> dict:
        doc: dict = {}
        if self.name is not None:
            doc["name"] = self.name
        doc["intrinsics"] = {"width_cols": self.intrinsics.width_cols, "hfov_deg": self.intrinsics.hfov_deg}
        if self.lines is not None:
            doc["lines"] = [{"p0": list(ln.p0), "p1": list(ln.p1),
                             "vp": "vertical" if ln.vp == VERTICAL else ln.vp} for ln in self.lines]
        if self.vps is not None:
            doc["vps"] = [{"index": k, "col": c} for k, c in self.vps.items()]
        if self.facades is not None:
            doc["facades"] = [_facade_to_dict(f) for f in self.facades]
        if self.segmentation is not None:
            doc["segmentation"] = self.segmentation
        return doc

    def load_segmentation(self) -> Optional[SemanticLabelMap]:
        if self.segmentation is None:
            return None
        return SemanticLabelMap.from_png(self.base_dir / self.segmentation)

    def to_scene(self, min_building_cols: int = 5) -> SceneModel:
        seg = self.load_segmentation()
        if self.facades is not None:
            pct = per_column_estimates(self.facades, seg, self.intrinsics.width_cols)
            return SceneModel(self.intrinsics, tuple(self.facades), pct, seg)
        if self.lines is None or self.vps is None or seg is None:
            raise FormatError("scene needs either 'facades' or all of 'lines', 'vps', 'segmentation'")
        return build_scene(self.lines, self.vps, seg, self.intrinsics, min_building_cols)


def _facade_to_dict(f: ObservedFacade) -> dict:
    d: dict = {"start_col": f.start_col, "end_col": f.end_col, "theta_deg": f.theta_deg}
    if f.identity_dist is not None:
        d["identity_dist"] = dict(f.identity_dist)
    return d


def _facade_from_dict(d: dict) -> ObservedFacade:
    try:
        dist = d.get("identity_dist")
        return ObservedFacade(int(d["start_col"]), int(d["end_col"]), float(d["theta_deg"]),
                              None if dist is None else {str(k): float(p) for k, p in dist.items()})
    except (KeyError, TypeError, AttributeError) as exc:
        raise FormatError(f"malformed facade entry {d!r}") from exc


def scene_file_from_dict(doc: dict, base_dir=".") -> SceneFile:
    if not isinstance(doc, dict) or "intrinsics" not in doc:
        raise FormatError("scene file must be an object with 'intrinsics'")
    try:
        intr = CameraIntrinsics(int(doc["intrinsics"]["width_cols"]), float(doc["intrinsics"]["hfov_deg"]))
    except (KeyError, TypeError) as exc:
        raise FormatError("intrinsics need width_cols and hfov_deg") from exc
    lines = vps = facades = None
    try:
        if "lines" in doc:
            lines = []
            for ln in doc["lines"]:
                vp = ln["vp"]
                if vp == "vertical":
                    vp = VERTICAL
                elif isinstance(vp, bool) or not isinstance(vp, int) or vp < 0:
                    raise FormatError(f"line vp must be a non-negative int or 'vertical', got {vp!r}")
                lines.append(LabeledLineSegment((float(ln["p0"][0]), float(ln["p0"][1])),
                                                (float(ln["p1"][0]), float(ln["p1"][1])), vp))
        if "vps" in doc:
            vps = {}
            for e in doc["vps"]:
                col = e.get("col")
                vps[int(e["index"])] = None if col is None else float(col)
        if "facades" in doc:
            facades = [_facade_from_dict(f) for f in doc["facades"]]
    except (KeyError, TypeError, IndexError) as exc:
        raise FormatError(f"malformed scene entry: {exc}") from exc
    seg = doc.get("segmentation")
    if seg is not None and not isinstance(seg, str):
        raise FormatError("'segmentation' must be a path string")
    return SceneFile(intr, lines, vps, seg, facades, doc.get("name"), Path(base_dir))


def load_scene_file(path) -> SceneFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    return scene_file_from_dict(doc, path.parent)


def dumps_scene_file(sf: SceneFile) -> str:
    return json.dumps(sf.to_dict(), indent=2, ensure_ascii=False) + "\n"


def save_scene_file(sf: SceneFile, path) -> None:
    Path(path).write_text(dumps_scene_file(sf), encoding="utf-8")


def load_scene(path, min_building_cols: int = 5) -> SceneModel:
    return load_scene_file(path).to_scene(min_building_cols)
