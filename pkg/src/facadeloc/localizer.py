"""Pose-space search over discrete location/orientation grids."""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .likelihood import LikelihoodParams, SceneScorer
from .mapdata import BuildingMap, point_in_polygon
from .projection import Pose
from .scene import CameraIntrinsics, SceneModel

DEFAULT_SPACING_M = 10.0
DEFAULT_ORIENTATION_STEP_DEG = 3.0
DEFAULT_DILATION_M = 60.0


@dataclass(frozen=True)
class PoseSampling:
    locations: np.ndarray     # (L, 2) meters
    orientations: np.ndarray  # (O,) degrees in [0, 360)

    def __post_init__(self):
        locs = np.asarray(self.locations, dtype=float).reshape(-1, 2)
        ori = np.asarray(self.orientations, dtype=float).reshape(-1)
        if len(locs) == 0 or len(ori) == 0:
            raise ValueError("pose sampling needs at least one location and one orientation")
        if ori.min() < 0 or ori.max() >= 360:
            raise ValueError("orientations must lie in [0, 360)")
        object.__setattr__(self, "locations", locs)
        object.__setattr__(self, "orientations", ori)

    def __len__(self) -> int:
        return len(self.locations) * len(self.orientations)

    def poses(self) -> Iterable[Pose]:
        """Location-major scan order, the order every argmax tie resolves in."""
        for x, y in self.locations:
            for g in self.orientations:
                yield Pose(float(x), float(y), float(g))


def orientation_set(step_deg: float = DEFAULT_ORIENTATION_STEP_DEG) -> np.ndarray:
    n = int(round(360.0 / step_deg))
    return np.arange(n) * step_deg


def reference_sampling(geotag: Sequence[float], spacing_m: float = DEFAULT_SPACING_M,
                       half_width: int = 1, orientation_step_deg: float = DEFAULT_ORIENTATION_STEP_DEG) -> PoseSampling:
    """3x3 grid (for half_width=1) around a geotag, 120 yaws at 3 degrees."""
    offs = np.arange(-half_width, half_width + 1) * spacing_m
    gx, gy = np.meshgrid(offs + geotag[0], offs + geotag[1], indexing="xy")
    locs = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return PoseSampling(locs, orientation_set(orientation_step_deg))


def _aligned_axis(lo: float, hi: float, spacing: float) -> np.ndarray:
    i0 = math.ceil(lo / spacing - 1e-9)
    i1 = math.floor(hi / spacing + 1e-9)
    return np.arange(i0, i1 + 1) * spacing


def query_sampling(bmap: BuildingMap, identified: Iterable[str], spacing_m: float = DEFAULT_SPACING_M,
                   dilation_m: float = DEFAULT_DILATION_M,
                   orientation_step_deg: float = DEFAULT_ORIENTATION_STEP_DEG) -> PoseSampling:
    """Grid around the identified buildings, aligned to multiples of the spacing.

    Covers the union of the buildings' bounding boxes dilated by
    ``dilation_m``; points strictly inside any footprint are dropped.  An
    empty identified set falls back to the whole map bounds.
    """
    identified = [b for b in identified if b in bmap]
    boxes = []
    if identified:
        for bid in identified:
            pts = np.asarray(bmap[bid].polygon)
            boxes.append((pts[:, 0].min() - dilation_m, pts[:, 1].min() - dilation_m,
                          pts[:, 0].max() + dilation_m, pts[:, 1].max() + dilation_m))
    else:
        boxes.append(bmap.bounds)
    xs = _aligned_axis(min(b[0] for b in boxes), max(b[2] for b in boxes), spacing_m)
    ys = _aligned_axis(min(b[1] for b in boxes), max(b[3] for b in boxes), spacing_m)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    gx, gy = gx.ravel(), gy.ravel()
    keep = np.zeros(gx.shape, dtype=bool)
    for x0, y0, x1, y1 in boxes:
        keep |= (gx >= x0 - 1e-9) & (gx <= x1 + 1e-9) & (gy >= y0 - 1e-9) & (gy <= y1 + 1e-9)
    for b in bmap.buildings:
        keep &= ~point_in_polygon(gx, gy, b.polygon)
    locs = np.stack([gx[keep], gy[keep]], axis=1)
    if len(locs) == 0:
        raise ValueError("query sampling produced no free locations")
    return PoseSampling(locs, orientation_set(orientation_step_deg))


@dataclass
class LikelihoodGrid:
    sampling: PoseSampling
    values: np.ndarray  # (L, O)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        expected = (len(self.sampling.locations), len(self.sampling.orientations))
        if self.values.shape != expected:
            raise ValueError(f"grid values shape {self.values.shape} != {expected}")

    @property
    def locations(self) -> np.ndarray:
        return self.sampling.locations

    def location_scores(self, reduce: str = "max") -> np.ndarray:
        if reduce == "max":
            return self.values.max(axis=1)
        if reduce == "sum":
            return self.values.sum(axis=1)
        raise ValueError(f"unknown reduction {reduce!r}")

    def best_pose(self) -> Pose:
        flat = int(np.argmax(self.values))  # first maximum in scan order
        li, oi = divmod(flat, self.values.shape[1])
        x, y = self.sampling.locations[li]
        return Pose(float(x), float(y), float(self.sampling.orientations[oi]))

    def ranked_locations(self, reduce: str = "max") -> np.ndarray:
        return np.argsort(-self.location_scores(reduce), kind="stable")


def evaluate_grid(scene: SceneModel, sampling: PoseSampling, bmap: BuildingMap,
                  intr: Optional[CameraIntrinsics] = None, params: LikelihoodParams = LikelihoodParams(),
                  threads: int = 1) -> LikelihoodGrid:
    """p(I|g) for every sampled pose."""
    scorer = SceneScorer(scene, bmap, intr, params)
    values = np.zeros((len(sampling.locations), len(sampling.orientations)))
    if not scene.facades:
        return LikelihoodGrid(sampling, values)

    def run(i):
        x, y = sampling.locations[i]
        values[i] = scorer.likelihoods(float(x), float(y), sampling.orientations)

    idx = range(len(sampling.locations))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, idx))
    else:
        for i in idx:
            run(i)
    return LikelihoodGrid(sampling, values)


def top_n_error(grid: LikelihoodGrid, truth: Sequence[float], n: int, reduce: str = "max") -> float:
    """Distance from truth to the nearest of the n best-scoring locations."""
    if n < 1:
        raise ValueError("N must be >= 1")
    order = grid.ranked_locations(reduce)[:n]
    d = np.hypot(grid.locations[order, 0] - truth[0], grid.locations[order, 1] - truth[1])
    return float(d.min())


@dataclass
class ErrorCurve:
    n: np.ndarray
    mean: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray

    def rows(self):
        for row in zip(self.n, self.mean, self.ci_lo, self.ci_hi):
            yield int(row[0]), float(row[1]), float(row[2]), float(row[3])


def error_curve(grids: Sequence[LikelihoodGrid], truths: Sequence[Sequence[float]], n_max: int = 20,
                reduce: str = "max") -> ErrorCurve:
    """Mean top-N error for N = 1..n_max with a normal-approximation 95% CI."""
    if len(grids) != len(truths):
        raise ValueError("grids and truths differ in length")
    if not grids:
        raise ValueError("error curve needs at least one grid")
    ns = np.arange(1, n_max + 1)
    errs = np.array([[top_n_error(g, t, int(n), reduce) for n in ns] for g, t in zip(grids, truths)])
    mean = errs.mean(axis=0)
    if len(errs) > 1:
        half = 1.96 * errs.std(axis=0, ddof=1) / math.sqrt(len(errs))
    else:
        half = np.zeros_like(mean)
    return ErrorCurve(ns, mean, mean - half, mean + half)


def ambiguity_count(grid: LikelihoodGrid, fraction: float = 0.5, reduce: str = "max") -> int:
    """Locations scoring at least ``fraction`` of the best location."""
    scores = grid.location_scores(reduce)
    top = scores.max()
    if top <= 0:
        return 0
    return int((scores >= fraction * top).sum())


# -- probability map outputs --------------------------------------------------

def write_csv(grid: LikelihoodGrid, path, reduce: str = "max") -> None:
    scores = grid.location_scores(reduce)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "score"])
        for (x, y), s in zip(grid.locations, scores):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(s))])


def read_csv(path) -> LikelihoodGrid:
    """Load a probability map CSV as a single-orientation grid."""
    locs, scores = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            locs.append((float(row["x"]), float(row["y"])))
            scores.append(float(row["score"]))
    return LikelihoodGrid(PoseSampling(np.array(locs), np.zeros(1)), np.array(scores)[:, None])


def _raster(grid: LikelihoodGrid, spacing_m: float, reduce: str):
    scores = grid.location_scores(reduce)
    locs = grid.locations
    x0, y1 = locs[:, 0].min(), locs[:, 1].max()
    cols = np.rint((locs[:, 0] - x0) / spacing_m).astype(int)
    rows = np.rint((y1 - locs[:, 1]) / spacing_m).astype(int)
    img = np.zeros((rows.max() + 1, cols.max() + 1))
    img[rows, cols] = scores
    return img, float(x0), float(y1)


def write_pgm(grid: LikelihoodGrid, path, spacing_m: float = DEFAULT_SPACING_M, reduce: str = "max",
              origin: Optional[tuple[float, float]] = None) -> dict:
    """8-bit PGM raster (row 0 = north) plus a ``.json`` georeferencing sidecar."""
    img, x0, y0 = _raster(grid, spacing_m, reduce)
    top = float(img.max())
    scale = 255.0 / top if top > 0 else 0.0
    px = np.clip(np.rint(img * scale), 0, 255).astype(np.uint8)
    path = Path(path)
    Image.fromarray(px, mode="L").save(path, format="PPM")
    header = {"x0": x0, "y0": y0, "spacing_m": spacing_m, "width": int(px.shape[1]),
              "height": int(px.shape[0]), "score_scale": scale, "reduce": reduce,
              "note": "pixel (col,row) center = (x0 + col*spacing_m, y0 - row*spacing_m); score = value / score_scale"}
    if origin is not None:
        header["origin"] = {"lat": origin[0], "lon": origin[1]}
    path.with_suffix(".json").write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    return header


def write_png(grid: LikelihoodGrid, path, spacing_m: float = DEFAULT_SPACING_M, reduce: str = "max",
              truth: Optional[Sequence[float]] = None, cell_px: int = 8) -> None:
    """Upscaled viridis render with an optional white cross at ``truth``."""
    from matplotlib import colormaps

    img, x0, y0 = _raster(grid, spacing_m, reduce)
    top = float(img.max())
    rgb = colormaps["viridis"](img / top if top > 0 else img, bytes=True)[..., :3]
    big = np.kron(rgb, np.ones((cell_px, cell_px, 1), dtype=np.uint8))
    im = Image.fromarray(big, mode="RGB")
    if truth is not None:
        d = ImageDraw.Draw(im)
        cx = ((truth[0] - x0) / spacing_m + 0.5) * cell_px
        cy = ((y0 - truth[1]) / spacing_m + 0.5) * cell_px
        r = cell_px * 1.5
        d.line([(cx - r, cy), (cx + r, cy)], fill=(255, 255, 255), width=2)
        d.line([(cx, cy - r), (cx, cy + r)], fill=(255, 255, 255), width=2)
    im.save(path, format="PNG")
