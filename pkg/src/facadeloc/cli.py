"""Command-line entry point: ``facadeloc <subcommand> ...``.

Every subcommand writes its artifacts plus a ``manifest.json`` recording
the resolved configuration, the SHA-256 of every input byte that can
influence the result, and the hashes of the outputs.  Manifests carry no
timestamps, so identical runs produce identical manifests.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .identity import (apply_identity, identified_buildings, label_reference_greedy, label_reference_marginalized,
                       load_correspondences, load_field, load_retrieval, save_correspondences, save_field,
                       save_field_png, save_retrieval, transfer_identity)
from .likelihood import LikelihoodParams
from .localizer import (error_curve, evaluate_grid, query_sampling, read_csv, reference_sampling, write_csv,
                        write_pgm, write_png)
from .mapdata import FormatError, ValidationError, convert_geojson, load_map, save_map
from .projection import Pose, project_map
from .scene import CameraIntrinsics, SceneFile, load_scene_file, save_scene_file
from .synthworld import (DEFAULT_INTRINSICS, NOISE_PROFILES, SynthConfig, free_location, generate_map,
                         render_scene, sample_pose, simulate_correspondences, simulate_retrieval)

PROG = "facadeloc"


@dataclass(frozen=True)
class RunConfig:
    sigma_m: float = 50.0
    identity_aware: bool = False
    occlusion: bool = False
    cap_per_column: bool = True
    spacing_m: float = 10.0
    orientation_step_deg: float = 3.0
    k: int = 4
    dilation_m: float = 60.0
    seed: int = 0

    def __post_init__(self):
        for name in ("sigma_m", "spacing_m", "orientation_step_deg", "k", "dilation_m"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"config {name} must be positive, got {getattr(self, name)}")
        if self.seed < 0:
            raise ValidationError(f"config seed must be >= 0, got {self.seed}")

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name: f.type for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ValidationError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def likelihood_params(self) -> LikelihoodParams:
        return LikelihoodParams(self.sigma_m, self.identity_aware, self.cap_per_column, self.occlusion)


class CliError(Exception):
    """Validation or IO failure reported as a one-line diagnostic (exit 1)."""


def _sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Manifest:
    def __init__(self, command: str, config: dict):
        self.command = command
        self.config = config
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}

    def add_input(self, path) -> None:
        self.inputs[str(path)] = _sha256(path)

    def write(self, path: Path, out_root: Path, outputs: Sequence[Path]) -> None:
        for p in outputs:
            self.outputs[Path(p).relative_to(out_root).as_posix()] = _sha256(p)
        doc = {"tool": PROG, "version": __version__, "command": self.command, "config": self.config,
               "inputs": dict(sorted(self.inputs.items())), "outputs": dict(sorted(self.outputs.items()))}
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# -- argument helpers -----------------------------------------------------------

def _floats(n: int):
    def parse(text: str):
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals
    return parse


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    return v


def _add_config_args(p: argparse.ArgumentParser, identity: bool = True) -> None:
    p.add_argument("--config", type=Path, help="JSON file with RunConfig fields; flags override it")
    p.add_argument("--sigma", type=float, dest="sigma_m", help="distance weight scale in meters (default 50)")
    if identity:
        p.add_argument("--identity-aware", action="store_true", default=None, dest="identity_aware")
    p.add_argument("--occlusion", action="store_true", default=None)
    p.add_argument("--no-cap", action="store_false", default=None, dest="cap_per_column",
                   help="sum overlapping pair terms instead of taking the per-column max")
    p.add_argument("--spacing", type=float, dest="spacing_m", help="grid spacing in meters (default 10)")
    p.add_argument("--step", type=float, dest="orientation_step_deg", help="yaw step in degrees (default 3)")
    p.add_argument("--threads", type=_positive_int, default=1, help="worker threads for grid evaluation")


def _config(args, extra: Optional[dict] = None) -> RunConfig:
    doc: dict = {}
    if getattr(args, "config", None) is not None:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{args.config}: invalid JSON ({exc.msg})") from exc
        if not isinstance(doc, dict):
            raise FormatError(f"{args.config}: config must be a JSON object")
    for f in dataclasses.fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            doc[f.name] = v
    doc.update(extra or {})
    return RunConfig.from_dict(doc)


def _intrinsics(args, scene_file: Optional[SceneFile] = None) -> CameraIntrinsics:
    if scene_file is not None:
        return scene_file.intrinsics
    return CameraIntrinsics(args.width, args.hfov)


def _load_scene(path: Path, manifest: Manifest):
    manifest.add_input(path)
    sf = load_scene_file(path)
    if sf.segmentation is not None:
        manifest.add_input(sf.base_dir / sf.segmentation)
    return sf, sf.to_scene()


def _facades_doc(facades) -> list:
    return [{"start_col": z.start_col, "end_col": z.end_col, "theta_deg": z.theta_deg,
             "building": z.building, "distance_m": z.distance_m} for z in facades]


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path


# -- subcommands ----------------------------------------------------------------

def cmd_project(args) -> None:
    cfg = _config(args)
    m = Manifest("project", {**cfg.to_dict(), "pose": list(args.pose)})
    m.add_input(args.map)
    bmap = load_map(args.map)
    sf = None
    if args.scene is not None:
        sf, _ = _load_scene(args.scene, m)
    intr = _intrinsics(args, sf)
    m.config["intrinsics"] = {"width_cols": intr.width_cols, "hfov_deg": intr.hfov_deg}
    pose = Pose(*args.pose)
    z = project_map(bmap, pose, intr, occlusion=cfg.occlusion)
    if args.out is None:
        for doc in _facades_doc(z):
            sys.stdout.write(json.dumps(doc, sort_keys=True) + "\n")
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [_write_json(out / "predicted.json", {"pose": {"x": pose.x, "y": pose.y, "gamma_deg": pose.gamma_deg},
                                                  "facades": _facades_doc(z)})]
    m.write(out / "manifest.json", out, files)


def cmd_label_ref(args) -> None:
    cfg = _config(args)
    m = Manifest("label-ref", {**cfg.to_dict(), "geotag": list(args.geotag), "mode": args.mode})
    m.add_input(args.map)
    bmap = load_map(args.map)
    _, scene = _load_scene(args.scene, m)
    sampling = reference_sampling(args.geotag, cfg.spacing_m, 1, cfg.orientation_step_deg)
    params = cfg.likelihood_params()
    label = label_reference_greedy if args.mode == "greedy" else label_reference_marginalized
    f = label(scene, args.geotag, bmap, scene.intrinsics, sampling, params)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_field(f, out)
    files = [out]
    if args.png is not None:
        save_field_png(f, args.png)
    m.write(out.with_name(out.name + ".manifest.json"), out.parent, files)


def cmd_localize(args) -> None:
    cfg = _config(args, {"k": args.k} if args.k is not None else None)
    m = Manifest("localize", cfg.to_dict())
    m.add_input(args.map)
    bmap = load_map(args.map)
    _, scene = _load_scene(args.scene, m)
    if args.correspondences is not None:
        if args.ref_labels is None:
            raise CliError("--correspondences needs --ref-labels")
        m.add_input(args.correspondences)
        corr = load_correspondences(args.correspondences)
        refs = corr.refs()
        if args.retrieval is not None:
            m.add_input(args.retrieval)
            _, refs = load_retrieval(args.retrieval)
        refs = refs[:cfg.k]
        fields = {}
        for ref in refs:
            path = Path(args.ref_labels) / f"{ref}.json"
            if not path.exists():
                raise CliError(f"no reference labels for {ref!r} at {path}")
            m.add_input(path)
            fields[ref] = load_field(path)
        scene = apply_identity(scene, transfer_identity(scene, corr.restricted(refs), fields))
    elif args.retrieval is not None or args.ref_labels is not None:
        raise CliError("--retrieval and --ref-labels need --correspondences")

    sampling = query_sampling(bmap, identified_buildings(scene), cfg.spacing_m, cfg.dilation_m,
                              cfg.orientation_step_deg)
    grid = evaluate_grid(scene, sampling, bmap, scene.intrinsics, cfg.likelihood_params(), threads=args.threads)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(grid, out / "probmap.csv")
    write_pgm(grid, out / "probmap.pgm", cfg.spacing_m, origin=bmap.origin)
    write_png(grid, out / "probmap.png", cfg.spacing_m, truth=args.truth)
    best = grid.best_pose()
    ranked = grid.ranked_locations()[:args.top_n]
    scores = grid.location_scores()
    top = [{"x": float(grid.locations[i, 0]), "y": float(grid.locations[i, 1]), "score": float(scores[i])}
           for i in ranked]
    result = {"best_pose": {"x": best.x, "y": best.y, "gamma_deg": best.gamma_deg}, "top_locations": top,
              "n_locations": int(len(grid.locations)), "n_orientations": int(len(grid.sampling.orientations)),
              "identified_buildings": sorted(identified_buildings(scene))}
    _write_json(out / "result.json", result)
    files = [out / n for n in ("probmap.csv", "probmap.pgm", "probmap.json", "probmap.png", "result.json")]
    m.write(out / "manifest.json", out, files)


def _read_pose(path: Path) -> tuple[float, float]:
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        return float(doc["x"]), float(doc["y"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: expected a pose object with x and y") from exc


def cmd_eval(args) -> None:
    pred, truth = Path(args.pred), Path(args.truth)
    if not pred.is_dir() or not truth.is_dir():
        raise CliError("--pred and --truth must be directories")
    m = Manifest("eval", {"curve": args.curve})
    grids, truths, names = [], [], []
    for csv_path in sorted(pred.glob("*/probmap.csv")):
        name = csv_path.parent.name
        pose_path = truth / f"{name}.pose.json"
        if not pose_path.exists():
            raise CliError(f"no ground-truth pose for {name!r} at {pose_path}")
        m.add_input(csv_path)
        m.add_input(pose_path)
        grids.append(read_csv(csv_path))
        truths.append(_read_pose(pose_path))
        names.append(name)
    if not grids:
        raise CliError(f"no */probmap.csv under {pred}")
    curve = error_curve(grids, truths, args.curve)
    lines = ["N,mean,ci_lo,ci_hi"] + [f"{n},{mu!r},{lo!r},{hi!r}" for n, mu, lo, hi in curve.rows()]
    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "curve.csv").write_text(text, encoding="utf-8")
    m.write(out / "manifest.json", out, [out / "curve.csv"])


def cmd_synth(args) -> None:
    cfg = _config(args)
    noise = NOISE_PROFILES[args.noise_profile]
    m = Manifest("synth", {"seed": args.seed, "n_buildings": args.n_buildings, "poses": args.poses,
                           "refs": args.refs, "noise_profile": args.noise_profile,
                           "with_identity": args.with_identity, "spacing_m": cfg.spacing_m,
                           "orientation_step_deg": cfg.orientation_step_deg})
    bmap = generate_map(SynthConfig(seed=args.seed, n_buildings=args.n_buildings))
    rng = np.random.default_rng(args.seed)
    intr = DEFAULT_INTRINSICS
    out = Path(args.out)
    for sub in ("scenes", "truth") + (("refs", "corr") if args.refs else ()):
        (out / sub).mkdir(parents=True, exist_ok=True)
    files = [out / "map.json"]
    save_map(bmap, files[0])

    def write_view(folder: Path, name: str, pose: Pose, with_identity: bool):
        scene, truth = render_scene(bmap, pose, intr, noise, rng, with_identity=with_identity)
        seg_name = f"{name}.seg.png"
        scene.segmentation.to_png(folder / seg_name)
        sf = SceneFile(intr, segmentation=seg_name, facades=list(scene.facades), name=name)
        save_scene_file(sf, folder / f"{name}.scene.json")
        save_field(truth, out / "truth" / f"{name}.field.json")
        _write_json(out / "truth" / f"{name}.pose.json", {"x": pose.x, "y": pose.y, "gamma_deg": pose.gamma_deg})
        files.extend([folder / seg_name, folder / f"{name}.scene.json", out / "truth" / f"{name}.field.json",
                      out / "truth" / f"{name}.pose.json"])
        return scene

    if len(bmap) == 0 and args.poses:
        raise CliError("cannot sample poses on an empty map")
    for i in range(args.poses):
        name = f"q{i:03d}"
        pose = sample_pose(bmap, rng, intr, cfg.spacing_m, cfg.orientation_step_deg, min_facades=2,
                           min_distinct=2)
        qscene = write_view(out / "scenes", name, pose, args.with_identity)
        refs = {}
        for j in range(args.refs):
            rname = f"{name}_r{j}"
            for _ in range(1000):
                x, y = pose.x + rng.normal(0.0, 20.0), pose.y + rng.normal(0.0, 20.0)
                if free_location(bmap, x, y, 2.0):
                    break
            rpose = Pose(float(x), float(y), float(pose.gamma_deg + rng.normal(0.0, 30.0)))
            rscene = write_view(out / "refs", rname, rpose, False)
            tag = {"x": rpose.x + float(rng.normal(0.0, 5.0)), "y": rpose.y + float(rng.normal(0.0, 5.0))}
            files.append(_write_json(out / "refs" / f"{rname}.geotag.json", tag))
            refs[rname] = (rpose, rscene.segmentation.building_mask)
        if refs:
            corr = simulate_correspondences(bmap, pose, qscene.segmentation.building_mask, refs, intr, rng,
                                            query_name=name)
            save_correspondences(corr, out / "corr" / f"{name}.corr.json")
            save_retrieval(name, simulate_retrieval(corr, rng), out / "corr" / f"{name}.retrieval.json")
            files.extend([out / "corr" / f"{name}.corr.json", out / "corr" / f"{name}.retrieval.json"])
    m.write(out / "manifest.json", out, files)


def cmd_convert(args) -> None:
    m = Manifest("convert-geojson", {"origin": list(args.origin) if args.origin else None})
    m.add_input(args.input)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    convert_geojson(args.input, out, args.origin)
    m.write(out.with_name(out.name + ".manifest.json"), out.parent, [out])


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog=PROG, description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("project", help="predicted facades at one pose")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--pose", type=_floats(3), required=True, metavar="X,Y,GAMMA")
    p.add_argument("--scene", type=Path, help="take camera intrinsics from this scene file")
    p.add_argument("--width", type=int, default=DEFAULT_INTRINSICS.width_cols)
    p.add_argument("--hfov", type=float, default=DEFAULT_INTRINSICS.hfov_deg)
    p.add_argument("--out", type=Path, help="write predicted.json and a manifest here instead of JSON lines on stdout")
    _add_config_args(p, identity=False)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("label-ref", help="assign building identities to a geotagged reference view")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--geotag", type=_floats(2), required=True, metavar="X,Y")
    p.add_argument("--mode", choices=("greedy", "marginalized"), default="marginalized")
    p.add_argument("--png", type=Path, help="also write a color-coded rendering")
    p.add_argument("--out", type=Path, required=True, help="identity field JSON")
    _add_config_args(p, identity=False)
    p.set_defaults(func=cmd_label_ref)

    p = sub.add_parser("localize", help="probability map of the camera location")
    p.add_argument("--map", type=Path, required=True)
    p.add_argument("--scene", type=Path, required=True)
    p.add_argument("--retrieval", type=Path)
    p.add_argument("--correspondences", type=Path)
    p.add_argument("--ref-labels", type=Path, help="directory of <ref>.json identity fields")
    p.add_argument("--k", type=_positive_int, help="retrieval depth (default 4)")
    p.add_argument("--dilation", type=float, dest="dilation_m", help="query grid margin in meters (default 60)")
    p.add_argument("--top-n", type=_positive_int, default=5)
    p.add_argument("--truth", type=_floats(2), metavar="X,Y", help="mark this location in probmap.png")
    p.add_argument("--out", type=Path, required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("eval", help="top-N localization error curve")
    p.add_argument("--pred", type=Path, required=True, help="directory of <name>/probmap.csv")
    p.add_argument("--truth", type=Path, required=True, help="directory of <name>.pose.json")
    p.add_argument("--curve", type=_positive_int, default=20, metavar="N_MAX")
    p.add_argument("--out", type=Path, help="write curve.csv here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="synthetic map, views and ground truth")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-buildings", type=int, default=20)
    p.add_argument("--poses", type=int, default=10)
    p.add_argument("--refs", type=int, default=0, help="reference views per query (with matches and retrieval)")
    p.add_argument("--noise-profile", choices=sorted(NOISE_PROFILES), default="none")
    p.add_argument("--with-identity", action="store_true", help="embed true identities in query scenes")
    p.add_argument("--out", type=Path, required=True)
    _add_config_args(p, identity=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("convert-geojson", help="GeoJSON building footprints to a local map file")
    p.add_argument("--in", type=Path, required=True, dest="input")
    p.add_argument("--origin", type=_floats(2), metavar="LAT,LON")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_convert)
    return ap


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except (CliError, FormatError, ValidationError, ValueError, OSError) as exc:
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"{PROG}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
