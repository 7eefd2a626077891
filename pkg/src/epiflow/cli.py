"""Command-line entry points.

::

    epiflow synth --preset plane --out scene/ [--seed 0] [--views 3]
    epiflow reconstruct scene/ [--out scene/depths] [--config cfg.json] [--seed N]
                               [--range-factor X] [--init-dir DIR]
    epiflow fuse scene/ [--depths scene/depths] [--out scene/fused.ply]
    epiflow eval scene/fused.ply scene/gt/gt.ply [--threshold T | --footprint F]
    epiflow range-sweep scene/ [--seed 7] [--fixed-init] [--factors 1 2 3]

Exit status: 0 on success, 1 when the pipeline or an input file fails
(message on standard error), 2 for usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, io, synth
from .errors import EpiflowError, ParseError
from .evaluate import default_threshold, evaluate, gt_point_cloud, mean_footprint
from .fuse3d import ConsistencyParams, fuse_to_point_cloud, geometric_consistency_mask, read_ply, write_ply
from .harness import RANGE_FACTORS, reconstruct_all, widen_range
from .pipeline import DepthField, compute_features, init_depth, stage_camera

log = logging.getLogger("epiflow")


def _depth_name(i: int) -> str:
    return f"depth_{i:08d}.pfm"


def _synthetic_spec(meta: dict) -> synth.SceneSpec | None:
    spec = meta.get("spec")
    return synth.SceneSpec(**spec) if spec else None


def _dump(obj, path: Path | None = None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path is not None:
        path.write_text(text + "\n")
    print(text)


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = synth.SceneSpec(preset=args.preset, width=args.width, height=args.height,
                           n_views=args.views, name=args.name or args.preset)
    scene = synth.render_scene(spec, args.seed)
    out = Path(args.out)
    fine_cams = [stage_camera(c, "fine") for c in scene.cameras]
    fine_gt = [synth.render_depth(spec, c) for c in fine_cams]
    foot = mean_footprint(fine_gt, fine_cams)
    io.write_scene(out, scene.images, scene.cameras, scene.pairs, spec.name,
                   {"spec": spec.to_dict(), "seed": args.seed, "footprint": foot})
    (out / "gt").mkdir(exist_ok=True)
    for i, d in enumerate(scene.gt_depths):
        io.write_pfm(d, out / "gt" / _depth_name(i))
    write_ply(gt_point_cloud(fine_gt, fine_cams, scene.images), out / "gt" / "gt.ply")
    print(f"wrote {len(scene.cameras)} views to {out} (footprint {foot:.6g})")
    return 0


# --------------------------------------------------------------------------
# reconstruct
# --------------------------------------------------------------------------

def _load_config(args):
    cfg = io.load_config(args.config) if getattr(args, "config", None) else io.config_from_dict({})
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _read_inits(init_dir: Path | None, n: int) -> dict[int, DepthField] | None:
    if init_dir is None:
        return None
    out = {}
    for i in range(n):
        p = Path(init_dir) / _depth_name(i)
        if p.exists():
            out[i] = io.read_depth_pfm(p, stage="coarse")
    if not out:
        raise ParseError(f"{init_dir}: no {_depth_name(0)}-style initial depth files")
    return out


def _reconstruct(bundle: io.SceneBundle, images, features, cfg, factor: float, initial, out: Path) -> dict:
    cams = [widen_range(c, factor) for c in bundle.cameras]
    t0 = time.perf_counter()
    results = reconstruct_all(cams, images, bundle.pairs, cfg, initial, features)
    elapsed = time.perf_counter() - t0
    out.mkdir(parents=True, exist_ok=True)
    (out / "cams").mkdir(exist_ok=True)
    spec = _synthetic_spec(bundle.meta)
    views = {}
    for res in results:
        io.write_depth_pfm(res.fine, out / _depth_name(res.ref))
        io.save_camera_file(res.fine_camera, out / "cams" / f"{res.ref:08d}_cam.txt")
        info = {"sources": list(res.sources),
                "coarse_valid": float(res.coarse.valid.mean()),
                "fine_valid": float(res.fine.valid.mean())}
        if spec is not None:
            gt = synth.render_depth(spec, res.fine_camera)
            rel = np.abs(res.fine.depth - gt) / gt
            info["within_1pct"] = float(np.mean(rel[res.fine.valid] < 0.01)) if res.fine.valid.any() else 0.0
        views[str(res.ref)] = info
    return {"range_factor": factor, "seed": cfg.seed, "seconds": round(elapsed, 3),
            "config": io.config_to_dict(cfg), "views": views}


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    bundle = io.load_scene(args.scene, cfg)
    images = bundle.load_images()
    out = Path(args.out) if args.out else Path(args.scene) / "depths"
    initial = _read_inits(args.init_dir, len(images))
    diag = _reconstruct(bundle, images, compute_features(images), cfg, args.range_factor, initial, out)
    _dump(diag, out / "diagnostics.json")
    return 0


# --------------------------------------------------------------------------
# fuse / eval
# --------------------------------------------------------------------------

def _load_depths(bundle: io.SceneBundle, depth_dir: Path):
    depths, cams, refs = [], [], []
    for i, cam in enumerate(bundle.cameras):
        p = depth_dir / _depth_name(i)
        if not p.exists():
            continue
        d = io.read_depth_pfm(p)
        cam_path = depth_dir / "cams" / f"{i:08d}_cam.txt"
        if cam_path.exists():
            fc = io.load_camera_file(cam_path)
        else:
            fc = stage_camera(cam, "fine")
        if (fc.width, fc.height) != (d.width, d.height):
            raise ParseError(f"{p}: depth map is {d.width}x{d.height}, camera expects {fc.width}x{fc.height}")
        depths.append(d)
        cams.append(fc)
        refs.append(i)
    if not depths:
        raise ParseError(f"{depth_dir}: no depth maps found")
    return depths, cams, refs


def fuse_dir(scene_dir, depth_dir, params: ConsistencyParams):
    bundle = io.load_scene(scene_dir)
    depths, cams, refs = _load_depths(bundle, Path(depth_dir))
    masks = geometric_consistency_mask(depths, cams, params)
    images = bundle.load_images()
    return fuse_to_point_cloud(depths, masks, [images[r] for r in refs], cams), masks


def cmd_fuse(args) -> int:
    params = ConsistencyParams(args.max_reproj_error, args.max_rel_depth_diff, args.min_views,
                               not args.no_range_filter).validate()
    depth_dir = Path(args.depths) if args.depths else Path(args.scene) / "depths"
    cloud, masks = fuse_dir(args.scene, depth_dir, params)
    out = Path(args.out) if args.out else Path(args.scene) / "fused.ply"
    write_ply(cloud, out)
    kept = [float(m.mean()) for m in masks]
    print(f"wrote {len(cloud)} points to {out} (kept fractions {', '.join(f'{k:.3f}' for k in kept)})")
    return 0


def _threshold(args) -> float:
    if args.threshold is not None:
        return args.threshold
    if args.footprint is not None:
        return default_threshold(args.footprint)
    meta = Path(args.gt).resolve().parent.parent / "scene.json"
    if meta.exists():
        foot = json.loads(meta.read_text()).get("footprint")
        if foot:
            return default_threshold(float(foot))
    raise EpiflowError("no distance threshold: pass --threshold or --footprint")


def cmd_eval(args) -> int:
    for p in (args.cloud, args.gt):
        if not Path(p).exists():
            raise ParseError(f"{p}: no such point cloud")
    report = evaluate(read_ply(args.cloud), read_ply(args.gt), _threshold(args))
    print(report.to_text())
    return 0


# --------------------------------------------------------------------------
# range sweep
# --------------------------------------------------------------------------

def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def cmd_range_sweep(args) -> int:
    cfg = _load_config(args)
    bundle = io.load_scene(args.scene, cfg)
    images = bundle.load_images()
    features = compute_features(images)
    out = Path(args.out) if args.out else Path(args.scene) / "range_sweep"
    initial = None
    if args.fixed_init:
        # Drawn once from the declared range and shared by every sweep.
        initial = {i: init_depth(stage_camera(c, "coarse", features["coarse"][i]), [cfg.seed, i])
                   for i, c in enumerate(bundle.cameras)}
        (out / "init").mkdir(parents=True, exist_ok=True)
        for i, d in initial.items():
            io.write_depth_pfm(d, out / "init" / _depth_name(i))
    gt_path = Path(args.scene) / "gt" / "gt.ply"
    gt = read_ply(gt_path) if gt_path.exists() else None
    foot = bundle.meta.get("footprint")
    runs, digests = {}, {}
    for x in args.factors:
        sub = out / f"range_{x:g}"
        diag = _reconstruct(bundle, images, features, cfg, x, initial, sub)
        digests[x] = {name: _digest(sub / name) for name in sorted(p.name for p in sub.glob("depth_*.pfm"))}
        entry = {"seconds": diag["seconds"], "fine_valid": np.mean([v["fine_valid"] for v in diag["views"].values()])}
        if gt is not None and foot:
            cloud, _ = fuse_dir(args.scene, sub, ConsistencyParams())
            if len(cloud):
                entry["overall"] = evaluate(cloud, gt, default_threshold(float(foot))).overall
        runs[f"{x:g}"] = entry
    first = digests[args.factors[0]]
    summary = {"seed": cfg.seed, "fixed_init": args.fixed_init,
               "identical_depths": all(d == first for d in digests.values()),
               "ranges": {k: {kk: float(vv) for kk, vv in v.items()} for k, v in runs.items()}}
    base = runs[f"{args.factors[0]:g}"].get("overall")
    if base:
        summary["overall_change"] = {k: v["overall"] / base - 1.0 for k, v in runs.items() if "overall" in v}
    _dump(summary, out / "summary.json")
    return 0


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="epiflow", description="Multi-view depth by epipolar matching.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic scene directory with ground truth")
    p.add_argument("--preset", choices=synth.PRESETS, default="plane")
    p.add_argument("--out", required=True, help="scene directory to create")
    p.add_argument("--seed", type=int, default=0, help="texture seed")
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=128)
    p.add_argument("--name", default="")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("reconstruct", help="estimate a fine depth map per view")
    p.add_argument("scene")
    p.add_argument("--out", help="output directory (default: SCENE/depths)")
    p.add_argument("--config", help="JSON pipeline configuration")
    p.add_argument("--seed", type=int, help="initialisation seed (overrides the config)")
    p.add_argument("--range-factor", type=float, default=1.0,
                   help="widen the declared range to [d_min/X, d_max*X]")
    p.add_argument("--init-dir", type=Path, help="directory of coarse initial depth PFMs")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("fuse", help="filter depth maps and fuse them into a PLY point cloud")
    p.add_argument("scene")
    p.add_argument("--depths", help="depth directory (default: SCENE/depths)")
    p.add_argument("--out", help="output PLY (default: SCENE/fused.ply)")
    p.add_argument("--max-reproj-error", type=float, default=1.0, help="pixels")
    p.add_argument("--max-rel-depth-diff", type=float, default=0.01)
    p.add_argument("--min-views", type=int, default=2, help="consistent sources needed to keep a pixel")
    p.add_argument("--no-range-filter", action="store_true", help="keep depths outside the declared range")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="accuracy / completeness of a cloud against ground truth")
    p.add_argument("cloud")
    p.add_argument("gt")
    p.add_argument("--threshold", type=float, help="outlier distance in scene units")
    p.add_argument("--footprint", type=float, help="pixel footprint; threshold = 20 x footprint")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("range-sweep", help="reconstruct under widened depth ranges and compare")
    p.add_argument("scene")
    p.add_argument("--out", help="output directory (default: SCENE/range_sweep)")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--fixed-init", action="store_true", help="share one initial depth field across ranges")
    p.add_argument("--factors", type=float, nargs="+", default=list(RANGE_FACTORS))
    p.set_defaults(func=cmd_range_sweep)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except EpiflowError as exc:
        print(f"epiflow {args.command}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"epiflow {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
