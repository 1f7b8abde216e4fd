"""
Command-line pipeline: simulate -> fit -> extract -> texture -> eval.

Stages talk through files only. Every command writes a manifest.json next to
its outputs; `satcity --manifest <file>` re-runs the recorded command with the
recorded configuration.
"""
import argparse
import glob
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, configure_logging
from .config import RunConfig, load_config
from .enhancer import EnhancerHook
from .errors import InputError, RefineAbortedError, SatCityError
from .geom_core import (Frame, NormalizeTransform, PointCloud, read_obj, read_ply, transform_for_bounds, write_obj,
                        write_ply)
from .mesh_extract import (TileMesh, marching_cubes, merge_tiles, naive_mc_baseline, sample_sdf,
                           tile_height_meshes, watertight_check)
from .metrics import evaluate_geometry, image_metrics
from .models import RunManifest, format_table, load_json, save_json
from .optimizer import TileFit, TileRegion, fit_tiled, loss_summary
from .raster import load_rgb, render_with_atlas, save_rgb
from .sat_camera import capture_stride, load_cameras, save_cameras, test_grid, training_grid
from .synth import gen_city, gt_cloud, gt_mesh, render_gt_views, sample_mvs, save_city
from .texture import assign_uvs, bake_basic, load_atlas, refine, save_atlas
from .zmono_field import load_field, save_field

logger = logging.getLogger(__name__)

NAIVE_RES = {"naive128": 128, "naive256": 256}


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(path, what="input"):
    if not path or not os.path.isfile(path):
        raise InputError(f"{what} not found: {path}")
    return path


def _ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as e:
        raise InputError(f"cannot create output directory {path}: {e}")
    if not os.access(path, os.W_OK):
        raise InputError(f"output directory is not writable: {path}")
    return path


class Run:
    """Bookkeeping for one command: inputs, outputs, stage timings."""

    def __init__(self, command, args, cfg):
        self.command = command
        self.args = args
        self.cfg = cfg
        self.inputs = {}
        self.outputs = []
        self.timings = {}
        self._t = None
        self._stage = None

    def input(self, path):
        self.inputs[path] = file_sha256(path)
        return path

    def output(self, path):
        self.outputs.append(path)
        return path

    def stage(self, name):
        now = time.time()
        if self._stage is not None:
            self.timings[self._stage] = now - self._t
        self._stage, self._t = name, now

    def manifest(self):
        self.stage(None)
        return RunManifest(
            command=self.command,
            args=self.args,
            config=self.cfg.to_dict(),
            inputs=self.inputs,
            outputs={p: file_sha256(p) if os.path.isfile(p) else None for p in sorted(set(self.outputs))},
            timings=self.timings,
            version=__version__,
        )


# simulate

def cmd_simulate(cfg, out_dir, run):
    """Synthetic benchmark directory: scene, GT mesh and cloud, MVS cloud, cameras, views."""
    sim = cfg.simulate
    _ensure_dir(out_dir)
    run.stage("city")
    city = gen_city(sim.city, cfg.seed)
    save_city(city, run.output(os.path.join(out_dir, "scene.txt")))
    mesh = gt_mesh(city)
    write_obj(mesh, run.output(os.path.join(out_dir, "gt_mesh.obj")))

    run.stage("sampling")
    write_ply(sample_mvs(city, sim.sampling, cfg.seed, cfg.threads), run.output(os.path.join(out_dir, "points.ply")))
    write_ply(gt_cloud(city, sim.gt_samples, cfg.seed, mesh=mesh), run.output(os.path.join(out_dir, "gt_points.ply")))

    run.stage("cameras")
    lo, hi = city.lo, city.hi
    stride = capture_stride(sim.altitude, sim.width, sim.gsd, sim.overlap)
    train = training_grid(lo, hi, sim.altitude, sim.fov_deg, stride, sim.width, sim.height,
                          sim.depression_deg, sim.headings, city.ground_z, sim.overlap)
    save_cameras(train.cameras, run.output(os.path.join(out_dir, "train_cameras.txt")))
    groups = [("train", train.cameras)]
    if sim.test_views:
        test = test_grid(lo, hi, width=sim.test_width, height=sim.test_height, ground_z=city.ground_z)
        save_cameras(test.cameras, run.output(os.path.join(out_dir, "test_cameras.txt")))
        groups.append(("test", test.cameras))

    run.stage("render")
    for name, cams in groups:
        view_dir = _ensure_dir(os.path.join(out_dir, "views", name))
        for i, img in enumerate(render_gt_views(city, cams, mesh=mesh, threads=cfg.threads)):
            save_rgb(img, run.output(os.path.join(view_dir, f"{i:03d}.png")))
    logger.info(f"Simulated scene written to {out_dir}")


# fit

def _tile_index_path(fit_dir):
    return os.path.join(fit_dir, "tiles.json")


def cmd_fit(cfg, input_path, out_dir, run):
    """Tiled field fit; writes one checkpoint per tile, tiles.json and fit_report.json."""
    cloud = read_ply(run.input(_require_file(input_path)))
    _ensure_dir(out_dir)
    run.stage("fit")
    steps_path = run.output(os.path.join(out_dir, "steps.jsonl"))
    with open(steps_path, "w") as log:
        def progress(tile, step, terms):
            log.write(json.dumps({"tile": tile, "step": step, **{k: float(v) for k, v in terms.items()}}) + "\n")

        fits = fit_tiled(cloud, cfg.extract.tiles, cfg.fit, cfg.extract.overlap, progress=progress)

    run.stage("write")
    lo, hi = cloud.bounds()
    entries, reports = [], []
    for tf in fits:
        ckpt = f"{tf.region.name}.zmsdf"
        save_field(tf.field, run.output(os.path.join(out_dir, ckpt)))
        entries.append({
            "name": tf.region.name,
            "index": list(tf.region.index),
            "checkpoint": ckpt,
            "transform": tf.transform.to_dict(),
            "core_lo": tf.region.core_lo.tolist(),
            "core_hi": tf.region.core_hi.tolist(),
            "region_lo": tf.region.region_lo.tolist(),
            "region_hi": tf.region.region_hi.tolist(),
            "degenerate": tf.degenerate,
        })
        if cfg.deterministic:
            tf.report.wall_time = 0.0
        reports.append(tf.report.to_dict())
    index = {"tiles": cfg.extract.tiles, "overlap": cfg.extract.overlap,
             "bounds": [lo.tolist(), hi.tolist()], "entries": entries}
    save_json(run.output(_tile_index_path(out_dir)), index)
    save_json(run.output(os.path.join(out_dir, "fit_report.json")), {"tiles": reports})
    for tf in fits:
        summary = loss_summary(tf.report)
        if summary:
            logger.info(f"{tf.region.name}: loss {summary['first']:.6f} -> {summary['best']:.6f} "
                        f"(best step {tf.report.best_step}), height RMSE {tf.report.height_rmse:.3e}")


def load_tile_fits(fit_dir, run=None):
    """Read tiles.json and every tile checkpoint back into TileFit records."""
    index_path = _require_file(_tile_index_path(fit_dir), "tile index")
    index = load_json(run.input(index_path) if run else index_path)
    fits = []
    for e in index["entries"]:
        ckpt = _require_file(os.path.join(fit_dir, e["checkpoint"]), "field checkpoint")
        field = load_field(run.input(ckpt) if run else ckpt)
        region = TileRegion(tuple(e["index"]), np.array(e["core_lo"]), np.array(e["core_hi"]),
                            np.array(e["region_lo"]), np.array(e["region_hi"]))
        fits.append(TileFit(field, NormalizeTransform.from_json(e["transform"]), region,
                            degenerate=e["degenerate"]))
    return index, fits


# extract

def extract_mesh(cfg, fit_dir=None, input_path=None, run=None):
    """
    Dispatch on extract.method.

    height / mc need a fit directory; naive128 / naive256 voxelize the input
    cloud directly.

    Returns:
        (world TriMesh, SeamReport or None)
    """
    method = cfg.extract.method
    if method in NAIVE_RES:
        cloud = read_ply(run.input(_require_file(input_path)) if run else _require_file(input_path))
        lo, hi = cloud.bounds()
        transform = transform_for_bounds(lo, hi, cfg.fit.padding)
        local = PointCloud(np.clip(transform.to_normalized(cloud.points), -1.0, 1.0), Frame.NORMALIZED)
        return transform.mesh_to_world(naive_mc_baseline(local, NAIVE_RES[method])), None

    if not fit_dir:
        raise InputError(f"extract method {method} needs --fit-dir")
    _, fits = load_tile_fits(fit_dir, run)
    if method == "height":
        tiles = tile_height_meshes(fits, cfg.extract.height_res, threads=cfg.threads)
    else:
        tiles = [TileMesh(marching_cubes(sample_sdf(tf.field, cfg.extract.mc_res)), tf.transform,
                          tf.region.core_lo, tf.region.core_hi, tf.region.name) for tf in fits]
    if len(tiles) == 1 and method == "mc":
        return tiles[0].transform.mesh_to_world(tiles[0].mesh), None
    return merge_tiles(tiles, cfg.extract.seam_policy, cfg.extract.weld_tol, snap_tol=cfg.extract.snap_tol)


def cmd_extract(cfg, fit_dir, input_path, out_path, run):
    run.stage("extract")
    mesh, seams = extract_mesh(cfg, fit_dir, input_path, run)
    out_dir = _ensure_dir(os.path.dirname(os.path.abspath(out_path)))
    run.stage("write")
    write_obj(mesh, run.output(out_path))
    base = os.path.splitext(out_path)[0]
    check = watertight_check(mesh)
    save_json(run.output(base + "_watertight.json"), check)
    if seams is not None:
        save_json(run.output(base + "_seams.json"), seams)
    if not check.watertight:
        logger.warning(f"Mesh is not watertight: {check.boundary_edge_count} boundary, "
                       f"{check.non_manifold_edge_count} non-manifold edges")
    logger.info(f"Extracted {cfg.extract.method} mesh into {out_dir}")


# texture

def load_views(cameras_path, images_dir, run=None):
    """Pair cameras with the sorted PNGs of a directory."""
    cams = load_cameras(run.input(_require_file(cameras_path, "camera file")) if run
                        else _require_file(cameras_path, "camera file"))
    paths = sorted(glob.glob(os.path.join(images_dir, "*.png")))
    if len(paths) != len(cams):
        raise InputError(f"{images_dir}: {len(paths)} images for {len(cams)} cameras")
    images = []
    for p, cam in zip(paths, cams):
        img = load_rgb(run.input(p) if run else p)
        if img.shape[:2] != (cam.height, cam.width):
            raise InputError(f"{p}: image is {img.shape[1]}x{img.shape[0]}, camera expects {cam.width}x{cam.height}")
        images.append(img)
    return list(zip(images, cams))


def cmd_texture(cfg, mesh_path, cameras_path, images_dir, out_dir, run):
    tex = cfg.texture
    mesh = read_obj(run.input(_require_file(mesh_path)))
    views = load_views(cameras_path, images_dir, run)
    _ensure_dir(out_dir)
    atlas_path = os.path.join(out_dir, "atlas.png")

    run.stage("uv")
    mesh = assign_uvs(mesh, tex.atlas_size)
    run.stage("bake")
    atlas, basic = bake_basic(mesh, views, tex.atlas_size, epochs=tex.basic_epochs, threads=cfg.threads)
    reports = {"basic": basic.to_dict(), "refine": []}

    if not tex.basic_only:
        run.stage("refine")
        hook = EnhancerHook.from_config(tex.enhancer)
        try:
            atlas, refine_reports = refine(mesh, atlas, hook, tex.refine, threads=cfg.threads)
        except RefineAbortedError as e:
            save_atlas(e.last_good, run.output(atlas_path))
            write_obj(mesh, run.output(os.path.join(out_dir, "textured.obj")), material=atlas_path)
            raise
        reports["refine"] = [r.to_dict() for r in refine_reports]

    run.stage("write")
    save_atlas(atlas, run.output(atlas_path))
    run.output(os.path.splitext(atlas_path)[0] + ".npz")
    write_obj(mesh, run.output(os.path.join(out_dir, "textured.obj")), material=atlas_path)
    run.output(os.path.join(out_dir, "textured.mtl"))
    save_json(run.output(os.path.join(out_dir, "bake_report.json")), reports)


# eval

def cmd_eval(cfg, mesh_path, gt_path, out_path, run, atlas_path=None, cameras_path=None, images_dir=None):
    ev = cfg.eval
    mesh = read_obj(run.input(_require_file(mesh_path)))
    if atlas_path and mesh.uvs is None:
        raise InputError(f"{mesh_path}: mesh has no uvs, image metrics need a textured OBJ")
    gt = read_ply(run.input(_require_file(gt_path)))
    run.stage("geometry")
    geo = evaluate_geometry(mesh, gt, ev.n_samples, ev.d_tau, cfg.seed, cfg.threads)
    result = {"geometry": geo.to_dict()}
    rows, names = [geo.to_row()], ["geometry"]

    if atlas_path:
        run.stage("images")
        atlas = load_atlas(run.input(_require_file(atlas_path, "atlas")))
        views = load_views(cameras_path, images_dir, run)
        renders = [render_with_atlas(mesh, atlas, cam, threads=cfg.threads) for _, cam in views]
        img = image_metrics(renders, [v[0] for v in views], border=ev.border)
        result["images"] = img.to_dict()
        rows.append(img.to_row())
        names.append("images")

    _ensure_dir(os.path.dirname(os.path.abspath(out_path)))
    save_json(run.output(out_path), result)
    table_path = os.path.splitext(out_path)[0] + ".txt"
    with open(run.output(table_path), "w") as f:
        f.write("".join(format_table([r], [n]) for r, n in zip(rows, names)))
    logger.info(f"Evaluation written to {out_path}")


# entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="satcity", description="2.5D city reconstruction from sparse satellite points.")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--seed", type=int, help="Global seed")
    parser.add_argument("--threads", type=int, help="Worker threads")
    parser.add_argument("--deterministic", action="store_true", default=None,
                        help="Strip wall-clock values from data outputs")
    parser.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="Override one config value (repeatable)")
    parser.add_argument("--manifest", help="Re-run the command recorded in a manifest.json")
    parser.add_argument("--log-file", help="Also append logs to this file")
    parser.add_argument("--log-level", help="Logging level")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("simulate", help="Generate a synthetic box-city benchmark")
    p.add_argument("--out", required=True, help="Output directory")

    p = sub.add_parser("fit", help="Fit Z-monotonic fields to a point cloud")
    p.add_argument("--input", required=True, help="Input PLY point cloud (world frame)")
    p.add_argument("--out", required=True, help="Output directory for checkpoints and reports")

    p = sub.add_parser("extract", help="Extract a world-space mesh")
    p.add_argument("--fit-dir", help="Directory written by fit")
    p.add_argument("--input", help="Input PLY (naive baselines only)")
    p.add_argument("--method", choices=["height", "mc", "naive128", "naive256"], help="Extraction path")
    p.add_argument("--out", required=True, help="Output OBJ path")

    p = sub.add_parser("texture", help="Bake and refine a texture atlas")
    p.add_argument("--mesh", required=True, help="Input OBJ (world frame)")
    p.add_argument("--cameras", required=True, help="Camera file of the source views")
    p.add_argument("--images", required=True, help="Directory of source view PNGs in camera order")
    p.add_argument("--basic-only", action="store_true", help="Skip refinement")
    p.add_argument("--out", required=True, help="Output directory")

    p = sub.add_parser("eval", help="Geometry and image metrics")
    p.add_argument("--mesh", required=True, help="Predicted OBJ")
    p.add_argument("--gt", required=True, help="Ground-truth PLY point cloud")
    p.add_argument("--atlas", help="Atlas PNG for image metrics (mesh must carry uvs)")
    p.add_argument("--cameras", help="Evaluation cameras")
    p.add_argument("--images", help="Evaluation ground-truth images")
    p.add_argument("--out", required=True, help="Output report JSON")
    return parser


def _command_args(args):
    skip = {"config", "seed", "threads", "deterministic", "set", "manifest", "log_file", "log_level", "command"}
    return {k: v for k, v in vars(args).items() if k not in skip}


def _resolve_config(args):
    cfg = load_config(args.config, args.set)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.deterministic:
        cfg.deterministic = True
    if args.log_level:
        cfg.log_level = args.log_level
    if getattr(args, "method", None):
        cfg.extract.method = args.method
    if getattr(args, "basic_only", False):
        cfg.texture.basic_only = True
    return cfg.validate().propagate()


def _from_manifest(path):
    manifest = RunManifest.from_json(load_json(_require_file(path, "manifest")))
    cfg = RunConfig.from_json(manifest.config).validate().propagate()
    args = argparse.Namespace(command=manifest.command, **manifest.args)
    return args, cfg, manifest


def dispatch(args, cfg):
    run = Run(args.command, _command_args(args), cfg)
    if args.command == "simulate":
        cmd_simulate(cfg, args.out, run)
        out_dir = args.out
    elif args.command == "fit":
        cmd_fit(cfg, args.input, args.out, run)
        out_dir = args.out
    elif args.command == "extract":
        cmd_extract(cfg, args.fit_dir, args.input, args.out, run)
        out_dir = os.path.dirname(os.path.abspath(args.out))
    elif args.command == "texture":
        cmd_texture(cfg, args.mesh, args.cameras, args.images, args.out, run)
        out_dir = args.out
    elif args.command == "eval":
        cmd_eval(cfg, args.mesh, args.gt, args.out, run, args.atlas, args.cameras, args.images)
        out_dir = os.path.dirname(os.path.abspath(args.out))
    else:
        raise InputError(f"unknown command {args.command!r}")
    manifest = run.manifest()
    save_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def main(argv=None):
    """
    Run one command.

    Returns:
        Process exit code: 0 success, 2 bad input, 3 fit divergence,
        4 enhancer failure, 1 anything else from the package
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level or os.environ.get("SATCITY_LOG_LEVEL") or "INFO", args.log_file)
    try:
        if args.manifest:
            args, cfg, previous = _from_manifest(args.manifest)
            logger.info(f"Re-running {args.command} from {previous.created} manifest (version {previous.version})")
        else:
            if not args.command:
                parser.print_usage(sys.stderr)
                return 2
            cfg = _resolve_config(args)
            previous = None
        logging.getLogger().setLevel(cfg.log_level)
        manifest = dispatch(args, cfg)
        if previous is not None:
            changed = [p for p, h in previous.outputs.items() if manifest.outputs.get(p) != h]
            if changed:
                logger.warning(f"{len(changed)} outputs differ from the recorded run: {changed[:5]}")
            else:
                logger.info("All outputs match the recorded run")
        return 0
    except SatCityError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except OSError as e:
        logger.error(f"I/O error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
