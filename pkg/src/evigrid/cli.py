"""Command-line frontend: simulate, map, fuse, eval, render.

Exit codes are stable: 0 success, 2 input/output or validation failure,
3 empty fusion window, 4 evaluation mismatch, 5 render error. The
EVIGRID_THREADS environment variable caps fusion workers (0 = auto).
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import io as gio
from .config import PipelineConfig
from .fusion import FusedBeliefs, FusionWindow, build_target_map
from .grid import BELIEF_LAYERS, MultiLayerGridMap, PointCloud, Pose, transform_cloud
from .ground import GroundSurface, fit_ground
from .metrics import EvalReport, false_belief_metrics, layer_error
from .raster import FrameRaster, rasterize_frame
from .simulate import (LABEL_LAYER, PRESET_NAMES, ground_truth_labels,
                       preset_scene, preset_trajectory, scene_to_yaml, simulate_scan)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_EMPTY_WINDOW = 3
EXIT_EVAL_MISMATCH = 4
EXIT_RENDER = 5


def _fail(code: int, message: str) -> int:
    print(f"evigrid: error: {message}", file=sys.stderr)
    return code


def _load_config(args) -> PipelineConfig:
    return PipelineConfig.load(getattr(args, "config", None))


def cmd_map(args) -> int:
    try:
        cfg = _load_config(args)
        cloud = gio.read_point_cloud(args.cloud, args.format)
        poses = gio.read_poses(args.poses)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    if not 0 <= args.frame_index < len(poses):
        return _fail(EXIT_INPUT, f"frame index {args.frame_index} outside pose file "
                                 f"({len(poses)} poses)")
    pose = poses[args.frame_index]
    spec = cfg.grid.make_spec(pose.translation[0], pose.translation[1])

    if len(cloud) == 0:
        print("evigrid: warning: empty cloud, writing all-unknown map", file=sys.stderr)
        surface = GroundSurface.flat(u_origin=spec.origin_x, v_origin=spec.origin_y,
                                     knot_spacing=cfg.ground.knot_spacing)
    else:
        world = transform_cloud(cloud, pose)
        try:
            surface = fit_ground(PointCloud(np.column_stack([world, cloud.intensity])),
                                 cfg.ground)
        except ValueError as exc:
            return _fail(EXIT_INPUT, f"ground fit failed: {exc}")

    raster = rasterize_frame(cloud, pose, surface, spec, cfg.sensor,
                             ground_threshold=cfg.ground_threshold)
    try:
        gio.write_grid_map(raster.to_map(full=args.full), args.out)
    except OSError as exc:
        return _fail(EXIT_INPUT, str(exc))
    return EXIT_OK


def cmd_fuse(args) -> int:
    try:
        cfg = _load_config(args)
        poses = gio.read_poses(args.poses)
        maps = [gio.read_grid_map(p) for p in args.maps]
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    if len(poses) < len(maps):
        return _fail(EXIT_INPUT, f"{len(maps)} maps but only {len(poses)} poses")

    try:
        rasters = [FrameRaster.from_map(m, poses[i]) for i, m in enumerate(maps)]
    except ValueError as exc:
        return _fail(EXIT_INPUT, str(exc))

    if args.ref_time is not None:
        # The reference may be any pose in the file, not necessarily one of the
        # frames; frames too far from it are dropped by the radius filter.
        ref_pose = min(poses, key=lambda p: abs(p.timestamp - args.ref_time))
        ref_index = int(np.argmin([abs(poses[i].timestamp - ref_pose.timestamp)
                                   for i in range(len(maps))]))
    else:
        ref_index = len(maps) // 2
        ref_pose = poses[ref_index]

    k = args.k if args.k is not None else cfg.fusion.window_k
    radius = args.radius if args.radius is not None else cfg.fusion.radius
    identity = Pose.identity()
    selected = [(rasters[i], identity) for i in range(len(rasters))
                if abs(i - ref_index) <= k]
    try:
        window = FusionWindow(selected, ref_pose, radius)
    except ValueError as exc:
        return _fail(EXIT_EMPTY_WINDOW, str(exc))

    ref_spec = cfg.grid.make_spec(ref_pose.translation[0], ref_pose.translation[1])
    target = build_target_map(window, ref_spec, sigma_min=cfg.fusion.sigma_min)
    try:
        gio.write_grid_map(target, args.out)
    except OSError as exc:
        return _fail(EXIT_INPUT, str(exc))
    return EXIT_OK


def evaluate_maps(target: MultiLayerGridMap, estimate: MultiLayerGridMap,
                  mask_layer: str | None = None) -> EvalReport:
    """Per-layer errors plus belief contradiction metrics between two maps."""
    if target.spec != estimate.spec:
        raise ValueError(f"grid specs differ: {target.spec} vs {estimate.spec}")
    missing = [n for n in target.layers if n not in estimate.layers]
    if missing:
        raise ValueError(f"estimate map lacks layers {missing}")
    mask = None
    if mask_layer is not None:
        if mask_layer not in target.layers:
            raise ValueError(f"mask layer {mask_layer!r} not in target map")
        mask = target.layers[mask_layer]

    report = EvalReport(cells_used=int(np.count_nonzero(mask > 0)) if mask is not None
                        else target.spec.width * target.spec.height)
    for name, values in target.layers.items():
        l1, l2 = layer_error(values, estimate.layers[name], mask)
        report.layer_l1[name] = l1
        report.layer_l2[name] = l2
    belief_names = ("bel_occupied", "bel_free", "bel_unknown")
    if all(n in target.layers and n in estimate.layers for n in belief_names):
        fo, ff = false_belief_metrics(FusedBeliefs.from_map(estimate),
                                      FusedBeliefs.from_map(target), mask)
        report.false_occupied = fo
        report.false_free = ff
    return report


def cmd_eval(args) -> int:
    try:
        target = gio.read_grid_map(args.target)
        estimate = gio.read_grid_map(args.estimate)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    try:
        report = evaluate_maps(target, estimate, args.mask)
    except ValueError as exc:
        return _fail(EXIT_EVAL_MISMATCH, str(exc))
    try:
        Path(args.out).write_text(report.to_csv_text())
    except OSError as exc:
        return _fail(EXIT_INPUT, str(exc))
    print(report.to_text())
    return EXIT_OK


def render_layer(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """8-bit grayscale image rows (north up) from a layer, round-half-up quantization."""
    v = np.nan_to_num(np.asarray(values, dtype=np.float64), nan=lo)
    if hi > lo:
        scaled = np.clip((v - lo) / (hi - lo), 0.0, 1.0)
    else:
        scaled = np.zeros_like(v)
    return np.flipud(np.floor(scaled * 255.0 + 0.5).astype(np.uint8))


def cmd_render(args) -> int:
    try:
        grid_map = gio.read_grid_map(args.map)
    except (OSError, ValueError) as exc:
        return _fail(EXIT_INPUT, str(exc))
    if args.layer not in grid_map.layers:
        return _fail(EXIT_RENDER, f"layer {args.layer!r} not in map "
                                  f"(has {grid_map.layer_names()})")
    values = grid_map.layers[args.layer]
    cfg = _load_config(args)
    if args.min is not None and args.max is not None:
        lo, hi = args.min, args.max
    elif args.layer in cfg.render.ranges:
        lo, hi = (float(v) for v in cfg.render.ranges[args.layer])
    elif args.layer in BELIEF_LAYERS:
        lo, hi = 0.0, 1.0
    else:
        finite = values[np.isfinite(values)]
        lo = float(finite.min()) if finite.size else 0.0
        hi = float(finite.max()) if finite.size else 0.0
    try:
        Image.fromarray(render_layer(values, lo, hi), mode="L").save(args.out)
    except OSError as exc:
        return _fail(EXIT_RENDER, str(exc))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    scene = preset_scene(args.preset)
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        return _fail(EXIT_INPUT, str(exc))

    poses = preset_trajectory(scene, args.frames, cfg.scan)
    if args.frames == 0:
        print("evigrid: warning: frame count 0, writing poses and labels only",
              file=sys.stderr)
    try:
        for idx, pose in enumerate(poses):
            scan_cfg = dataclasses.replace(cfg.scan, timestamp=pose.timestamp)
            cloud = simulate_scan(scene, pose, scan_cfg)
            gio.write_point_cloud(cloud, out_dir / f"scan_{idx:04d}.bin")
        gio.write_poses(poses, out_dir / "poses.txt")

        if poses:
            mid = poses[len(poses) // 2]
            ref_x, ref_y = mid.translation[0], mid.translation[1]
            times = [p.timestamp for p in poses]
        else:
            ref_x = ref_y = 0.0
            times = [0.0]
        spec = cfg.grid.make_spec(ref_x, ref_y)
        labels = ground_truth_labels(scene, spec, times)
        gio.write_grid_map(MultiLayerGridMap(spec, {LABEL_LAYER: labels.astype(np.float32)}),
                           out_dir / "ground_truth.egm")
        (out_dir / "scene.yaml").write_text(scene_to_yaml(scene))
    except OSError as exc:
        return _fail(EXIT_INPUT, str(exc))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evigrid",
                                     description="Evidential top-view grid mapping pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("map", help="rasterize one scan into a single-frame grid map")
    p.add_argument("cloud", help="point cloud file")
    p.add_argument("poses", help="pose text file")
    p.add_argument("--config", help="pipeline config YAML")
    p.add_argument("--out", required=True, help="output grid map path")
    p.add_argument("--format", default="xyzi_f32", choices=("xyzi_f32", "nuscenes_bin"))
    p.add_argument("--frame-index", type=int, default=0,
                   help="pose line to pair with the cloud (default 0)")
    p.add_argument("--full", action="store_true",
                   help="include transmissions/max_observable layers needed by fuse")
    p.set_defaults(func=cmd_map)

    p = sub.add_parser("fuse", help="fuse per-frame maps into a target map")
    p.add_argument("maps", nargs="+", help="per-frame grid maps written with map --full")
    p.add_argument("--poses", required=True, help="pose text file, one line per map")
    p.add_argument("--config", help="pipeline config YAML")
    p.add_argument("--out", required=True, help="output target map path")
    p.add_argument("--ref-time", type=float, default=None,
                   help="reference timestamp (default: middle frame)")
    p.add_argument("--k", type=int, default=None, help="window half-width in frames")
    p.add_argument("--radius", type=float, default=None, help="fusion radius in meters")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="compare an estimated map against a target map")
    p.add_argument("target")
    p.add_argument("estimate")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--mask", default=None, help="target layer used as evaluation mask")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render one layer as an 8-bit grayscale PNG")
    p.add_argument("map")
    p.add_argument("--layer", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="pipeline config YAML (render ranges)")
    p.add_argument("--min", type=float, default=None)
    p.add_argument("--max", type=float, default=None)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("simulate", help="generate synthetic scans with ground truth")
    p.add_argument("preset", choices=PRESET_NAMES)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="pipeline config YAML")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ValueError as exc:
        return _fail(EXIT_INPUT, str(exc))


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
