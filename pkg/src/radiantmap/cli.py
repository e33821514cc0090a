"""Command-line interface.

Subcommands: fuse, segment, viewfactor, mrt, globe, field, pipeline.

Exit codes: 0 success, 2 invalid input, 3 stage failure, 4 I/O error.
Artifacts are written to ``<path>.partial`` first and renamed into place on
success, so an aborted run leaves only clearly marked partial files.
All temperatures are kelvins internally; the ``--units`` preference only
affects display.  RADIANT_THREADS serves as the --threads fallback.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from importlib import metadata
from pathlib import Path

import numpy as np

from . import field as field_mod
from . import fusion, mrt, scene as scene_mod, segmentation, viewfactor
from .errors import InvalidArgumentError, RadiantMapError, SceneFormatError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_INVALID_INPUT = 2
EXIT_STAGE_FAILURE = 3
EXIT_IO = 4

KELVIN_OFFSET = 273.15


@dataclass
class RunConfig:
    """Pipeline defaults; a JSON config file provides them, flags override."""

    frames: str | None = None
    detections: str | None = None
    scene: str | None = None
    out_dir: str = "."
    rays: int = viewfactor.DEFAULT_N_RAYS
    seed: int = viewfactor.DEFAULT_SEED
    voxel: float = 0.01
    nx: int = field_mod.DEFAULT_GRID_N
    ny: int = field_mod.DEFAULT_GRID_N
    height: float = field_mod.DEFAULT_HEIGHT
    units: str = "K"
    threads: int = 1
    no_icp: bool = False

    def __post_init__(self):
        if self.rays < 1 or self.seed < 0 or self.voxel <= 0:
            raise InvalidArgumentError("rays, seed, and voxel must be positive")
        if self.nx < 2 or self.ny < 2 or self.height <= 0 or self.threads < 1:
            raise InvalidArgumentError("grid dimensions, height, and threads must be positive")
        if self.units not in ("K", "C"):
            raise InvalidArgumentError(f"units must be 'K' or 'C', got {self.units!r}")

    @classmethod
    def load(cls, path: str | Path, overrides: dict) -> "RunConfig":
        data: dict = {}
        if path:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise SceneFormatError(f"unknown config keys: {sorted(unknown)}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)


def _parse_temperature(text: str) -> float:
    """Parse a temperature string: bare numbers are kelvins, 'C'/'K' suffix converts."""
    s = text.strip()
    unit = "K"
    if s and s[-1] in "cCkK":
        unit = s[-1].upper()
        s = s[:-1]
    try:
        value = float(s)
    except ValueError:
        raise InvalidArgumentError(f"cannot parse temperature {text!r}") from None
    return value + KELVIN_OFFSET if unit == "C" else value


def _parse_point(text: str) -> np.ndarray:
    parts = text.split(",")
    if len(parts) != 3:
        raise InvalidArgumentError(f"point must be 'x,y,z', got {text!r}")
    try:
        return np.array([float(p) for p in parts])
    except ValueError:
        raise InvalidArgumentError(f"point must be numeric, got {text!r}") from None


def _display_temps(kelvin: float) -> dict[str, float]:
    return {"mrt_k": kelvin, "mrt_c": kelvin - KELVIN_OFFSET}


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("RADIANT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidArgumentError(f"RADIANT_THREADS={env!r} is not an integer") from None
    return 1


class _Artifact:
    """Write-to-partial-then-rename helper; aborted runs leave *.partial files."""

    def __init__(self, final: str | Path):
        self.final = Path(final)
        self.partial = self.final.with_name(self.final.name + ".partial")

    def __enter__(self) -> Path:
        return self.partial

    def __exit__(self, exc_type, exc, tb) -> None:
        if exc_type is None:
            self.partial.replace(self.final)


def _package_version() -> str:
    try:
        return metadata.version("radiantmap")
    except metadata.PackageNotFoundError:
        return "unknown"


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _load_dataset(frames_dir: str):
    cams = fusion.load_calibration(Path(frames_dir) / "calib.json")
    frames = fusion.load_frames(frames_dir)
    return cams, frames


def cmd_fuse(args) -> int:
    cams, frames = _load_dataset(args.frames)
    cloud = fusion.build_thermal_map(frames, cams, voxel=args.voxel,
                                     use_icp=not args.no_icp)
    with _Artifact(args.out) as tmp:
        fusion.save_cloud(cloud, tmp)
    print(f"wrote {args.out} ({len(cloud)} points)")
    return EXIT_OK


def _segment_scene(scene, cloud, cams, frames, detections):
    by_frame = {i: f for i, f in enumerate(frames)}
    observations = []
    skipped = 0
    for det in detections:
        frame = by_frame.get(det.frame)
        if frame is None:
            raise SceneFormatError(f"detection references unknown frame {det.frame}")
        obs = segmentation.lift_detection(det, frame, cams)
        if obs is None:
            skipped += 1
        else:
            observations.append(obs)
    tracks = segmentation.associate(observations)
    augmented, notices = segmentation.register_features(tracks, scene, cloud)
    return augmented, tracks, skipped, notices


def cmd_segment(args) -> int:
    cams, frames = _load_dataset(args.frames)
    scene = scene_mod.load_scene(args.scene)
    if args.cloud:
        cloud = fusion.load_cloud(args.cloud)
    else:
        cloud = fusion.build_thermal_map(frames, cams, voxel=args.voxel,
                                         use_icp=not args.no_icp)
    detections = segmentation.load_detections(args.detections)
    augmented, tracks, skipped, notices = _segment_scene(scene, cloud, cams, frames, detections)
    with _Artifact(args.out) as tmp:
        scene_mod.save_scene(augmented, tmp)
    n_feats = sum(len(s.features) for s in augmented.surfaces)
    print(f"wrote {args.out} ({len(tracks)} tracks -> {n_feats} features, "
          f"{skipped} detections skipped, {len(notices)} notices)")
    return EXIT_OK


def cmd_viewfactor(args) -> int:
    scene = scene_mod.load_scene(args.scene)
    vfs = viewfactor.view_factors(_parse_point(args.point), scene,
                                  n_rays=args.rays, seed=args.seed)
    json.dump(vfs.to_dict(), sys.stdout, indent=2)
    print()
    return EXIT_OK


def cmd_mrt(args) -> int:
    scene = scene_mod.load_scene(args.scene)
    result = mrt.mrt_at_point(_parse_point(args.point), scene, n_rays=args.rays,
                              seed=args.seed, mode=args.mode)
    out = result.to_dict()
    out.update(_display_temps(result.mrt))
    json.dump(out, sys.stdout, indent=2)
    print()
    return EXIT_OK


def cmd_globe(args) -> int:
    reading = mrt.GlobeReading(t_g=_parse_temperature(args.tg),
                               t_a=_parse_temperature(args.ta))
    json.dump(_display_temps(mrt.globe_mrt(reading)), sys.stdout, indent=2)
    print()
    return EXIT_OK


def cmd_field(args) -> int:
    scene = scene_mod.load_scene(args.scene)
    threads = _resolve_threads(args.threads)
    grid = field_mod.make_grid(scene, nx=args.nx, ny=args.ny, height=args.height)
    fld = field_mod.compute_field(scene, grid, n_rays=args.rays, seed=args.seed,
                                  threads=threads)
    written = {}
    if args.csv:
        with _Artifact(args.csv) as tmp:
            field_mod.write_field_csv(fld, tmp)
        written["csv"] = args.csv
    if args.image:
        with _Artifact(args.image) as tmp:
            field_mod.render_field_image(fld).save(tmp, format="PNG")
        written["image"] = args.image
    print(f"field {fld.nx}x{fld.ny} at z={fld.z:.3f} m; wrote {written or 'nothing'}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    overrides = {k: getattr(args, k) for k in
                 ("frames", "detections", "scene", "out_dir", "rays", "seed", "voxel",
                  "nx", "ny", "height", "units", "threads")}
    if args.no_icp:
        overrides["no_icp"] = True
    config = RunConfig.load(args.config, overrides)
    # --threads wins, RADIANT_THREADS is the fallback, then the config file.
    if args.threads is None and os.environ.get("RADIANT_THREADS"):
        config.threads = _resolve_threads(None)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    report: dict = {
        "versions": {"radiantmap": _package_version(), "numpy": np.__version__},
        "config": {f.name: getattr(config, f.name) for f in fields(RunConfig)},
        "seeds": {},
        "timings_s": {},
        "warnings": [],
        "artifacts": {},
        "stages": [],
    }

    def run_stage(name: str, fn):
        t0 = time.perf_counter()
        try:
            result = fn()
        except RadiantMapError as exc:
            raise _StageFailure(name, exc) from exc
        report["timings_s"][name] = round(time.perf_counter() - t0, 6)
        report["stages"].append(name)
        return result

    cloud = None
    the_scene = None

    if config.scene:
        the_scene = run_stage("load-scene", lambda: scene_mod.load_scene(config.scene))
    if config.frames:
        cams, frames = run_stage("load-frames", lambda: _load_dataset(config.frames))

        def fuse():
            c = fusion.build_thermal_map(frames, cams, voxel=config.voxel,
                                         use_icp=not config.no_icp)
            with _Artifact(out_dir / "cloud.rtpc") as tmp:
                fusion.save_cloud(c, tmp)
            report["artifacts"]["cloud"] = str(out_dir / "cloud.rtpc")
            return c

        cloud = run_stage("fuse", fuse)

        if the_scene is None:
            def extract():
                params = scene_mod.ExtractionParams(seed=config.seed)
                surfaces = scene_mod.extract_planar_surfaces(cloud, params)
                report["seeds"]["extraction"] = config.seed
                return scene_mod.Scene(tuple(surfaces),
                                       metadata={"extraction_seed": config.seed})

            the_scene = run_stage("extract", extract)
    if the_scene is None:
        raise InvalidArgumentError("pipeline needs --frames and/or --scene")

    if config.detections:
        if cloud is None or config.frames is None:
            raise InvalidArgumentError("segmentation needs --frames for depth lookups")

        def segment():
            dets = segmentation.load_detections(config.detections)
            augmented, tracks, skipped, notices = _segment_scene(
                the_scene, cloud, cams, frames, dets)
            report["warnings"].extend(notices)
            if skipped:
                report["warnings"].append(f"{skipped} detections skipped")
            return augmented

        the_scene = run_stage("segment", segment)

    def write_scene():
        path = out_dir / "scene.json"
        with _Artifact(path) as tmp:
            scene_mod.save_scene(the_scene, tmp)
        report["artifacts"]["scene"] = str(path)

    run_stage("write-scene", write_scene)

    def compute():
        grid = field_mod.make_grid(the_scene, nx=config.nx, ny=config.ny,
                                   height=config.height)
        fld = field_mod.compute_field(the_scene, grid, n_rays=config.rays,
                                      seed=config.seed, threads=config.threads)
        report["seeds"]["field_base"] = config.seed
        report["seeds"]["field_per_cell"] = "SeedSequence((field_base, cell_index))"
        report["warnings"].extend(fld.warnings)
        csv_path = out_dir / "field.csv"
        img_path = out_dir / "field.png"
        with _Artifact(csv_path) as tmp:
            field_mod.write_field_csv(fld, tmp)
        with _Artifact(img_path) as tmp:
            field_mod.render_field_image(fld).save(tmp, format="PNG")
        report["artifacts"]["field_csv"] = str(csv_path)
        report["artifacts"]["field_image"] = str(img_path)
        return fld

    t_field = time.perf_counter()
    fld = run_stage("field", compute)
    elapsed = time.perf_counter() - t_field
    rays_traced = int(np.count_nonzero(~fld.mask)) * config.rays
    report["ray_throughput_per_s"] = round(rays_traced / elapsed) if elapsed > 0 else None
    report["rays_traced"] = rays_traced

    n_feats = sum(len(s.features) for s in the_scene.surfaces)
    report["summary"] = {"surfaces": len(the_scene.surfaces), "features": n_feats,
                         "grid": [config.nx, config.ny],
                         "unmasked_cells": int(np.count_nonzero(~fld.mask))}
    report_path = out_dir / "report.json"
    with _Artifact(report_path) as tmp:
        tmp.write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    print(f"pipeline complete: {len(the_scene.surfaces)} surfaces, {n_feats} features; "
          f"report at {report_path}")
    return EXIT_OK


class _StageFailure(Exception):
    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radiantmap",
                                     description="Mean radiant temperature mapping")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fuse", help="fuse a frame dataset into a thermal point cloud")
    p.add_argument("--frames", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--voxel", type=float, default=0.01)
    p.add_argument("--no-icp", action="store_true")
    p.set_defaults(fn=cmd_fuse)

    p = sub.add_parser("segment", help="register detections as thermal features")
    p.add_argument("--frames", required=True)
    p.add_argument("--detections", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cloud", help="reuse a fused cloud file instead of refusing")
    p.add_argument("--voxel", type=float, default=0.01)
    p.add_argument("--no-icp", action="store_true")
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("viewfactor", help="view factors from a point (JSON to stdout)")
    p.add_argument("--scene", required=True)
    p.add_argument("--point", required=True, help="x,y,z in meters")
    p.add_argument("--rays", type=int, default=viewfactor.DEFAULT_N_RAYS)
    p.add_argument("--seed", type=int, default=viewfactor.DEFAULT_SEED)
    p.set_defaults(fn=cmd_viewfactor)

    p = sub.add_parser("mrt", help="MRT at a point (JSON to stdout)")
    p.add_argument("--scene", required=True)
    p.add_argument("--point", required=True, help="x,y,z in meters")
    p.add_argument("--rays", type=int, default=viewfactor.DEFAULT_N_RAYS)
    p.add_argument("--seed", type=int, default=viewfactor.DEFAULT_SEED)
    p.add_argument("--mode", choices=("native", "subtract"), default="native")
    p.set_defaults(fn=cmd_mrt)

    p = sub.add_parser("globe", help="MRT from a black-globe reading")
    p.add_argument("--tg", required=True, help="globe temperature (K, or suffix C)")
    p.add_argument("--ta", required=True, help="air temperature (K, or suffix C)")
    p.set_defaults(fn=cmd_globe)

    p = sub.add_parser("field", help="MRT field over a grid")
    p.add_argument("--scene", required=True)
    p.add_argument("--nx", type=int, default=field_mod.DEFAULT_GRID_N)
    p.add_argument("--ny", type=int, default=field_mod.DEFAULT_GRID_N)
    p.add_argument("--height", type=float, default=field_mod.DEFAULT_HEIGHT)
    p.add_argument("--rays", type=int, default=viewfactor.DEFAULT_N_RAYS)
    p.add_argument("--seed", type=int, default=viewfactor.DEFAULT_SEED)
    p.add_argument("--csv")
    p.add_argument("--image")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(fn=cmd_field)

    p = sub.add_parser("pipeline", help="fuse -> extract -> segment -> field")
    p.add_argument("--config", help="JSON config file; flags override")
    p.add_argument("--frames")
    p.add_argument("--detections")
    p.add_argument("--scene")
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--rays", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--voxel", type=float, default=None)
    p.add_argument("--nx", type=int, default=None)
    p.add_argument("--ny", type=int, default=None)
    p.add_argument("--height", type=float, default=None)
    p.add_argument("--units", choices=("K", "C"), default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--no-icp", action="store_true")
    p.set_defaults(fn=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except _StageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO if isinstance(exc.cause, OSError) else EXIT_STAGE_FAILURE
    except (SceneFormatError, InvalidArgumentError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except RadiantMapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE_FAILURE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
