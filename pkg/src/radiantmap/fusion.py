"""Thermal point-cloud fusion.

Builds a world-frame ThermalPointCloud from synchronized depth + thermal
frames with known camera poses: each valid depth pixel is back-projected,
looked up in the thermal image through the rig extrinsics (nearest pixel;
temperature discontinuities at feature edges must not be smeared), posed
into world coordinates, optionally refined by ICP against the accumulated
map, and merged with voxel-grid deduplication.

File formats owned here: ``calib.json``, per-frame
``NNNNNN.depth.png`` (16-bit millimeters, 0 = invalid) /
``NNNNNN.thermal.png`` (16-bit centikelvins) / ``NNNNNN.pose.txt``
(4x4 row-major world-from-camera), and the binary cloud file (magic
``RTPC``, version byte, little-endian float64 records).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial import cKDTree

from .errors import (
    DegenerateGeometryError,
    EmptyFrameError,
    EmptyMapError,
    FrameProcessingError,
    InsufficientOverlapError,
    InvalidArgumentError,
    SceneFormatError,
)
from .geometry import RigidTransform, kabsch
from .scene import ThermalPointCloud

CLOUD_MAGIC = b"RTPC"
CLOUD_VERSION = 1


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidArgumentError("image dimensions must be positive")


@dataclass(frozen=True)
class CameraModel:
    """Depth and thermal intrinsics plus the thermal-from-depth extrinsic."""

    depth: CameraIntrinsics
    thermal: CameraIntrinsics
    thermal_from_depth: RigidTransform


def _as_image(arr, name: str) -> np.ndarray:
    a = np.asarray(arr)
    if a.ndim != 2:
        raise InvalidArgumentError(f"{name} must be a 2D array, got shape {a.shape}")
    if np.issubdtype(a.dtype, np.floating):
        raise InvalidArgumentError(f"{name} must be an integer image")
    if a.min() < 0 or a.max() > np.iinfo(np.uint16).max:
        raise InvalidArgumentError(f"{name} values do not fit 16-bit range")
    a = a.astype(np.uint16)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FrameBundle:
    """One synchronized frame: depth map, thermal image, and camera pose."""

    timestamp: float
    depth: np.ndarray
    thermal: np.ndarray
    pose: RigidTransform

    def __post_init__(self):
        object.__setattr__(self, "depth", _as_image(self.depth, "depth"))
        object.__setattr__(self, "thermal", _as_image(self.thermal, "thermal"))


def back_project(depth_m: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Lift valid (> 0) depth pixels into camera-frame 3D points.

    Returns (points (N,3), pixel coordinates (N,2) as (u, v)).
    """
    v, u = np.nonzero(depth_m > 0.0)
    z = depth_m[v, u]
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return np.column_stack([x, y, z]), np.column_stack([u, v])


def project(points: np.ndarray, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project camera-frame points through the pinhole model.

    Returns (u, v, in_front) with u, v valid only where in_front.
    """
    pts = np.asarray(points, dtype=np.float64)
    z = pts[:, 2]
    in_front = z > 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pts[:, 0] / z + intr.cx
        v = intr.fy * pts[:, 1] / z + intr.cy
    return u, v, in_front


def register_thermal_to_depth(frame: FrameBundle, cams: CameraModel) -> ThermalPointCloud:
    """Fuse one frame into a camera-frame thermal point cloud.

    Depth values are millimeters with 0 marking invalid pixels; thermal
    values are centikelvins.  Points whose projection falls outside the
    thermal image are dropped.
    """
    if frame.depth.shape != (cams.depth.height, cams.depth.width):
        raise InvalidArgumentError(
            f"depth image shape {frame.depth.shape} does not match intrinsics "
            f"({cams.depth.height}, {cams.depth.width})")
    if frame.thermal.shape != (cams.thermal.height, cams.thermal.width):
        raise InvalidArgumentError(
            f"thermal image shape {frame.thermal.shape} does not match intrinsics "
            f"({cams.thermal.height}, {cams.thermal.width})")

    depth_m = frame.depth.astype(np.float64) * 1e-3
    points, _ = back_project(depth_m, cams.depth)
    if len(points) == 0:
        raise EmptyFrameError("frame has no valid depth pixels")

    in_thermal = cams.thermal_from_depth.apply(points)
    u, v, in_front = project(in_thermal, cams.thermal)
    ui = np.rint(u).astype(np.int64)
    vi = np.rint(v).astype(np.int64)
    keep = (in_front & (ui >= 0) & (ui < cams.thermal.width)
            & (vi >= 0) & (vi < cams.thermal.height))
    temps = frame.thermal[vi[keep], ui[keep]].astype(np.float64) / 100.0
    return ThermalPointCloud(points[keep], temps)


# ---------------------------------------------------------------------------
# ICP alignment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ICPParams:
    max_iterations: int = 50
    convergence_eps: float = 1e-6
    max_correspondence_dist: float = 0.1

    def __post_init__(self):
        if self.max_iterations < 1 or self.convergence_eps < 0 or self.max_correspondence_dist <= 0:
            raise InvalidArgumentError("invalid ICP parameters")


def _cloud_points(cloud) -> np.ndarray:
    if isinstance(cloud, ThermalPointCloud):
        return cloud.points
    return np.asarray(cloud, dtype=np.float64).reshape(-1, 3)


def _assert_noncollinear(pts: np.ndarray, name: str) -> None:
    if len(pts) < 3:
        raise DegenerateGeometryError(f"{name} cloud has fewer than 3 points")
    _, s, _ = np.linalg.svd(pts - pts.mean(axis=0), full_matrices=False)
    if s[1] <= max(s[0], 1e-30) * 1e-9:
        raise DegenerateGeometryError(f"{name} cloud is collinear")


def icp_align(source, target, params: ICPParams | None = None) -> tuple[RigidTransform, float]:
    """Align ``source`` onto ``target`` by point-to-point ICP.

    Alternates nearest-neighbor correspondence through a K-D tree with the
    closed-form SVD rigid-transform solve, rejecting pairs beyond the
    correspondence cutoff.  Stops when the RMS residual improves by less
    than ``convergence_eps`` or at the iteration cap.

    Returns (transform mapping source into the target frame, final RMS
    residual in meters).
    """
    params = params or ICPParams()
    src = _cloud_points(source)
    dst = _cloud_points(target)
    _assert_noncollinear(src, "source")
    _assert_noncollinear(dst, "target")

    tree = cKDTree(dst)
    transform = RigidTransform.identity()
    prev_rms = np.inf
    rms = np.inf
    for _ in range(params.max_iterations):
        moved = transform.apply(src)
        dist, idx = tree.query(moved)
        keep = dist <= params.max_correspondence_dist
        n_keep = int(np.count_nonzero(keep))
        if n_keep < 3:
            raise InsufficientOverlapError(
                f"only {n_keep} correspondences within {params.max_correspondence_dist} m")
        delta = kabsch(moved[keep], dst[idx[keep]])
        transform = delta.compose(transform)
        residual = transform.apply(src[keep]) - dst[idx[keep]]
        rms = float(np.sqrt(np.mean(np.sum(residual ** 2, axis=1))))
        if prev_rms - rms < params.convergence_eps:
            break
        prev_rms = rms
    return transform, rms


# ---------------------------------------------------------------------------
# Map building
# ---------------------------------------------------------------------------

class _VoxelAccumulator:
    """Running voxel-grid average of positions and temperatures."""

    def __init__(self, voxel: float):
        if voxel <= 0:
            raise InvalidArgumentError("voxel size must be positive")
        self.voxel = voxel
        self.index: dict[tuple[int, int, int], int] = {}
        self.keys = np.empty((0, 3), dtype=np.int64)
        self.sums = np.empty((0, 4))
        self.counts = np.empty(0)

    def add(self, points: np.ndarray, temps: np.ndarray) -> None:
        cells = np.floor(points / self.voxel).astype(np.int64)
        uniq, inv = np.unique(cells, axis=0, return_inverse=True)
        local = np.zeros((len(uniq), 4))
        np.add.at(local, inv, np.column_stack([points, temps]))
        local_counts = np.bincount(inv, minlength=len(uniq))

        rows = np.empty(len(uniq), dtype=np.int64)
        fresh = []
        for i, key in enumerate(map(tuple, uniq.tolist())):
            row = self.index.get(key)
            if row is None:
                row = len(self.index)
                self.index[key] = row
                fresh.append(i)
            rows[i] = row
        if fresh:
            self.keys = np.vstack([self.keys, uniq[fresh]])
            self.sums = np.vstack([self.sums, np.zeros((len(fresh), 4))])
            self.counts = np.concatenate([self.counts, np.zeros(len(fresh))])
        self.sums[rows] += local
        self.counts[rows] += local_counts

    def snapshot_points(self) -> np.ndarray:
        """Current voxel centroids (insertion order; used as the ICP target)."""
        return self.sums[:, :3] / self.counts[:, None]

    def cloud(self) -> ThermalPointCloud:
        if not len(self.counts):
            raise EmptyMapError("no points were accumulated")
        order = np.lexsort((self.keys[:, 2], self.keys[:, 1], self.keys[:, 0]))
        sums = self.sums[order]
        counts = self.counts[order]
        return ThermalPointCloud(sums[:, :3] / counts[:, None], sums[:, 3] / counts)


def build_thermal_map(frames, cams: CameraModel, voxel: float = 0.01,
                      use_icp: bool = True,
                      icp_params: ICPParams | None = None) -> ThermalPointCloud:
    """Fuse a frame sequence into a world-frame thermal map.

    Each frame is registered to a camera-frame cloud, posed into world
    coordinates, optionally refined by aligning it to the accumulated map
    (pose composed with the ICP correction), and merged into a voxel grid
    storing per-voxel centroid position and mean temperature.
    """
    frames = list(frames)
    if not frames:
        raise EmptyMapError("frame sequence is empty")
    ts = [f.timestamp for f in frames]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise InvalidArgumentError("frame timestamps must be strictly increasing")

    acc = _VoxelAccumulator(voxel)
    map_points: np.ndarray | None = None
    for i, frame in enumerate(frames):
        try:
            local = register_thermal_to_depth(frame, cams)
            world = frame.pose.apply(local.points)
            if use_icp and map_points is not None and len(world) >= 3:
                correction, _ = icp_align(world, map_points, icp_params)
                world = correction.apply(world)
        except (EmptyFrameError, InsufficientOverlapError, DegenerateGeometryError,
                InvalidArgumentError) as exc:
            raise FrameProcessingError(i, exc) from exc
        if len(world):
            acc.add(world, local.temperatures)
            map_points = acc.snapshot_points()
    return acc.cloud()


# ---------------------------------------------------------------------------
# Frame dataset I/O
# ---------------------------------------------------------------------------

def save_calibration(cams: CameraModel, path: str | Path) -> None:
    def intr(c: CameraIntrinsics) -> dict:
        return {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy,
                "width": c.width, "height": c.height}

    data = {
        "depth": intr(cams.depth),
        "thermal": intr(cams.thermal),
        "thermal_from_depth": {
            "rotation": cams.thermal_from_depth.rotation.tolist(),
            "translation": cams.thermal_from_depth.translation.tolist(),
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2)
        fh.write("\n")


def load_calibration(path: str | Path) -> CameraModel:
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    try:
        def intr(d: dict) -> CameraIntrinsics:
            return CameraIntrinsics(fx=float(d["fx"]), fy=float(d["fy"]),
                                    cx=float(d["cx"]), cy=float(d["cy"]),
                                    width=int(d["width"]), height=int(d["height"]))

        ext = data["thermal_from_depth"]
        return CameraModel(depth=intr(data["depth"]), thermal=intr(data["thermal"]),
                           thermal_from_depth=RigidTransform(
                               np.asarray(ext["rotation"], dtype=np.float64),
                               np.asarray(ext["translation"], dtype=np.float64)))
    except (KeyError, TypeError, ValueError) as exc:
        raise SceneFormatError(f"malformed calibration file: {exc}") from exc


def _read_image16(path: Path, name: str) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim != 2:
        raise SceneFormatError(f"{name} image {path.name} is not single-channel")
    return arr.astype(np.uint16)


def save_frame(directory: str | Path, index: int, depth_mm: np.ndarray,
               thermal_ck: np.ndarray, pose: RigidTransform) -> None:
    """Write one frame in the dataset layout (16-bit PNGs + pose text file)."""
    directory = Path(directory)
    stem = f"{index:06d}"
    Image.fromarray(np.asarray(depth_mm, dtype=np.uint16)).save(directory / f"{stem}.depth.png")
    Image.fromarray(np.asarray(thermal_ck, dtype=np.uint16)).save(directory / f"{stem}.thermal.png")
    np.savetxt(directory / f"{stem}.pose.txt", pose.as_matrix(), fmt="%.17g")


def load_frames(directory: str | Path) -> list[FrameBundle]:
    """Load all frames of a dataset directory, ordered by frame index.

    Timestamps are synthesized from the frame index (one second apart),
    which keeps them strictly increasing.
    """
    directory = Path(directory)
    depth_files = sorted(directory.glob("*.depth.png"))
    if not depth_files:
        raise SceneFormatError(f"no frames (*.depth.png) found in {directory}")
    frames = []
    for df in depth_files:
        stem = df.name.removesuffix(".depth.png")
        depth = _read_image16(df, "depth")
        thermal = _read_image16(directory / f"{stem}.thermal.png", "thermal")
        pose_mat = np.loadtxt(directory / f"{stem}.pose.txt")
        try:
            pose = RigidTransform.from_matrix(pose_mat)
        except InvalidArgumentError as exc:
            raise SceneFormatError(f"bad pose in {stem}.pose.txt: {exc}") from exc
        frames.append(FrameBundle(timestamp=float(int(stem)), depth=depth,
                                  thermal=thermal, pose=pose))
    return frames


# ---------------------------------------------------------------------------
# Cloud file (binary, little-endian)
# ---------------------------------------------------------------------------

def save_cloud(cloud: ThermalPointCloud, path: str | Path) -> None:
    """Write a cloud file: RTPC magic, version byte, flags byte, point records."""
    has_regions = cloud.regions is not None
    names: list[str] = []
    idx = np.full(len(cloud), -1, dtype=np.int32)
    if has_regions:
        table: dict[str, int] = {}
        for i, r in enumerate(cloud.regions):
            if r is None:
                continue
            if r not in table:
                table[r] = len(names)
                names.append(str(r))
            idx[i] = table[r]
    with open(path, "wb") as fh:
        fh.write(CLOUD_MAGIC)
        fh.write(struct.pack("<BB", CLOUD_VERSION, 1 if has_regions else 0))
        fh.write(struct.pack("<Q", len(cloud)))
        if has_regions:
            fh.write(struct.pack("<I", len(names)))
            for name in names:
                raw = name.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
        fh.write(np.ascontiguousarray(cloud.points, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(cloud.temperatures, dtype="<f8").tobytes())
        if has_regions:
            fh.write(np.ascontiguousarray(idx, dtype="<i4").tobytes())


def load_cloud(path: str | Path) -> ThermalPointCloud:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CLOUD_MAGIC:
        raise SceneFormatError("not a cloud file (bad magic)")
    version, flags = struct.unpack_from("<BB", raw, 4)
    if version != CLOUD_VERSION:
        raise SceneFormatError(f"unsupported cloud file version {version}")
    (count,) = struct.unpack_from("<Q", raw, 6)
    pos = 14
    names: list[str] = []
    if flags & 1:
        (n_names,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        for _ in range(n_names):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            names.append(raw[pos:pos + ln].decode("utf-8"))
            pos += ln
    points = np.frombuffer(raw, dtype="<f8", count=count * 3, offset=pos).reshape(count, 3)
    pos += count * 24
    temps = np.frombuffer(raw, dtype="<f8", count=count, offset=pos)
    pos += count * 8
    regions = None
    if flags & 1:
        idx = np.frombuffer(raw, dtype="<i4", count=count, offset=pos)
        regions = np.array([names[i] if i >= 0 else None for i in idx], dtype=object)
    return ThermalPointCloud(points.copy(), temps.copy(), regions)
