"""Synthetic box-room fixtures: ground-truth scenes, sampled clouds, and an
independent frame renderer.

The renderer casts per-pixel rays against the analytic box description
(axis-aligned planes, not the library's polygon intersector), so rendered
datasets serve as an independent oracle for the fusion and pipeline tests.
Rendering uses the true camera pose; the dataset stores the (optionally
noisy) odometry pose, mirroring how drift enters a real capture.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon, box as shapely_box

from radiantmap import (
    CameraIntrinsics,
    CameraModel,
    Detection,
    RigidTransform,
    Scene,
    Surface,
    ThermalFeature,
    ThermalPointCloud,
)
from radiantmap.fusion import save_calibration, save_frame
from radiantmap.geometry import rotation_about_axis, unit

FACES = ("floor", "ceiling", "wall_xmin", "wall_xmax", "wall_ymin", "wall_ymax")


@dataclass(frozen=True)
class BoxFeature:
    """Axis-aligned rectangular feature on one box face."""

    face: str
    lo: tuple[float, float, float]
    hi: tuple[float, float, float]
    temperature: float
    label: str = "recessed lighting"
    id: str = "feature_panel"

    def corners(self, room: "BoxRoom") -> np.ndarray:
        lo = np.asarray(self.lo, dtype=np.float64)
        hi = np.asarray(self.hi, dtype=np.float64)
        axis = _FACE_AXIS[self.face][0]
        a, b = [i for i in range(3) if i != axis]
        c = np.tile(lo, (4, 1))
        c[1, a], c[2, a] = hi[a], hi[a]
        c[2, b], c[3, b] = hi[b], hi[b]
        return c


_FACE_AXIS = {
    "floor": (2, 0.0), "ceiling": (2, None),
    "wall_xmin": (0, 0.0), "wall_xmax": (0, None),
    "wall_ymin": (1, 0.0), "wall_ymax": (1, None),
}


@dataclass(frozen=True)
class BoxRoom:
    """Analytic ground truth for an axis-aligned box room."""

    lx: float = 4.0
    ly: float = 3.0
    lz: float = 2.5
    temps: dict = field(default_factory=lambda: {f: 295.0 for f in FACES})
    features: tuple[BoxFeature, ...] = ()

    @property
    def size(self) -> np.ndarray:
        return np.array([self.lx, self.ly, self.lz])

    @property
    def center(self) -> np.ndarray:
        return self.size / 2.0

    def face_plane(self, face: str) -> tuple[int, float]:
        axis, value = _FACE_AXIS[face]
        if value is None:
            value = float(self.size[axis])
        return axis, value

    def region_at(self, face: str, point: np.ndarray) -> tuple[str, float]:
        """(region id, temperature) at a hit point on ``face``."""
        for feat in self.features:
            if feat.face != face:
                continue
            lo = np.asarray(feat.lo)
            hi = np.asarray(feat.hi)
            if np.all(point >= lo - 1e-12) and np.all(point <= hi + 1e-12):
                return feat.id, feat.temperature
        return face, self.temps[face]


def scene_from_room(room: BoxRoom, closed: bool = True) -> Scene:
    """Ground-truth Scene with inward normals and the room's features attached."""
    lx, ly, lz = room.lx, room.ly, room.lz
    quads = {
        "floor": [[0, 0, 0], [lx, 0, 0], [lx, ly, 0], [0, ly, 0]],
        "ceiling": [[0, 0, lz], [0, ly, lz], [lx, ly, lz], [lx, 0, lz]],
        "wall_xmin": [[0, 0, 0], [0, ly, 0], [0, ly, lz], [0, 0, lz]],
        "wall_xmax": [[lx, 0, 0], [lx, 0, lz], [lx, ly, lz], [lx, ly, 0]],
        "wall_ymin": [[0, 0, 0], [0, 0, lz], [lx, 0, lz], [lx, 0, 0]],
        "wall_ymax": [[0, ly, 0], [lx, ly, 0], [lx, ly, lz], [0, ly, lz]],
    }
    by_face: dict[str, list[ThermalFeature]] = {}
    for feat in room.features:
        by_face.setdefault(feat.face, []).append(
            ThermalFeature(id=feat.id, label=feat.label, corners=feat.corners(room),
                           temperature=feat.temperature))
    surfaces = tuple(
        Surface(id=face, corners=np.asarray(quads[face], dtype=np.float64),
                temperature=room.temps[face], features=tuple(by_face.get(face, ())))
        for face in FACES)
    return Scene(surfaces, closed_enclosure=closed)


def sample_face(room: BoxRoom, face: str, spacing: float,
                noise: float = 0.0, rng: np.random.Generator | None = None):
    """Grid-sample one face; returns (points, temperatures, region ids)."""
    axis, value = room.face_plane(face)
    a, b = [i for i in range(3) if i != axis]
    ua = np.arange(spacing / 2, room.size[a], spacing)
    ub = np.arange(spacing / 2, room.size[b], spacing)
    ga, gb = np.meshgrid(ua, ub)
    pts = np.zeros((ga.size, 3))
    pts[:, a] = ga.ravel()
    pts[:, b] = gb.ravel()
    pts[:, axis] = value
    if noise > 0.0 and rng is not None:
        pts[:, axis] += rng.uniform(-noise, noise, size=len(pts))
    temps = np.empty(len(pts))
    regions = np.empty(len(pts), dtype=object)
    for i, p in enumerate(pts):
        regions[i], temps[i] = room.region_at(face, p)
    return pts, temps, regions


def box_cloud(room: BoxRoom, spacing: float = 0.05, noise: float = 0.0,
              seed: int = 0, with_regions: bool = False) -> ThermalPointCloud:
    """Point cloud sampled from every face of the room."""
    rng = np.random.default_rng(seed)
    parts = [sample_face(room, f, spacing, noise, rng) for f in FACES]
    pts = np.vstack([p for p, _, _ in parts])
    temps = np.concatenate([t for _, t, _ in parts])
    regions = np.concatenate([r for _, _, r in parts]) if with_regions else None
    return ThermalPointCloud(pts, temps, regions)


# ---------------------------------------------------------------------------
# Camera rig and trajectory
# ---------------------------------------------------------------------------

def default_cameras(width: int = 160, height: int = 120,
                    baseline: float = 0.0) -> CameraModel:
    intr = CameraIntrinsics(fx=float(width * 0.75), fy=float(width * 0.75),
                            cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                            width=width, height=height)
    ext = RigidTransform(np.eye(3), np.array([baseline, 0.0, 0.0]))
    return CameraModel(depth=intr, thermal=intr, thermal_from_depth=ext)


def look_rotation(forward: np.ndarray) -> np.ndarray:
    """World-from-camera rotation with +z forward and image-down along -world z."""
    z = unit(np.asarray(forward, dtype=np.float64))
    x = unit(np.cross(z, np.array([0.0, 0.0, 1.0])))
    y = np.cross(z, x)
    return np.column_stack([x, y, z])


def scan_trajectory(room: BoxRoom, n_frames: int = 20,
                    drift_radius: float = 0.25) -> list[RigidTransform]:
    """Rotating-scan trajectory covering all six faces.

    Three view rings (ceiling at +40 deg with one near-zenith frame, walls
    at 0 deg, floor at -40 deg with one near-nadir frame), ordered so every
    consecutive pair of view cones overlaps; the position drifts slowly
    around the room center.
    """
    if n_frames < 12:
        raise ValueError("scan trajectory needs at least 12 frames")
    n_up = max(5, round(n_frames * 6 / 20))
    n_floor = max(5, round(n_frames * 6 / 20))
    n_mid = n_frames - n_up - n_floor

    angles: list[tuple[float, float]] = []
    up_yaws = [360.0 * i / (n_up - 1) for i in range(n_up - 1)]
    for i, yaw in enumerate(up_yaws):
        angles.append((yaw, 40.0))
        if i == 1:
            angles.append((yaw, 80.0))  # near-zenith view
    mid_start = up_yaws[-1]
    for i in range(n_mid):
        angles.append(((mid_start + 360.0 * i / n_mid) % 360.0, 0.0))
    floor_start = angles[-1][0]
    floor_yaws = [(floor_start - 360.0 * i / (n_floor - 1)) % 360.0
                  for i in range(n_floor - 1)]
    for i, yaw in enumerate(floor_yaws):
        angles.append((yaw, -40.0))
        if i == 1:
            angles.append((yaw, -80.0))  # near-nadir view

    poses = []
    c = room.center
    for k, (yaw_deg, pitch_deg) in enumerate(angles[:n_frames]):
        yaw = np.radians(yaw_deg)
        pitch = np.radians(pitch_deg)
        pos = c + drift_radius * np.array([np.cos(2 * np.pi * k / n_frames),
                                           np.sin(2 * np.pi * k / n_frames), 0.0])
        fwd = np.array([np.cos(yaw) * np.cos(pitch),
                        np.sin(yaw) * np.cos(pitch),
                        np.sin(pitch)])
        poses.append(RigidTransform(look_rotation(fwd), pos))
    return poses


def perturb_poses(poses, max_angle_deg: float = 0.5, seed: int = 0,
                  keep_first: bool = True) -> list[RigidTransform]:
    """Rotate each pose by up to ``max_angle_deg`` about a random axis."""
    rng = np.random.default_rng(seed)
    noisy = []
    for i, pose in enumerate(poses):
        if keep_first and i == 0:
            noisy.append(pose)
            continue
        axis = rng.normal(size=3)
        angle = np.radians(rng.uniform(-max_angle_deg, max_angle_deg))
        noisy.append(RigidTransform(rotation_about_axis(axis, angle) @ pose.rotation,
                                    pose.translation))
    return noisy


# ---------------------------------------------------------------------------
# Renderer (independent axis-aligned ray caster)
# ---------------------------------------------------------------------------

def render_frame(room: BoxRoom, intr: CameraIntrinsics,
                 pose: RigidTransform) -> tuple[np.ndarray, np.ndarray]:
    """Render (depth in mm, thermal in centikelvin) from the true pose.

    Pixel rays use the unnormalized direction ((u-cx)/fx, (v-cy)/fy, 1), so
    the ray parameter at the hit equals the camera-frame z depth directly.
    """
    w, h = intr.width, intr.height
    uu, vv = np.meshgrid(np.arange(w), np.arange(h))
    d_cam = np.stack([(uu - intr.cx) / intr.fx,
                      (vv - intr.cy) / intr.fy,
                      np.ones_like(uu, dtype=np.float64)], axis=-1).reshape(-1, 3)
    d_world = d_cam @ pose.rotation.T
    origin = pose.translation

    best_s = np.full(len(d_world), np.inf)
    best_face = np.full(len(d_world), -1)
    for fi, face in enumerate(FACES):
        axis, value = room.face_plane(face)
        denom = d_world[:, axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (value - origin[axis]) / denom
        ok = (s > 1e-9) & (s < best_s)
        if not ok.any():
            continue
        hit = origin + s[ok, None] * d_world[ok]
        inside = np.ones(int(ok.sum()), dtype=bool)
        for other in range(3):
            if other == axis:
                continue
            inside &= (hit[:, other] >= -1e-9) & (hit[:, other] <= room.size[other] + 1e-9)
        sel = np.nonzero(ok)[0][inside]
        best_s[sel] = s[ok][inside]
        best_face[sel] = fi

    depth = np.zeros(len(d_world))
    temps = np.zeros(len(d_world))
    for fi, face in enumerate(FACES):
        sel = np.nonzero(best_face == fi)[0]
        if sel.size == 0:
            continue
        hit = origin + best_s[sel, None] * d_world[sel]
        t = np.full(sel.size, room.temps[face])
        for feat in room.features:
            if feat.face != face:
                continue
            lo = np.asarray(feat.lo) - 1e-12
            hi = np.asarray(feat.hi) + 1e-12
            m = np.all(hit >= lo, axis=1) & np.all(hit <= hi, axis=1)
            t[m] = feat.temperature
        temps[sel] = t
        depth[sel] = best_s[sel]

    depth_mm = np.rint(depth * 1000.0).astype(np.uint16).reshape(h, w)
    thermal_ck = np.rint(temps * 100.0).astype(np.uint16).reshape(h, w)
    return depth_mm, thermal_ck


def write_dataset(directory, room: BoxRoom, cams: CameraModel,
                  true_poses, stored_poses=None) -> None:
    """Render frames from true poses and store them with the odometry poses."""
    stored = stored_poses if stored_poses is not None else true_poses
    save_calibration(cams, directory / "calib.json")
    for i, (tp, sp) in enumerate(zip(true_poses, stored)):
        depth, thermal = render_frame(room, cams.depth, tp)
        save_frame(directory, i, depth, thermal, sp)


def feature_detections(room: BoxRoom, feat: BoxFeature, cams: CameraModel,
                       true_poses, label: str | None = None,
                       confidence: float = 0.9, min_area_px: float = 60.0) -> list[Detection]:
    """Project the true feature rectangle into each frame as a detection mask."""
    corners = feat.corners(room)
    intr = cams.depth
    frame_box = shapely_box(0.0, 0.0, intr.width - 1.0, intr.height - 1.0)
    detections = []
    for idx, pose in enumerate(true_poses):
        cam_pts = pose.inverse().apply(corners)
        if np.any(cam_pts[:, 2] <= 0.05):
            continue
        u = intr.fx * cam_pts[:, 0] / cam_pts[:, 2] + intr.cx
        v = intr.fy * cam_pts[:, 1] / cam_pts[:, 2] + intr.cy
        poly = ShapelyPolygon(np.column_stack([u, v])).intersection(frame_box)
        if poly.is_empty or poly.area < min_area_px:
            continue
        ring = np.asarray(poly.exterior.coords)[:-1]
        detections.append(Detection(frame=idx, label=label or feat.label,
                                    confidence=confidence, polygon=ring))
    return detections
