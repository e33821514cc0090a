"""Lift 2D detections into persistent 3D thermal features.

Detections (label + mask polygon in depth-image pixel coordinates) are
produced by an external detector and arrive as line-delimited JSON.  This
module back-projects each mask through its frame's depth map, associates
observations across frames by 3D bounds overlap, picks each instance's
label by majority vote, and registers the winning instances as
ThermalFeature polygons on matching scene surfaces.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from shapely.geometry import MultiPolygon, Polygon as ShapelyPolygon
from shapely.geometry.polygon import orient

from . import geometry
from .errors import DegenerateGeometryError, InvalidArgumentError, SceneFormatError
from .fusion import CameraModel, FrameBundle, back_project
from .scene import (
    Scene,
    Surface,
    ThermalFeature,
    ThermalPointCloud,
    feature_temperature,
    surface_temperature,
)

logger = logging.getLogger(__name__)

# Observations need at least this many valid depth pixels to lift.
MIN_MASK_PIXELS = 10
# Minimum 3D bounds IoU for an observation to join an existing track.
IOU_THRESHOLD = 0.3
# A track plane must sit within these bounds of a surface plane to register.
PLANE_DISTANCE_TOL = 0.05
PLANE_ANGLE_TOL = math.radians(10.0)
# Registered feature polygons below this area are rejected as degenerate.
MIN_FEATURE_AREA = 1e-4


@dataclass(frozen=True)
class Detection:
    """One per-frame detector output: label, confidence, mask polygon (pixels)."""

    frame: int
    label: str
    confidence: float
    polygon: np.ndarray

    def __post_init__(self):
        poly = np.asarray(self.polygon, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[1] != 2 or poly.shape[0] < 3:
            raise InvalidArgumentError("detection mask needs at least 3 (u, v) vertices")
        if not np.isfinite(poly).all():
            raise InvalidArgumentError("detection mask contains non-finite vertices")
        if not (0.0 <= self.confidence <= 1.0):
            raise InvalidArgumentError(f"confidence must be in [0, 1], got {self.confidence}")
        poly.setflags(write=False)
        object.__setattr__(self, "polygon", poly)


@dataclass(frozen=True)
class Observation:
    """A detection lifted to world coordinates."""

    frame: int
    label: str
    confidence: float
    points: np.ndarray
    centroid: np.ndarray
    bounds: tuple[np.ndarray, np.ndarray]


@dataclass
class InstanceTrack:
    """A persistent feature instance accumulated across frames."""

    instance_id: int
    label_votes: dict[str, int] = field(default_factory=dict)
    confidence_totals: dict[str, float] = field(default_factory=dict)
    points: np.ndarray = field(default_factory=lambda: np.empty((0, 3)))
    bounds: tuple[np.ndarray, np.ndarray] | None = None

    @property
    def total_votes(self) -> int:
        return sum(self.label_votes.values())

    def add(self, obs: Observation) -> None:
        self.label_votes[obs.label] = self.label_votes.get(obs.label, 0) + 1
        self.confidence_totals[obs.label] = (
            self.confidence_totals.get(obs.label, 0.0) + obs.confidence)
        self.points = np.vstack([self.points, obs.points])
        if self.bounds is None:
            self.bounds = obs.bounds
        else:
            self.bounds = (np.minimum(self.bounds[0], obs.bounds[0]),
                           np.maximum(self.bounds[1], obs.bounds[1]))


def lift_detection(det: Detection, frame: FrameBundle, cams: CameraModel) -> Observation | None:
    """Back-project a detection's mask-interior depth pixels to world points.

    Returns None (a skipped-detection notice, not an error) when fewer than
    MIN_MASK_PIXELS valid depth pixels fall inside the mask.
    """
    h, w = frame.depth.shape
    poly = det.polygon
    if (poly[:, 0].min() < 0 or poly[:, 0].max() > w
            or poly[:, 1].min() < 0 or poly[:, 1].max() > h):
        raise InvalidArgumentError(
            f"detection mask extends outside the {w}x{h} image bounds")

    u0 = max(int(np.floor(poly[:, 0].min())), 0)
    u1 = min(int(np.ceil(poly[:, 0].max())), w - 1)
    v0 = max(int(np.floor(poly[:, 1].min())), 0)
    v1 = min(int(np.ceil(poly[:, 1].max())), h - 1)
    uu, vv = np.meshgrid(np.arange(u0, u1 + 1), np.arange(v0, v1 + 1))
    px = np.column_stack([uu.ravel(), vv.ravel()]).astype(np.float64)
    inside = geometry.point_in_polygon(px, poly)
    ui = uu.ravel()[inside]
    vi = vv.ravel()[inside]
    depth_m = frame.depth[vi, ui].astype(np.float64) * 1e-3
    valid = depth_m > 0.0
    if int(np.count_nonzero(valid)) < MIN_MASK_PIXELS:
        logger.info("skipping detection (frame %d, %r): %d valid depth pixels",
                    det.frame, det.label, int(np.count_nonzero(valid)))
        return None

    patch = np.zeros((h, w))
    patch[vi[valid], ui[valid]] = depth_m[valid]
    cam_pts, _ = back_project(patch, cams.depth)
    world = frame.pose.apply(cam_pts)
    return Observation(frame=det.frame, label=det.label, confidence=det.confidence,
                       points=world, centroid=world.mean(axis=0),
                       bounds=geometry.aabb(world))


def associate(observations) -> list[InstanceTrack]:
    """Greedy association of observations into tracks, in frame order.

    An observation joins the existing track with the highest 3D bounds IoU
    when that IoU reaches IOU_THRESHOLD, otherwise it starts a new track.
    Each joined observation adds one vote for its detection label.
    """
    obs = sorted(observations, key=lambda o: o.frame)
    tracks: list[InstanceTrack] = []
    for o in obs:
        best_iou = 0.0
        best: InstanceTrack | None = None
        for tr in tracks:
            iou = geometry.aabb_iou(o.bounds, tr.bounds)
            if iou > best_iou:
                best_iou = iou
                best = tr
        if best is not None and best_iou >= IOU_THRESHOLD:
            best.add(o)
        else:
            tr = InstanceTrack(instance_id=len(tracks))
            tr.add(o)
            tracks.append(tr)
    return tracks


def vote_label(track: InstanceTrack) -> str:
    """Majority label of a track.

    Ties break by higher cumulative confidence, then by lexicographically
    smallest label, so the outcome is fully deterministic.
    """
    if not track.label_votes:
        raise InvalidArgumentError("track has no votes")
    return min(track.label_votes,
               key=lambda lab: (-track.label_votes[lab],
                                -track.confidence_totals.get(lab, 0.0),
                                lab))


def _match_surface(track: InstanceTrack, scene: Scene) -> Surface | None:
    try:
        normal, offset = geometry.fit_plane(track.points)
    except DegenerateGeometryError:
        return None
    centroid = track.points.mean(axis=0)
    best: Surface | None = None
    best_dist = np.inf
    for s in scene.surfaces:
        angle = math.acos(min(abs(float(normal @ s.normal)), 1.0))
        if angle > PLANE_ANGLE_TOL:
            continue
        dist = abs(float(centroid @ s.normal) - s.plane_offset)
        if dist <= PLANE_DISTANCE_TOL and dist < best_dist:
            best_dist = dist
            best = s
    return best


def _dedup_ring(coords: np.ndarray) -> np.ndarray:
    keep = [coords[0]]
    for c in coords[1:]:
        if np.linalg.norm(c - keep[-1]) > 1e-12:
            keep.append(c)
    if len(keep) > 1 and np.linalg.norm(keep[0] - keep[-1]) <= 1e-12:
        keep.pop()
    return np.array(keep)


def _largest_polygon(geom) -> ShapelyPolygon | None:
    if isinstance(geom, ShapelyPolygon) and not geom.is_empty:
        return geom
    if isinstance(geom, MultiPolygon) and not geom.is_empty:
        return max(geom.geoms, key=lambda g: g.area)
    return None


def register_feature(track: InstanceTrack, scene: Scene, cloud: ThermalPointCloud,
                     occupied: dict | None = None,
                     distance_threshold: float = 0.005,
                     ) -> tuple[str, ThermalFeature] | None:
    """Register one track as a ThermalFeature on its matching surface.

    The track's points are projected onto the parent plane; the feature
    polygon is the minimum-area oriented rectangle of the projections,
    clipped to the parent polygon and shrunk by the area already claimed by
    earlier features (``occupied``, a mapping from surface id to claimed
    2D geometry).  Returns (surface id, feature) or None with a logged
    notice when the track matches no surface or degenerates.
    """
    label = vote_label(track)
    parent = _match_surface(track, scene)
    if parent is None:
        logger.warning("orphan feature %r (track %d): no surface within %.2f m / %.0f deg; "
                       "excluded from MRT", label, track.instance_id,
                       PLANE_DISTANCE_TOL, math.degrees(PLANE_ANGLE_TOL))
        return None

    q2 = parent.to_plane(track.points)
    try:
        rect = geometry.min_area_rect(q2)
    except DegenerateGeometryError:
        logger.warning("degenerate feature %r (track %d): projected points have no area",
                       label, track.instance_id)
        return None

    shape = ShapelyPolygon(rect).intersection(ShapelyPolygon(parent.corners2d))
    claimed = (occupied or {}).get(parent.id)
    if claimed is not None:
        shape = shape.difference(claimed)
    poly = _largest_polygon(shape)
    if poly is None or poly.area < MIN_FEATURE_AREA:
        logger.warning("feature %r (track %d) rejected: clipped polygon is degenerate",
                       label, track.instance_id)
        return None
    ring = _dedup_ring(np.asarray(orient(poly).exterior.coords))
    if len(ring) < 3:
        logger.warning("feature %r (track %d) rejected: clipped polygon is degenerate",
                       label, track.instance_id)
        return None
    corners = parent.origin + ring[:, :1] * parent.e1 + ring[:, 1:] * parent.e2

    feature_id = f"feature_{track.instance_id}"
    probe = ThermalFeature(id=feature_id, label=label, corners=corners, temperature=1.0)
    temp = feature_temperature(cloud, parent, probe, distance_threshold)
    return parent.id, ThermalFeature(id=feature_id, label=label, corners=corners,
                                     temperature=temp)


def register_features(tracks, scene: Scene, cloud: ThermalPointCloud,
                      distance_threshold: float = 0.005) -> tuple[Scene, list[str]]:
    """Register every track and return the augmented scene.

    Tracks register in instance order; when a later feature overlaps an
    earlier one on the same surface, the later polygon is shrunk by the
    polygon difference so the non-overlap invariant holds.  Envelope
    temperatures are recomputed afterwards with the new feature regions
    excluded.
    """
    notices: list[str] = []
    occupied: dict[str, ShapelyPolygon | MultiPolygon] = {}
    new_features: dict[str, list[ThermalFeature]] = {}

    for track in sorted(tracks, key=lambda t: t.instance_id):
        result = register_feature(track, scene, cloud, occupied=occupied,
                                  distance_threshold=distance_threshold)
        if result is None:
            notices.append(f"track {track.instance_id} not registered")
            continue
        surface_id, feature = result
        parent = scene.surface_by_id(surface_id)
        poly2 = ShapelyPolygon(parent.to_plane(feature.corners))
        prev = occupied.get(surface_id)
        occupied[surface_id] = poly2 if prev is None else prev.union(poly2)
        new_features.setdefault(surface_id, []).append(feature)

    surfaces = []
    for s in scene.surfaces:
        added = new_features.get(s.id)
        if not added:
            surfaces.append(s)
            continue
        augmented = Surface(id=s.id, corners=s.corners, temperature=s.temperature,
                            features=s.features + tuple(added))
        envelope_t = surface_temperature(cloud, augmented, distance_threshold)
        surfaces.append(Surface(id=s.id, corners=s.corners, temperature=envelope_t,
                                features=augmented.features))
    return Scene(tuple(surfaces), closed_enclosure=scene.closed_enclosure,
                 metadata=dict(scene.metadata)), notices


# ---------------------------------------------------------------------------
# Detections file (line-delimited JSON)
# ---------------------------------------------------------------------------

def load_detections(path: str | Path) -> list[Detection]:
    dets = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                dets.append(Detection(frame=int(obj["frame"]), label=str(obj["label"]),
                                      confidence=float(obj["confidence"]),
                                      polygon=np.asarray(obj["polygon"], dtype=np.float64)))
            except (KeyError, TypeError, ValueError, InvalidArgumentError) as exc:
                raise SceneFormatError(f"bad detection on line {lineno}: {exc}") from exc
    return dets


def save_detections(detections, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in detections:
            fh.write(json.dumps({"frame": d.frame, "label": d.label,
                                 "confidence": d.confidence,
                                 "polygon": d.polygon.tolist()}))
            fh.write("\n")
