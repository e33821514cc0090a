"""Geometric and thermal world model.

A Scene is a set of planar Surfaces (building envelopes) in world
coordinates, each optionally carrying coplanar ThermalFeatures (windows,
lights, paintings) whose temperature differs from the envelope around them.
Temperatures are kelvins everywhere; files store kelvins too.

Surfaces can be declared directly or extracted from a fused
ThermalPointCloud by sequential RANSAC plane fitting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np
from shapely.geometry import Polygon as ShapelyPolygon

from . import geometry
from .errors import (
    DegenerateGeometryError,
    InvalidArgumentError,
    MissingCoverageError,
    SceneFormatError,
)

# Corners may deviate from their common plane by at most this much.
PLANARITY_TOL = 5e-3
# Feature corners must lie inside the parent polygon within this tolerance.
FEATURE_CONTAINMENT_TOL = 5e-3
# Two features on one surface may overlap by at most this area (m^2).
FEATURE_OVERLAP_MAX_AREA = 1e-6
# Points this close to a polygon edge count as inside (boundary-inclusive).
BOUNDARY_TOL = 1e-9


def _as_points(value, name: str, min_rows: int) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3 or arr.shape[0] < min_rows:
        raise InvalidArgumentError(f"{name} must be an (N>={min_rows}, 3) array, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise InvalidArgumentError(f"{name} contains non-finite values")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ThermalFeature:
    """Coplanar sub-region of a surface with its own temperature."""

    id: str
    label: str
    corners: np.ndarray
    temperature: float

    def __post_init__(self):
        object.__setattr__(self, "corners", _as_points(self.corners, "feature corners", 3))
        if not (np.isfinite(self.temperature) and self.temperature > 0.0):
            raise InvalidArgumentError(f"feature {self.id!r}: temperature must be > 0 K")

    @cached_property
    def normal(self) -> np.ndarray:
        return geometry.newell_normal(self.corners)


@dataclass(frozen=True)
class Surface:
    """Planar building envelope polygon with optional thermal features.

    Corners are ordered counter-clockwise around the outward normal, which
    is therefore defined by the ordering itself (Newell normal).
    """

    id: str
    corners: np.ndarray
    temperature: float
    features: tuple[ThermalFeature, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "corners", _as_points(self.corners, "surface corners", 3))
        object.__setattr__(self, "features", tuple(self.features))
        if not (np.isfinite(self.temperature) and self.temperature > 0.0):
            raise InvalidArgumentError(f"surface {self.id!r}: temperature must be > 0 K")

        n = self.normal  # raises DegenerateGeometryError on zero area
        dist = np.abs((self.corners - self.corners[0]) @ n)
        if dist.max() > PLANARITY_TOL:
            raise InvalidArgumentError(
                f"surface {self.id!r}: corners deviate {dist.max():.4f} m from their plane "
                f"(tolerance {PLANARITY_TOL} m)")
        if not geometry.is_simple_polygon(self.corners2d):
            raise InvalidArgumentError(f"surface {self.id!r}: polygon is self-intersecting")

        seen = set()
        for f in self.features:
            if f.id in seen:
                raise InvalidArgumentError(f"surface {self.id!r}: duplicate feature id {f.id!r}")
            seen.add(f.id)
            h = np.abs((f.corners - self.corners[0]) @ n)
            if h.max() > PLANARITY_TOL:
                raise InvalidArgumentError(
                    f"feature {f.id!r} is {h.max():.4f} m off the plane of surface {self.id!r}")
            f2 = geometry.to_plane_coords(f.corners, self.origin, self.e1, self.e2)
            inside = geometry.point_in_polygon(f2, self.corners2d, tol=FEATURE_CONTAINMENT_TOL)
            if not inside.all():
                raise InvalidArgumentError(
                    f"feature {f.id!r} has corners outside surface {self.id!r}")
            if not geometry.is_simple_polygon(f2):
                raise InvalidArgumentError(f"feature {f.id!r}: polygon is self-intersecting")
        polys = [ShapelyPolygon(f2) for f2 in self.feature_polygons2d]
        for i in range(len(polys)):
            for j in range(i + 1, len(polys)):
                overlap = polys[i].intersection(polys[j]).area
                if overlap > FEATURE_OVERLAP_MAX_AREA:
                    raise InvalidArgumentError(
                        f"features {self.features[i].id!r} and {self.features[j].id!r} overlap "
                        f"by {overlap:.2e} m^2 on surface {self.id!r}")

    @cached_property
    def normal(self) -> np.ndarray:
        return geometry.newell_normal(self.corners)

    @property
    def origin(self) -> np.ndarray:
        return self.corners[0]

    @cached_property
    def plane_offset(self) -> float:
        return float(self.normal @ self.corners.mean(axis=0))

    @cached_property
    def _basis(self) -> tuple[np.ndarray, np.ndarray]:
        return geometry.plane_basis(self.normal)

    @property
    def e1(self) -> np.ndarray:
        return self._basis[0]

    @property
    def e2(self) -> np.ndarray:
        return self._basis[1]

    @cached_property
    def corners2d(self) -> np.ndarray:
        return geometry.to_plane_coords(self.corners, self.origin, self.e1, self.e2)

    @cached_property
    def feature_polygons2d(self) -> tuple[np.ndarray, ...]:
        return tuple(geometry.to_plane_coords(f.corners, self.origin, self.e1, self.e2)
                     for f in self.features)

    @cached_property
    def area(self) -> float:
        return abs(geometry.polygon_area2d(self.corners2d))

    def to_plane(self, points: np.ndarray) -> np.ndarray:
        """Project 3D points into this surface's 2D plane coordinates."""
        return geometry.to_plane_coords(points, self.origin, self.e1, self.e2)


@dataclass(frozen=True)
class Scene:
    """Immutable collection of surfaces; safe to share across threads."""

    surfaces: tuple[Surface, ...]
    closed_enclosure: bool = False
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "surfaces", tuple(self.surfaces))
        if not self.surfaces:
            raise InvalidArgumentError("scene needs at least one surface")
        seen: set[str] = set()
        for rid in self.region_ids():
            if rid in seen:
                raise InvalidArgumentError(f"duplicate region id {rid!r} in scene")
            seen.add(rid)

    def region_ids(self) -> list[str]:
        ids = []
        for s in self.surfaces:
            ids.append(s.id)
            ids.extend(f.id for f in s.features)
        return ids

    def region_temperatures(self) -> dict[str, float]:
        temps = {}
        for s in self.surfaces:
            temps[s.id] = s.temperature
            for f in s.features:
                temps[f.id] = f.temperature
        return temps

    @cached_property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        allc = np.vstack([s.corners for s in self.surfaces])
        return geometry.aabb(allc)

    def without_features(self) -> "Scene":
        """Copy of this scene with every surface stripped of its features."""
        return Scene(tuple(replace(s, features=()) for s in self.surfaces),
                     closed_enclosure=self.closed_enclosure, metadata=dict(self.metadata))

    def surface_by_id(self, surface_id: str) -> Surface:
        for s in self.surfaces:
            if s.id == surface_id:
                return s
        raise KeyError(surface_id)


@dataclass(frozen=True)
class ThermalPointCloud:
    """3D points with per-point temperature (kelvins) and optional region tags."""

    points: np.ndarray
    temperatures: np.ndarray
    regions: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        temps = np.asarray(self.temperatures, dtype=np.float64).reshape(-1)
        if len(pts) != len(temps):
            raise InvalidArgumentError(
                f"points ({len(pts)}) and temperatures ({len(temps)}) differ in length")
        if not np.isfinite(pts).all() or not np.isfinite(temps).all():
            raise InvalidArgumentError("cloud contains non-finite values")
        if len(temps) and temps.min() <= 0.0:
            raise InvalidArgumentError("temperatures must be > 0 K")
        regions = self.regions
        if regions is not None:
            regions = np.asarray(regions, dtype=object).reshape(-1)
            if len(regions) != len(pts):
                raise InvalidArgumentError("regions length does not match points")
            regions.setflags(write=False)
        pts.setflags(write=False)
        temps.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "temperatures", temps)
        object.__setattr__(self, "regions", regions)

    def __len__(self) -> int:
        return len(self.points)

    def transformed(self, transform: geometry.RigidTransform) -> "ThermalPointCloud":
        return ThermalPointCloud(transform.apply(self.points), self.temperatures, self.regions)


# ---------------------------------------------------------------------------
# Point classification and region temperatures
# ---------------------------------------------------------------------------

def _points_on_surface(cloud: ThermalPointCloud, surface: Surface,
                       distance_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Indices of cloud points on the surface polygon, plus their 2D coords."""
    if len(cloud) == 0:
        return np.empty(0, dtype=np.intp), np.empty((0, 2))
    dist = np.abs(cloud.points @ surface.normal - surface.plane_offset)
    near = np.nonzero(dist <= distance_threshold)[0]
    if near.size == 0:
        return near, np.empty((0, 2))
    q2 = surface.to_plane(cloud.points[near])
    inside = geometry.point_in_polygon(q2, surface.corners2d, tol=BOUNDARY_TOL)
    return near[inside], q2[inside]


def surface_membership(cloud: ThermalPointCloud, surface: Surface,
                       distance_threshold: float = 0.005) -> dict[str, np.ndarray]:
    """Partition the cloud points on a surface into envelope and features.

    Returns a mapping from region id (the surface id for the envelope,
    feature ids otherwise) to cloud point indices.  The sets are disjoint
    and their union is every point inside the surface polygon.
    """
    idx, q2 = _points_on_surface(cloud, surface, distance_threshold)
    out: dict[str, np.ndarray] = {}
    claimed = np.zeros(len(idx), dtype=bool)
    for feat, poly2 in zip(surface.features, surface.feature_polygons2d):
        in_feat = geometry.point_in_polygon(q2, poly2, tol=BOUNDARY_TOL) & ~claimed
        out[feat.id] = idx[in_feat]
        claimed |= in_feat
    out[surface.id] = idx[~claimed]
    return out


def surface_temperature(cloud: ThermalPointCloud, surface: Surface,
                        distance_threshold: float = 0.005) -> float:
    """Mean temperature of envelope points (feature regions excluded)."""
    members = surface_membership(cloud, surface, distance_threshold)
    idx = members[surface.id]
    if idx.size == 0:
        raise MissingCoverageError(surface.id)
    return float(cloud.temperatures[idx].mean())


def feature_temperature(cloud: ThermalPointCloud, surface: Surface,
                        feature: ThermalFeature,
                        distance_threshold: float = 0.005) -> float:
    """Mean temperature of points inside one feature polygon.

    The feature may be attached to the surface or a candidate about to be
    attached; either way its polygon is evaluated in the surface plane.
    """
    if feature.id in {f.id for f in surface.features}:
        idx = surface_membership(cloud, surface, distance_threshold)[feature.id]
    else:
        on_surf, q2 = _points_on_surface(cloud, surface, distance_threshold)
        poly2 = geometry.to_plane_coords(feature.corners, surface.origin, surface.e1, surface.e2)
        idx = on_surf[geometry.point_in_polygon(q2, poly2, tol=BOUNDARY_TOL)]
    if idx.size == 0:
        raise MissingCoverageError(feature.id)
    return float(cloud.temperatures[idx].mean())


# ---------------------------------------------------------------------------
# RANSAC plane extraction
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtractionParams:
    """Sequential-RANSAC parameters for planar surface extraction."""

    distance_threshold: float = 0.005
    min_inliers: int = 500
    max_planes: int = 10
    seed: int = 42
    max_iterations: int = 1000
    score_sample: int = 2048

    def __post_init__(self):
        if self.distance_threshold <= 0 or self.min_inliers < 3 or self.max_planes < 1:
            raise InvalidArgumentError("invalid extraction parameters")


def _ransac_plane(points: np.ndarray, rng: np.random.Generator,
                  params: ExtractionParams) -> tuple[np.ndarray, float] | None:
    """Best RANSAC plane over ``points`` as (normal, offset), or None."""
    m = len(points)
    score_idx = (np.arange(m) if m <= params.score_sample
                 else rng.choice(m, params.score_sample, replace=False))
    score_pts = points[score_idx]

    best_count = 0
    best_plane: tuple[np.ndarray, float] | None = None
    needed = params.max_iterations
    it = 0
    while it < min(needed, params.max_iterations):
        it += 1
        i, j, k = rng.choice(m, 3, replace=False)
        v = np.cross(points[j] - points[i], points[k] - points[i])
        norm = np.linalg.norm(v)
        if norm < 1e-12:
            continue
        n = v / norm
        d = float(n @ points[i])
        count = int(np.count_nonzero(np.abs(score_pts @ n - d) <= params.distance_threshold))
        if count > best_count:
            best_count = count
            best_plane = (n, d)
            w = count / len(score_pts)
            if w >= 1.0:
                break
            # 99.9% confidence of having sampled one all-inlier triple
            needed = max(100, int(np.ceil(np.log(1e-3) / np.log(1.0 - w ** 3))))
    return best_plane


def extract_planar_surfaces(cloud: ThermalPointCloud,
                            params: ExtractionParams | None = None) -> list[Surface]:
    """Extract planar surfaces from a fused cloud by sequential RANSAC.

    Each accepted plane is refined by a least-squares refit on its inliers,
    bounded by the minimum-area oriented rectangle of the inliers projected
    onto the plane, and assigned the mean temperature of its envelope
    points.  Inliers of accepted planes are removed before the next fit.
    Deterministic for a fixed seed.
    """
    params = params or ExtractionParams()
    pts = cloud.points
    if len(pts) < params.min_inliers:
        return []
    # A cloud with no planar extent at all cannot seed any plane.
    try:
        geometry.fit_plane(pts)
    except DegenerateGeometryError:
        raise DegenerateGeometryError(
            "point cloud is collinear; no plane can be extracted") from None

    rng = np.random.default_rng(params.seed)
    interior = pts.mean(axis=0)
    remaining = np.arange(len(pts))
    surfaces: list[Surface] = []

    for k in range(params.max_planes):
        if remaining.size < params.min_inliers:
            break
        sub = pts[remaining]
        plane = _ransac_plane(sub, rng, params)
        if plane is None:
            break
        n, d = plane
        inl = np.abs(sub @ n - d) <= params.distance_threshold
        # Refine on full inlier set; re-collect after each refit.
        for _ in range(3):
            if np.count_nonzero(inl) < 3:
                break
            try:
                n, d = geometry.fit_plane(sub[inl])
            except DegenerateGeometryError:
                break
            inl = np.abs(sub @ n - d) <= params.distance_threshold
        n_inl = int(np.count_nonzero(inl))
        if n_inl < params.min_inliers:
            break

        inlier_pts = sub[inl]
        centroid = inlier_pts.mean(axis=0)
        origin = centroid - (float(n @ centroid) - d) * n
        # Outward normal points toward the cloud interior (the scanned side).
        if float(n @ (interior - origin)) < 0.0:
            n = -n
        e1, e2 = geometry.plane_basis(n)
        q2 = geometry.to_plane_coords(inlier_pts, origin, e1, e2)
        rect2 = geometry.min_area_rect(q2)
        corners = origin + rect2[:, :1] * e1 + rect2[:, 1:] * e2

        surf_idx = remaining[inl]
        temperature = float(cloud.temperatures[surf_idx].mean())
        surfaces.append(Surface(id=f"surface_{len(surfaces)}", corners=corners,
                                temperature=temperature))
        remaining = remaining[~inl]

    return surfaces


# ---------------------------------------------------------------------------
# Scene file format (JSON, temperatures in kelvins)
# ---------------------------------------------------------------------------

SCENE_FORMAT = "radiantmap-scene"
SCENE_VERSION = 1


def scene_to_dict(scene: Scene) -> dict:
    return {
        "format": SCENE_FORMAT,
        "version": SCENE_VERSION,
        "closed_enclosure": scene.closed_enclosure,
        "metadata": scene.metadata,
        "surfaces": [
            {
                "id": s.id,
                "corners": s.corners.tolist(),
                "temperature_k": s.temperature,
                "features": [
                    {
                        "id": f.id,
                        "label": f.label,
                        "corners": f.corners.tolist(),
                        "temperature_k": f.temperature,
                    }
                    for f in s.features
                ],
            }
            for s in scene.surfaces
        ],
    }


def scene_from_dict(data: dict) -> Scene:
    try:
        if data.get("format", SCENE_FORMAT) != SCENE_FORMAT:
            raise SceneFormatError(f"not a scene file (format={data.get('format')!r})")
        surfaces = []
        for s in data["surfaces"]:
            features = tuple(
                ThermalFeature(id=f["id"], label=f.get("label", ""),
                               corners=np.asarray(f["corners"], dtype=np.float64),
                               temperature=float(f["temperature_k"]))
                for f in s.get("features", []))
            surfaces.append(Surface(id=s["id"],
                                    corners=np.asarray(s["corners"], dtype=np.float64),
                                    temperature=float(s["temperature_k"]),
                                    features=features))
        return Scene(tuple(surfaces),
                     closed_enclosure=bool(data.get("closed_enclosure", False)),
                     metadata=dict(data.get("metadata", {})))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, SceneFormatError):
            raise
        raise SceneFormatError(f"malformed scene file: {exc}") from exc


def load_scene(path: str | Path) -> Scene:
    with open(path, "r", encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))


def save_scene(scene: Scene, path: str | Path) -> None:
    tmp = Path(path).with_name(Path(path).name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(scene_to_dict(scene), fh, indent=2)
        fh.write("\n")
    tmp.replace(path)
