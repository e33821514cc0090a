"""Shared geometric kernels: planes, planar polygons, and rigid transforms.

All lengths are meters and all angles radians.  Planes are stored as a unit
normal ``n`` and scalar offset ``d`` with the convention ``n . x = d``.
Polygon tests run in 2D plane coordinates after projection onto an
orthonormal in-plane basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .errors import DegenerateGeometryError, InvalidArgumentError

# Rotations are accepted as orthonormal within this bound.
ORTHONORMAL_TOL = 1e-9


def unit(v: np.ndarray) -> np.ndarray:
    """Return ``v`` scaled to unit length."""
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n < 1e-300:
        raise DegenerateGeometryError("cannot normalize a zero-length vector")
    return v / n


def newell_normal(corners: np.ndarray) -> np.ndarray:
    """Unit normal of a planar polygon via Newell's method.

    The returned normal is the one around which the corner order is
    counter-clockwise.
    """
    c = np.asarray(corners, dtype=np.float64)
    v = np.cross(c, np.roll(c, -1, axis=0)).sum(axis=0)
    n = np.linalg.norm(v)
    if n < 1e-15:
        raise DegenerateGeometryError("polygon has zero area, no defined normal")
    return v / n


def plane_basis(normal: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic orthonormal in-plane basis (e1, e2) with e1 x e2 = normal."""
    n = unit(normal)
    # Seed with the world axis least aligned with the normal.
    seed = np.zeros(3)
    seed[int(np.argmin(np.abs(n)))] = 1.0
    e1 = unit(np.cross(seed, n))
    e2 = np.cross(n, e1)
    return e1, e2


def fit_plane(points: np.ndarray) -> tuple[np.ndarray, float]:
    """Least-squares plane through ``points`` as (unit normal, offset).

    Raises DegenerateGeometryError when the points span less than two
    dimensions (a line or a single point fits no unique plane).
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape[0] < 3:
        raise DegenerateGeometryError("plane fit needs at least 3 points")
    centroid = pts.mean(axis=0)
    _, s, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    if s[1] <= max(s[0], 1.0) * 1e-12:
        raise DegenerateGeometryError("points are collinear, plane fit is degenerate")
    n = vt[2]
    # Canonical sign: largest-magnitude component positive.
    if n[int(np.argmax(np.abs(n)))] < 0:
        n = -n
    return n, float(n @ centroid)


def to_plane_coords(points: np.ndarray, origin: np.ndarray,
                    e1: np.ndarray, e2: np.ndarray) -> np.ndarray:
    """Project 3D points into (e1, e2) coordinates relative to ``origin``."""
    d = np.atleast_2d(points) - origin
    return np.stack([d @ e1, d @ e2], axis=1)


def polygon_area2d(poly: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise order)."""
    p = np.asarray(poly, dtype=np.float64)
    x, y = p[:, 0], p[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def points_segment_distance2d(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distances from each 2D point to the segment a-b."""
    pts = np.atleast_2d(points)
    ab = b - a
    denom = float(ab @ ab)
    if denom < 1e-300:
        return np.linalg.norm(pts - a, axis=1)
    t = np.clip((pts - a) @ ab / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.linalg.norm(pts - proj, axis=1)


def polygon_edge_distance2d(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Minimum distance from each 2D point to the polygon boundary."""
    pts = np.atleast_2d(points)
    best = np.full(len(pts), np.inf)
    k = len(poly)
    for i in range(k):
        np.minimum(best, points_segment_distance2d(pts, poly[i], poly[(i + 1) % k]), out=best)
    return best


def point_in_polygon(points: np.ndarray, poly: np.ndarray, tol: float = 0.0) -> np.ndarray:
    """Vectorized even-odd containment test for 2D points.

    With ``tol`` > 0 points within ``tol`` of the boundary count as inside,
    which gives the boundary-inclusive semantics used for point
    classification.  With tol = 0 points exactly on an edge may land on
    either side; ray-tally callers accept that (measure-zero event).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    x, y = pts[:, 0], pts[:, 1]
    inside = np.zeros(len(pts), dtype=bool)
    k = len(poly)
    for i in range(k):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % k]
        crosses = (y1 > y) != (y2 > y)
        if not crosses.any():
            continue
        xi = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xi)
    if tol > 0.0:
        inside |= polygon_edge_distance2d(pts, poly) <= tol
    return inside


def is_simple_polygon(poly: np.ndarray) -> bool:
    """True when no two non-adjacent edges intersect (polygon is simple)."""
    p = np.asarray(poly, dtype=np.float64)
    k = len(p)
    if k < 3:
        return False

    def seg_intersect(a, b, c, d) -> bool:
        def orient(p0, p1, p2):
            v = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
            if abs(v) < 1e-15:
                return 0
            return 1 if v > 0 else -1

        o1, o2 = orient(a, b, c), orient(a, b, d)
        o3, o4 = orient(c, d, a), orient(c, d, b)
        if o1 != o2 and o3 != o4:
            return True

        def on_seg(p0, p1, q):
            return (orient(p0, p1, q) == 0
                    and min(p0[0], p1[0]) - 1e-15 <= q[0] <= max(p0[0], p1[0]) + 1e-15
                    and min(p0[1], p1[1]) - 1e-15 <= q[1] <= max(p0[1], p1[1]) + 1e-15)

        return on_seg(a, b, c) or on_seg(a, b, d) or on_seg(c, d, a) or on_seg(c, d, b)

    for i in range(k):
        a, b = p[i], p[(i + 1) % k]
        for j in range(i + 1, k):
            if j == i or (j + 1) % k == i or (i + 1) % k == j:
                continue  # shared endpoint
            c, d = p[j], p[(j + 1) % k]
            if seg_intersect(a, b, c, d):
                return False
    return True


def convex_hull2d(points: np.ndarray) -> np.ndarray:
    """Convex hull vertices in counter-clockwise order."""
    pts = np.asarray(points, dtype=np.float64)
    try:
        hull = ConvexHull(pts)
    except QhullError as exc:
        raise DegenerateGeometryError(f"convex hull failed: {exc}") from exc
    return pts[hull.vertices]


def min_area_rect(points: np.ndarray) -> np.ndarray:
    """Minimum-area oriented bounding rectangle of 2D points.

    Returns the 4 rectangle corners in counter-clockwise order.  Uses the
    rotating-calipers fact that one rectangle side is collinear with a
    convex-hull edge.
    """
    hp = convex_hull2d(points)
    best_area = np.inf
    best: np.ndarray | None = None
    m = len(hp)
    for i in range(m):
        edge = hp[(i + 1) % m] - hp[i]
        length = np.hypot(edge[0], edge[1])
        if length < 1e-15:
            continue
        ux = edge / length
        uy = np.array([-ux[1], ux[0]])
        xs = hp @ ux
        ys = hp @ uy
        x0, x1 = xs.min(), xs.max()
        y0, y1 = ys.min(), ys.max()
        area = (x1 - x0) * (y1 - y0)
        if area < best_area - 1e-15:
            best_area = area
            best = np.array([
                x0 * ux + y0 * uy,
                x1 * ux + y0 * uy,
                x1 * ux + y1 * uy,
                x0 * ux + y1 * uy,
            ])
    if best is None:
        raise DegenerateGeometryError("cannot bound degenerate point set")
    return best


def point_polygon_distance3d(point: np.ndarray, corners: np.ndarray) -> float:
    """Exact distance from a 3D point to a planar polygon (interior included)."""
    p = np.asarray(point, dtype=np.float64)
    c = np.asarray(corners, dtype=np.float64)
    n = newell_normal(c)
    e1, e2 = plane_basis(n)
    h = float((p - c[0]) @ n)
    q2 = to_plane_coords(p[None, :], c[0], e1, e2)
    poly2 = to_plane_coords(c, c[0], e1, e2)
    if point_in_polygon(q2, poly2, tol=0.0)[0]:
        return abs(h)
    d_edge = float(polygon_edge_distance2d(q2, poly2)[0])
    return float(np.hypot(h, d_edge))


def aabb(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned bounds (min, max) of a point set."""
    pts = np.asarray(points, dtype=np.float64)
    return pts.min(axis=0), pts.max(axis=0)


def aabb_iou(a: tuple[np.ndarray, np.ndarray], b: tuple[np.ndarray, np.ndarray]) -> float:
    """Intersection-over-union of two axis-aligned 3D boxes."""
    lo = np.maximum(a[0], b[0])
    hi = np.minimum(a[1], b[1])
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    vol_a = float(np.prod(np.clip(a[1] - a[0], 0.0, None)))
    vol_b = float(np.prod(np.clip(b[1] - b[0], 0.0, None)))
    union = vol_a + vol_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rotation matrix for ``angle`` radians about ``axis`` (Rodrigues)."""
    a = unit(axis)
    k = np.array([[0.0, -a[2], a[1]],
                  [a[2], 0.0, -a[0]],
                  [-a[1], a[0], 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle in radians of a rotation matrix."""
    c = (float(np.trace(r)) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


@dataclass(frozen=True)
class RigidTransform:
    """Rigid motion ``x -> R x + t`` with rotation in SO(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise InvalidArgumentError(f"rotation must be 3x3, got {r.shape}")
        if not np.isfinite(r).all() or not np.isfinite(t).all():
            raise InvalidArgumentError("transform contains non-finite values")
        if np.max(np.abs(r @ r.T - np.eye(3))) > ORTHONORMAL_TOL:
            raise InvalidArgumentError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidArgumentError("rotation determinant is not +1 (improper rotation)")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "RigidTransform":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise InvalidArgumentError(f"homogeneous matrix must be 4x4, got {m.shape}")
        return cls(m[:3, :3], m[:3, 3])

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Transform equivalent to applying ``other`` first, then ``self``."""
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation))


def kabsch(source: np.ndarray, target: np.ndarray) -> RigidTransform:
    """Closed-form least-squares rigid transform mapping source onto target.

    Solves min_T sum ||T(s_i) - d_i||^2 by SVD of the cross-covariance with
    the determinant sign fix that rules out reflections.  Requires paired
    points (same length, same order).
    """
    src = np.asarray(source, dtype=np.float64)
    dst = np.asarray(target, dtype=np.float64)
    if src.shape != dst.shape or src.shape[0] < 3:
        raise InvalidArgumentError("kabsch needs >= 3 paired points")
    sc = src.mean(axis=0)
    dc = dst.mean(axis=0)
    h = (src - sc).T @ (dst - dc)
    u, s, vt = np.linalg.svd(h)
    if s[1] <= max(s[0], 1e-30) * 1e-9:
        raise DegenerateGeometryError("correspondences span less than two dimensions")
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, dc - r @ sc)
