"""Monte Carlo view factors from a point to scene surfaces and features.

The receiver is an isotropic point: ray directions are sampled uniformly on
the unit sphere (the reference instrument this models is an omnidirectional
globe sensor).  A region's view factor is the fraction of rays whose
nearest hit lands in that region.  Feature sub-regions tally separately
from their parent envelope, so a parent's view factor already excludes the
rays its features captured.

Directions come from a counter-based generator (Philox) keyed by the seed,
so a fixed (point, scene, n_rays, seed) gives a bit-identical result
regardless of evaluation order or thread count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .errors import (
    EnclosureLeakError,
    InvalidArgumentError,
    OutOfDomainError,
)
from .scene import Scene, Surface

# Hits closer than this are self-intersections and ignored.
SELF_INTERSECT_EPS = 1e-9
# Hits farther than this count as misses.
MAX_HIT_DISTANCE = 1e4
# Evaluation points must keep this clearance from every surface.
MIN_CLEARANCE = 0.01
# Below this ray count the estimator is flagged as noisy.
NOISY_RAY_COUNT = 1000

DEFAULT_N_RAYS = 100_000
DEFAULT_SEED = 42

# Brute-force beats BVH traversal overhead for small scenes.
BVH_AUTO_THRESHOLD = 48
_BVH_LEAF_SIZE = 2


@dataclass(frozen=True)
class RayHit:
    """Nearest intersection of one ray: region id and hit distance."""

    region: str
    distance: float

    def __post_init__(self):
        if not (self.distance > SELF_INTERSECT_EPS):
            raise InvalidArgumentError(f"hit distance {self.distance} is inside the self-intersection guard")


@dataclass(frozen=True)
class ViewFactorSet:
    """View factors of every scene region as seen from one point.

    ``entries`` maps surface and feature ids to their view factor;
    ``counts`` carries the underlying integer ray tallies, which conserve
    exactly: sum(counts) + miss_count == n_rays.
    """

    entries: dict[str, float]
    total_hit_fraction: float
    n_rays: int
    seed: int
    counts: dict[str, int] = field(default_factory=dict)
    miss_count: int = 0
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "entries": dict(self.entries),
            "total_hit_fraction": self.total_hit_fraction,
            "n_rays": self.n_rays,
            "seed": self.seed,
            "counts": dict(self.counts),
            "miss_count": self.miss_count,
            "warnings": list(self.warnings),
        }


def sample_directions(n: int, seed: int) -> np.ndarray:
    """``n`` unit vectors uniformly distributed over the sphere.

    Deterministic for a fixed seed; every vector is unit-norm to within
    1e-12.
    """
    if n < 1:
        raise InvalidArgumentError(f"need at least one direction, got n={n}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    u = rng.random((n, 2))
    z = 1.0 - 2.0 * u[:, 0]
    phi = (2.0 * np.pi) * u[:, 1]
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    return np.column_stack([r * np.cos(phi), r * np.sin(phi), z])


class _BVHNode:
    __slots__ = ("lo", "hi", "left", "right", "polys")

    def __init__(self, lo, hi, left=None, right=None, polys=None):
        self.lo = lo
        self.hi = hi
        self.left = left
        self.right = right
        self.polys = polys


class PreparedScene:
    """Scene flattened into contiguous arrays for fast batched intersection."""

    def __init__(self, scene: Scene):
        self.scene = scene
        surfaces = scene.surfaces
        self.normals = np.array([s.normal for s in surfaces])
        self.offsets = np.array([s.plane_offset for s in surfaces])
        self.origins = np.array([s.origin for s in surfaces])
        self.e1s = np.array([s.e1 for s in surfaces])
        self.e2s = np.array([s.e2 for s in surfaces])
        self.polys2d = [s.corners2d for s in surfaces]

        # Region code table: surfaces first, then features in surface order.
        self.region_names: list[str] = [s.id for s in surfaces]
        self.surface_features: list[list[tuple[int, np.ndarray]]] = []
        for s in surfaces:
            feats = []
            for f, poly2 in zip(s.features, s.feature_polygons2d):
                feats.append((len(self.region_names), poly2))
                self.region_names.append(f.id)
            self.surface_features.append(feats)

        self.poly_lo = np.array([s.corners.min(axis=0) for s in surfaces])
        self.poly_hi = np.array([s.corners.max(axis=0) for s in surfaces])
        self._bvh: _BVHNode | None = None

    @property
    def n_surfaces(self) -> int:
        return len(self.polys2d)

    def bvh(self) -> _BVHNode:
        if self._bvh is None:
            self._bvh = self._build(np.arange(self.n_surfaces))
        return self._bvh

    def _build(self, idx: np.ndarray) -> _BVHNode:
        lo = self.poly_lo[idx].min(axis=0)
        hi = self.poly_hi[idx].max(axis=0)
        if len(idx) <= _BVH_LEAF_SIZE:
            return _BVHNode(lo, hi, polys=np.sort(idx))
        centers = 0.5 * (self.poly_lo[idx] + self.poly_hi[idx])
        axis = int(np.argmax(centers.max(axis=0) - centers.min(axis=0)))
        order = idx[np.argsort(centers[:, axis], kind="stable")]
        half = len(order) // 2
        return _BVHNode(lo, hi, left=self._build(order[:half]), right=self._build(order[half:]))


def _in_polygon_fast(u: np.ndarray, v: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd test over precomputed scalar edges (hot path)."""
    inside = np.zeros(len(u), dtype=bool)
    k = len(poly)
    for i in range(k):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % k]
        if y1 == y2:
            continue
        crosses = (y1 > v) != (y2 > v)
        xi = x1 + (v - y1) * ((x2 - x1) / (y2 - y1))
        inside ^= crosses & (u < xi)
    return inside


def _test_polygon(prep: PreparedScene, j: int, origin: np.ndarray, dirs: np.ndarray,
                  sel: np.ndarray | None, best_t: np.ndarray, best_idx: np.ndarray) -> None:
    """Intersect rays with polygon ``j``, keeping the lexicographic (t, j) minimum."""
    n = prep.normals[j]
    if sel is None:
        d = dirs
        bt = best_t
        bi = best_idx
    else:
        d = dirs[sel]
        bt = best_t[sel]
        bi = best_idx[sel]
    denom = d @ n
    num = prep.offsets[j] - float(origin @ n)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    cand = (t > SELF_INTERSECT_EPS) & (t <= MAX_HIT_DISTANCE)
    cand &= (t < bt) | ((t == bt) & (j < bi))
    ci = np.nonzero(cand)[0]
    if ci.size == 0:
        return
    tc = t[ci]
    dc = d[ci]
    rel = origin - prep.origins[j]
    u = float(rel @ prep.e1s[j]) + tc * (dc @ prep.e1s[j])
    v = float(rel @ prep.e2s[j]) + tc * (dc @ prep.e2s[j])
    ok = _in_polygon_fast(u, v, prep.polys2d[j])
    if not ok.any():
        return
    upd = ci[ok]
    if sel is not None:
        upd = sel[upd]
    best_t[upd] = tc[ok]
    best_idx[upd] = j


def _traverse_bvh(prep: PreparedScene, node: _BVHNode, origin: np.ndarray, dirs: np.ndarray,
                  inv_dirs: np.ndarray, sel: np.ndarray,
                  best_t: np.ndarray, best_idx: np.ndarray) -> None:
    d = inv_dirs[sel]
    t0 = (node.lo - origin) * d
    t1 = (node.hi - origin) * d
    near = np.minimum(t0, t1).max(axis=1)
    far = np.maximum(t0, t1).min(axis=1)
    hit = (near <= far) & (far > SELF_INTERSECT_EPS) & (near <= np.minimum(best_t[sel], MAX_HIT_DISTANCE))
    active = sel[hit]
    if active.size == 0:
        return
    if node.polys is not None:
        for j in node.polys:
            _test_polygon(prep, int(j), origin, dirs, active, best_t, best_idx)
        return
    _traverse_bvh(prep, node.left, origin, dirs, inv_dirs, active, best_t, best_idx)
    _traverse_bvh(prep, node.right, origin, dirs, inv_dirs, active, best_t, best_idx)


def _intersect_batch(prep: PreparedScene, origin: np.ndarray, dirs: np.ndarray,
                     use_bvh: bool) -> tuple[np.ndarray, np.ndarray]:
    """Nearest polygon hit per ray: (distance, polygon index), -1 for miss.

    Ties at identical distance resolve to the lowest polygon index, so the
    result is independent of traversal order; BVH and flat traversal are
    exactly interchangeable.
    """
    n_rays = len(dirs)
    best_t = np.full(n_rays, np.inf)
    best_idx = np.full(n_rays, np.iinfo(np.int64).max, dtype=np.int64)
    if use_bvh:
        with np.errstate(divide="ignore"):
            inv_dirs = 1.0 / dirs
        _traverse_bvh(prep, prep.bvh(), origin, dirs, inv_dirs,
                      np.arange(n_rays), best_t, best_idx)
    else:
        for j in range(prep.n_surfaces):
            _test_polygon(prep, j, origin, dirs, None, best_t, best_idx)
    best_idx[~np.isfinite(best_t)] = -1
    return best_t, best_idx


def _assign_regions(prep: PreparedScene, origin: np.ndarray, dirs: np.ndarray,
                    t: np.ndarray, poly_idx: np.ndarray) -> np.ndarray:
    """Refine surface hits into feature regions where the hit point lands inside one."""
    codes = poly_idx.copy()
    for j, feats in enumerate(prep.surface_features):
        if not feats:
            continue
        sel = np.nonzero(poly_idx == j)[0]
        if sel.size == 0:
            continue
        tc = t[sel]
        dc = dirs[sel]
        rel = origin - prep.origins[j]
        u = float(rel @ prep.e1s[j]) + tc * (dc @ prep.e1s[j])
        v = float(rel @ prep.e2s[j]) + tc * (dc @ prep.e2s[j])
        claimed = np.zeros(sel.size, dtype=bool)
        for code, poly2 in feats:
            m = _in_polygon_fast(u, v, poly2) & ~claimed
            if m.any():
                codes[sel[m]] = code
                claimed |= m
    return codes


def _resolve_use_bvh(prep: PreparedScene, use_bvh) -> bool:
    if use_bvh == "auto":
        return prep.n_surfaces > BVH_AUTO_THRESHOLD
    return bool(use_bvh)


def intersect_ray(origin: np.ndarray, direction: np.ndarray,
                  scene: Scene | PreparedScene) -> RayHit | None:
    """Nearest intersection of a single ray with the scene, or None on miss.

    If the hit point lies inside a feature polygon of the hit surface the
    reported region is the feature id; otherwise the surface id.
    """
    direction = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(direction) - 1.0) > 1e-9:
        raise InvalidArgumentError("ray direction must be unit-norm")
    prep = scene if isinstance(scene, PreparedScene) else PreparedScene(scene)
    origin = np.asarray(origin, dtype=np.float64)
    t, pidx = _intersect_batch(prep, origin, direction[None, :], use_bvh=False)
    if pidx[0] < 0:
        return None
    codes = _assign_regions(prep, origin, direction[None, :], t, pidx)
    return RayHit(region=prep.region_names[int(codes[0])], distance=float(t[0]))


def validate_point(point: np.ndarray, scene: Scene | PreparedScene,
                   clearance: float = MIN_CLEARANCE) -> None:
    """Raise OutOfDomainError unless the point is strictly inside the scene
    bounds and at least ``clearance`` away from every surface."""
    prep = scene if isinstance(scene, PreparedScene) else None
    sc = prep.scene if prep else scene
    p = np.asarray(point, dtype=np.float64)
    lo, hi = sc.bounds
    if not (np.all(p > lo) and np.all(p < hi)):
        raise OutOfDomainError(f"point {p.tolist()} is outside the scene bounds")
    for s in sc.surfaces:
        if geometry.point_polygon_distance3d(p, s.corners) < clearance:
            raise OutOfDomainError(
                f"point {p.tolist()} is within {clearance} m of surface {s.id!r}")


def view_factors(point: np.ndarray, scene: Scene | PreparedScene,
                 n_rays: int = DEFAULT_N_RAYS, seed: int = DEFAULT_SEED,
                 use_bvh: bool | str = "auto") -> ViewFactorSet:
    """Estimate view factors from ``point`` to every surface and feature.

    F(region) is the fraction of ``n_rays`` uniformly sampled directions
    whose nearest hit lands in that region.  Feature tallies are separate
    from their parent surface, so the parent's value already excludes rays
    captured by its features.

    In a scene flagged as a closed enclosure every ray must hit; any miss
    raises EnclosureLeakError.
    """
    if n_rays < 1:
        raise InvalidArgumentError(f"n_rays must be >= 1, got {n_rays}")
    prep = scene if isinstance(scene, PreparedScene) else PreparedScene(scene)
    point = np.asarray(point, dtype=np.float64)
    validate_point(point, prep.scene)

    warnings: list[str] = []
    if n_rays < NOISY_RAY_COUNT:
        warnings.append(f"n_rays={n_rays} is below {NOISY_RAY_COUNT}; estimate will be noisy")

    dirs = sample_directions(n_rays, seed)
    t, pidx = _intersect_batch(prep, point, dirs, _resolve_use_bvh(prep, use_bvh))
    codes = _assign_regions(prep, point, dirs, t, pidx)

    n_regions = len(prep.region_names)
    tallies = np.bincount(codes + 1, minlength=n_regions + 1)
    miss = int(tallies[0])
    if prep.scene.closed_enclosure and miss > 0:
        raise EnclosureLeakError(
            f"{miss} of {n_rays} rays escaped a scene flagged as a closed enclosure")

    counts = {name: int(tallies[i + 1]) for i, name in enumerate(prep.region_names)}
    entries = {name: c / n_rays for name, c in counts.items()}
    return ViewFactorSet(entries=entries,
                         total_hit_fraction=(n_rays - miss) / n_rays,
                         n_rays=n_rays, seed=seed, counts=counts,
                         miss_count=miss, warnings=tuple(warnings))


def _corner_solid_angle(a: float, b: float, c: float) -> float:
    """Signed solid angle of the axis-aligned rectangle [0,a]x[0,b] at height c."""
    return float(np.arctan((a * b) / (c * np.sqrt(a * a + b * b + c * c))))


def analytic_rectangle_view_factor(point: np.ndarray, rect: Surface | np.ndarray) -> float:
    """Exact isotropic-point view factor of a rectangle.

    Decomposes the rectangle into four signed corner sub-rectangles around
    the foot of the perpendicular from the point and sums their pyramid
    solid angles; F is the total solid angle over 4*pi.  Test oracle and
    accuracy-report helper; not used by the Monte Carlo path.
    """
    corners = rect.corners if isinstance(rect, Surface) else np.asarray(rect, dtype=np.float64)
    if corners.shape != (4, 3):
        raise InvalidArgumentError("rectangle must have exactly 4 corners")
    scale = float(np.linalg.norm(corners[2] - corners[0]))
    if np.linalg.norm((corners[1] - corners[0]) + (corners[3] - corners[2])) > 1e-6 * scale:
        raise InvalidArgumentError("corners do not form a parallelogram")
    ex = corners[1] - corners[0]
    ey = corners[3] - corners[0]
    if abs(float(ex @ ey)) > 1e-6 * scale * scale:
        raise InvalidArgumentError("corners do not form a rectangle")

    w = float(np.linalg.norm(ex))
    h = float(np.linalg.norm(ey))
    e1 = ex / w
    e2 = ey / h
    n = np.cross(e1, e2)
    p = np.asarray(point, dtype=np.float64) - corners[0]
    c = abs(float(p @ n))
    if c < 1e-12:
        return 0.0
    px = float(p @ e1)
    py = float(p @ e2)
    x0, x1 = -px, w - px
    y0, y1 = -py, h - py
    omega = (_corner_solid_angle(x1, y1, c) - _corner_solid_angle(x0, y1, c)
             - _corner_solid_angle(x1, y0, c) + _corner_solid_angle(x0, y0, c))
    return omega / (4.0 * np.pi)
