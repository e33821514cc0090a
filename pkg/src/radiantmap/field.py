"""Spatial MRT field over a horizontal evaluation grid.

A cell-centered grid spans the floor polygon's bounding rectangle at a
fixed height above the floor (head height of a seated occupant by
default).  Cells outside the floor polygon or hugging geometry are masked.
Each cell gets its own seed derived deterministically from the base seed
and the cell index, so the field is reproducible and identical for any
worker count.

Exports: CSV with '#' metadata comment lines and the value matrix in
kelvins (row = y index), and a rendered heatmap PNG with iso-MRT contour
lines, produced by a small built-in rasterizer.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .errors import InvalidArgumentError, MissingFloorError, RadiantMapError, SceneFormatError
from .mrt import mrt_at_point
from .scene import Scene, Surface
from .viewfactor import (
    DEFAULT_N_RAYS,
    DEFAULT_SEED,
    MIN_CLEARANCE,
    PreparedScene,
)
from . import geometry

logger = logging.getLogger(__name__)

# Surfaces within this angle of horizontal qualify as floors.
FLOOR_ANGLE_TOL = math.radians(10.0)

DEFAULT_GRID_N = 20
DEFAULT_HEIGHT = 1.1
DEFAULT_CONTOUR_INTERVAL = 0.5

FIELD_CSV_HEADER = "radiantmap-field"
FIELD_CSV_VERSION = 1

MASK_COLOR = (120, 120, 120)
CONTOUR_COLOR = (20, 20, 20)

# Compact perceptual colormap anchors (dark violet to bright yellow).
_CMAP_ANCHORS = np.array([
    (0, 0, 4), (40, 11, 84), (101, 21, 110), (159, 42, 99),
    (212, 72, 66), (245, 125, 21), (250, 193, 39), (252, 255, 164),
], dtype=np.float64)


@dataclass(frozen=True)
class MRTGrid:
    """Evaluation points of a horizontal grid, with invalid cells masked."""

    points: np.ndarray           # (ny, nx, 3) cell centers
    mask: np.ndarray             # (ny, nx) True where the cell is invalid
    origin: tuple[float, float]  # lower corner of the grid rectangle
    spacing: tuple[float, float]
    height: float                # above the floor
    z: float                     # absolute evaluation height
    floor_id: str

    @property
    def ny(self) -> int:
        return self.points.shape[0]

    @property
    def nx(self) -> int:
        return self.points.shape[1]


@dataclass(frozen=True)
class MRTField:
    """Regular grid of MRT values (kelvins) at a fixed height."""

    origin: tuple[float, float]
    nx: int
    ny: int
    spacing: tuple[float, float]
    height: float
    z: float
    values: np.ndarray           # (ny, nx), NaN at masked cells
    mask: np.ndarray             # (ny, nx)
    seed: int
    n_rays: int
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        if self.values.shape != (self.ny, self.nx) or self.mask.shape != (self.ny, self.nx):
            raise InvalidArgumentError("field dimensions are inconsistent")
        if not np.isfinite(self.values[~self.mask]).all():
            raise InvalidArgumentError("unmasked cells must hold finite values")


def find_floor(scene: Scene) -> Surface:
    """Lowest horizontal surface of the scene."""
    up = np.array([0.0, 0.0, 1.0])
    candidates = [s for s in scene.surfaces
                  if abs(float(s.normal @ up)) >= math.cos(FLOOR_ANGLE_TOL)]
    if not candidates:
        raise MissingFloorError("scene has no horizontal surface to serve as the floor")
    return min(candidates, key=lambda s: float(s.corners[:, 2].mean()))


def make_grid(scene: Scene, nx: int = DEFAULT_GRID_N, ny: int = DEFAULT_GRID_N,
              height: float = DEFAULT_HEIGHT) -> MRTGrid:
    """Cell-centered evaluation grid over the floor at ``height`` above it.

    Cells outside the floor polygon or within the scene clearance of any
    surface are masked.
    """
    if nx < 2 or ny < 2:
        raise InvalidArgumentError("grid needs nx >= 2 and ny >= 2")
    if height <= 0:
        raise InvalidArgumentError("height must be positive")
    floor = find_floor(scene)
    floor_z = float(floor.corners[:, 2].mean())
    z = floor_z + height

    poly_xy = floor.corners[:, :2]
    x0, y0 = poly_xy.min(axis=0)
    x1, y1 = poly_xy.max(axis=0)
    dx = (x1 - x0) / nx
    dy = (y1 - y0) / ny
    xs = x0 + (np.arange(nx) + 0.5) * dx
    ys = y0 + (np.arange(ny) + 0.5) * dy
    gx, gy = np.meshgrid(xs, ys)
    points = np.stack([gx, gy, np.full_like(gx, z)], axis=-1)

    flat = points.reshape(-1, 3)
    outside = ~geometry.point_in_polygon(flat[:, :2], poly_xy, tol=1e-9)
    mask = outside.reshape(ny, nx)
    for s in scene.surfaces:
        for i in np.nonzero(~mask.ravel())[0]:
            if geometry.point_polygon_distance3d(flat[i], s.corners) < MIN_CLEARANCE:
                mask.ravel()[i] = True
    return MRTGrid(points=points, mask=mask, origin=(float(x0), float(y0)),
                   spacing=(float(dx), float(dy)), height=float(height), z=float(z),
                   floor_id=floor.id)


def cell_seed(base_seed: int, cell_index: int) -> int:
    """Deterministic per-cell seed, independent of evaluation order."""
    return int(np.random.SeedSequence((base_seed, cell_index)).generate_state(1)[0])


def compute_field(scene: Scene, grid: MRTGrid, n_rays: int = DEFAULT_N_RAYS,
                  seed: int = DEFAULT_SEED, threads: int = 1) -> MRTField:
    """Evaluate MRT at every unmasked grid cell.

    Cells are independent; with ``threads`` > 1 they are evaluated in a
    thread pool.  Per-cell seeds derive from (seed, cell index), so results
    are bit-identical for any thread count.  A cell whose evaluation fails
    is masked and logged rather than failing the whole field.
    """
    if grid.mask.all():
        raise InvalidArgumentError("grid has no unmasked cells")
    prep = PreparedScene(scene)
    ny, nx = grid.ny, grid.nx
    values = np.full((ny, nx), np.nan)
    mask = grid.mask.copy()
    warnings: list[str] = []

    def evaluate(index: int) -> tuple[int, float | None, str | None]:
        iy, ix = divmod(index, nx)
        point = grid.points[iy, ix]
        try:
            result = mrt_at_point(point, scene, n_rays=n_rays,
                                  seed=cell_seed(seed, index), prepared=prep)
            return index, result.mrt, None
        except RadiantMapError as exc:
            return index, None, f"cell ({ix}, {iy}) masked: {exc}"

    todo = [i for i in range(ny * nx) if not mask.ravel()[i]]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(evaluate, todo))
    else:
        results = [evaluate(i) for i in todo]

    for index, value, note in results:
        iy, ix = divmod(index, nx)
        if value is None:
            mask[iy, ix] = True
            warnings.append(note)
            logger.warning("%s", note)
        else:
            values[iy, ix] = value

    return MRTField(origin=grid.origin, nx=nx, ny=ny, spacing=grid.spacing,
                    height=grid.height, z=grid.z, values=values, mask=mask,
                    seed=seed, n_rays=n_rays, warnings=tuple(warnings))


# ---------------------------------------------------------------------------
# CSV round trip
# ---------------------------------------------------------------------------

def write_field_csv(fld: MRTField, path: str | Path) -> None:
    lines = [
        f"# {FIELD_CSV_HEADER} {FIELD_CSV_VERSION}",
        f"# origin {fld.origin[0]!r} {fld.origin[1]!r}",
        f"# spacing {fld.spacing[0]!r} {fld.spacing[1]!r}",
        f"# height {fld.height!r}",
        f"# z {fld.z!r}",
        f"# seed {fld.seed}",
        f"# n_rays {fld.n_rays}",
    ]
    for iy in range(fld.ny):
        row = [(repr(float(v)) if not m else "nan")
               for v, m in zip(fld.values[iy], fld.mask[iy])]
        lines.append(",".join(row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_field_csv(path: str | Path) -> MRTField:
    meta: dict[str, list[str]] = {}
    rows: list[list[float]] = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts:
                meta[parts[0]] = parts[1:]
            continue
        rows.append([float(v) for v in line.split(",")])
    if meta.get(FIELD_CSV_HEADER, [None])[0] != str(FIELD_CSV_VERSION):
        raise SceneFormatError("not a radiantmap field CSV")
    try:
        values = np.asarray(rows, dtype=np.float64)
        mask = ~np.isfinite(values)
        return MRTField(origin=(float(meta["origin"][0]), float(meta["origin"][1])),
                        nx=values.shape[1], ny=values.shape[0],
                        spacing=(float(meta["spacing"][0]), float(meta["spacing"][1])),
                        height=float(meta["height"][0]), z=float(meta["z"][0]),
                        values=values, mask=mask,
                        seed=int(meta["seed"][0]), n_rays=int(meta["n_rays"][0]))
    except (KeyError, IndexError, ValueError) as exc:
        raise SceneFormatError(f"malformed field CSV: {exc}") from exc


# ---------------------------------------------------------------------------
# Heatmap + contour rendering
# ---------------------------------------------------------------------------

def _colormap(t: np.ndarray) -> np.ndarray:
    """Map values in [0, 1] to RGB via piecewise-linear anchor interpolation."""
    t = np.clip(t, 0.0, 1.0) * (len(_CMAP_ANCHORS) - 1)
    lo = np.floor(t).astype(int)
    hi = np.minimum(lo + 1, len(_CMAP_ANCHORS) - 1)
    frac = (t - lo)[..., None]
    rgb = _CMAP_ANCHORS[lo] * (1.0 - frac) + _CMAP_ANCHORS[hi] * frac
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


_MS_EDGES = {  # marching-squares segment endpoints per case (edges b, r, t, l)
    1: [("l", "b")], 2: [("b", "r")], 3: [("l", "r")], 4: [("r", "t")],
    5: [("l", "t"), ("b", "r")], 6: [("b", "t")], 7: [("l", "t")],
    8: [("t", "l")], 9: [("b", "t")], 10: [("l", "b"), ("r", "t")],
    11: [("r", "t")], 12: [("l", "r")], 13: [("b", "r")], 14: [("l", "b")],
}


def contour_segments(values: np.ndarray, mask: np.ndarray,
                     levels) -> list[tuple[float, tuple[np.ndarray, np.ndarray]]]:
    """Iso-line segments in grid (cell-center) coordinates via marching squares."""
    ny, nx = values.shape
    segments = []
    for level in levels:
        for iy in range(ny - 1):
            for ix in range(nx - 1):
                if mask[iy, ix] or mask[iy, ix + 1] or mask[iy + 1, ix] or mask[iy + 1, ix + 1]:
                    continue
                v00 = values[iy, ix]
                v10 = values[iy, ix + 1]
                v11 = values[iy + 1, ix + 1]
                v01 = values[iy + 1, ix]
                case = ((v00 > level) | ((v10 > level) << 1)
                        | ((v11 > level) << 2) | ((v01 > level) << 3))
                if case in (0, 15):
                    continue

                def interp(a, b):
                    return float((level - a) / (b - a))

                pts = {
                    "b": np.array([ix + interp(v00, v10), iy], dtype=np.float64),
                    "r": np.array([ix + 1.0, iy + interp(v10, v11)], dtype=np.float64),
                    "t": np.array([ix + interp(v01, v11), iy + 1.0], dtype=np.float64),
                    "l": np.array([ix, iy + interp(v00, v01)], dtype=np.float64),
                }
                for e0, e1 in _MS_EDGES[int(case)]:
                    segments.append((float(level), (pts[e0], pts[e1])))
    return segments


def contour_levels(fld: MRTField, interval: float = DEFAULT_CONTOUR_INTERVAL) -> np.ndarray:
    """Iso-MRT levels at ``interval`` spacing strictly inside the value range."""
    valid = fld.values[~fld.mask]
    if valid.size == 0:
        return np.empty(0)
    vmin, vmax = float(valid.min()), float(valid.max())
    first = math.ceil(vmin / interval) * interval
    levels = np.arange(first, vmax, interval)
    return levels[(levels > vmin) & (levels < vmax)]


def render_field_image(fld: MRTField, contour_interval: float = DEFAULT_CONTOUR_INTERVAL,
                       cell_pixels: int = 24) -> Image.Image:
    """Heatmap of the field with iso-MRT contour lines.

    Cells map to ``cell_pixels`` squares colored over the field's own value
    range; masked cells render gray; row 0 sits at the bottom of the image
    (y grows upward).
    """
    valid = fld.values[~fld.mask]
    vmin = float(valid.min()) if valid.size else 0.0
    vmax = float(valid.max()) if valid.size else 1.0
    span = vmax - vmin
    norm = np.zeros_like(fld.values) if span == 0.0 else (fld.values - vmin) / span
    norm = np.where(fld.mask, 0.0, norm)
    rgb = _colormap(norm)
    rgb[fld.mask] = MASK_COLOR

    img_rows = np.flipud(rgb)  # row 0 of the field at the bottom
    img = Image.fromarray(img_rows, mode="RGB").resize(
        (fld.nx * cell_pixels, fld.ny * cell_pixels), resample=Image.NEAREST)

    draw = ImageDraw.Draw(img)
    levels = contour_levels(fld, contour_interval)
    ny = fld.ny
    for _, (a, b) in contour_segments(fld.values, fld.mask, levels):
        pa = ((a[0] + 0.5) * cell_pixels, ((ny - 1 - a[1]) + 0.5) * cell_pixels)
        pb = ((b[0] + 0.5) * cell_pixels, ((ny - 1 - b[1]) + 0.5) * cell_pixels)
        draw.line([pa, pb], fill=CONTOUR_COLOR, width=2)
    return img


def export_field(fld: MRTField, csv_path: str | Path | None = None,
                 image_path: str | Path | None = None,
                 contour_interval: float = DEFAULT_CONTOUR_INTERVAL) -> dict[str, str]:
    """Write the requested artifacts and return the paths written."""
    written: dict[str, str] = {}
    if csv_path is not None:
        write_field_csv(fld, csv_path)
        written["csv"] = str(csv_path)
    if image_path is not None:
        render_field_image(fld, contour_interval).save(image_path)
        written["image"] = str(image_path)
    return written
