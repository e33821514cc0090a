"""Mean radiant temperature evaluation.

MRT is the fourth-power mean of region temperatures weighted by view
factors:

    mrt = (sum_i F_i * T_i^4 / sum_i F_i) ** (1/4)

normalized by sum(F), which keeps the result meaningful when a small
fraction of rays miss in open scenes.  The per-point pipeline casts rays
once with features tallied natively; an explicit-subtraction mode computes
featureless envelope view factors first and subtracts the feature view
factors from them, which must agree with the native tally.

The black-globe conversion provides the reference-instrument MRT from a
globe and an air temperature reading.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import (
    DegenerateGeometryError,
    IncompleteSceneError,
    InconsistentGeometryError,
    InvalidArgumentError,
)
from .scene import Scene
from .viewfactor import (
    DEFAULT_N_RAYS,
    DEFAULT_SEED,
    PreparedScene,
    ViewFactorSet,
    view_factors,
)

# Warn when the captured view-factor mass drops below this in open scenes.
LOW_COVERAGE_WARNING = 0.99

# Natural-convection coefficient of the standard black globe, kelvin units.
GLOBE_COEFFICIENT = 0.4e8


@dataclass(frozen=True)
class RegionContribution:
    """One region's share of the MRT sum."""

    view_factor: float
    temperature: float
    share: float


@dataclass(frozen=True)
class MRTResult:
    """MRT in kelvins plus the per-region breakdown and sampling metadata."""

    mrt: float
    contributions: dict[str, RegionContribution]
    n_rays: int | None = None
    seed: int | None = None
    mode: str = "direct"
    warnings: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "mrt_k": self.mrt,
            "contributions": {
                rid: {"view_factor": c.view_factor, "temperature_k": c.temperature,
                      "share": c.share}
                for rid, c in self.contributions.items()
            },
            "n_rays": self.n_rays,
            "seed": self.seed,
            "mode": self.mode,
            "warnings": list(self.warnings),
        }


@dataclass(frozen=True)
class GlobeReading:
    """Black-globe thermometer reading: globe and local air temperature, kelvins."""

    t_g: float
    t_a: float

    def __post_init__(self):
        for name, v in (("t_g", self.t_g), ("t_a", self.t_a)):
            if not (math.isfinite(v) and v > 0.0):
                raise InvalidArgumentError(f"{name} must be a finite temperature > 0 K, got {v}")


def mrt_from_view_factors(vfs: ViewFactorSet | Mapping[str, float],
                          temps: Mapping[str, float]) -> MRTResult:
    """Evaluate MRT from view factors and region temperatures.

    Accepts either a Monte Carlo ViewFactorSet or a plain mapping of region
    id to view factor (e.g. analytic values).  Every region with positive
    weight must have a temperature.
    """
    if isinstance(vfs, ViewFactorSet):
        entries = vfs.entries
        n_rays: int | None = vfs.n_rays
        seed: int | None = vfs.seed
        warnings = list(vfs.warnings)
    else:
        entries = dict(vfs)
        n_rays = seed = None
        warnings = []

    weighted: list[tuple[str, float, float]] = []
    for rid, f in entries.items():
        if f < 0.0:
            raise InvalidArgumentError(f"view factor of region {rid!r} is negative ({f})")
        if f == 0.0:
            continue
        if rid not in temps:
            raise IncompleteSceneError(rid)
        t = float(temps[rid])
        if not (math.isfinite(t) and t > 0.0):
            raise InvalidArgumentError(f"temperature of region {rid!r} must be > 0 K, got {t}")
        weighted.append((rid, float(f), t))

    sum_f = math.fsum(f for _, f, _ in weighted)
    if sum_f <= 0.0:
        raise DegenerateGeometryError("all view factors are zero; MRT is undefined")
    if sum_f < LOW_COVERAGE_WARNING:
        warnings.append(f"captured view-factor mass {sum_f:.4f} is below {LOW_COVERAGE_WARNING}")

    num = math.fsum(f * t ** 4 for _, f, t in weighted)
    mrt = (num / sum_f) ** 0.25
    contributions = {
        rid: RegionContribution(view_factor=f, temperature=t, share=f * t ** 4 / num)
        for rid, f, t in weighted
    }
    return MRTResult(mrt=mrt, contributions=contributions, n_rays=n_rays, seed=seed,
                     warnings=tuple(warnings))


def _subtract_view_factors(scene: Scene, envelope: ViewFactorSet,
                           full: ViewFactorSet) -> dict[str, float]:
    """Correct featureless envelope view factors by subtracting feature view factors.

    Works on integer ray counts when the two passes used the same ray
    budget, making the correction exact at matched seeds.
    """
    entries: dict[str, float] = {}
    same_budget = envelope.n_rays == full.n_rays
    for s in scene.surfaces:
        if same_budget:
            count = envelope.counts[s.id] - sum(full.counts[f.id] for f in s.features)
            if count < 0:
                raise InconsistentGeometryError(
                    f"feature view factors exceed the envelope view factor of {s.id!r}")
            entries[s.id] = count / envelope.n_rays
        else:
            corrected = envelope.entries[s.id] - math.fsum(
                full.entries[f.id] for f in s.features)
            if corrected < 0.0:
                raise InconsistentGeometryError(
                    f"feature view factors exceed the envelope view factor of {s.id!r}")
            entries[s.id] = corrected
        for f in s.features:
            entries[f.id] = full.entries[f.id]
    return entries


def mrt_at_point(point: np.ndarray, scene: Scene, n_rays: int = DEFAULT_N_RAYS,
                 seed: int = DEFAULT_SEED, mode: str = "native",
                 subtract_seed: int | None = None,
                 prepared: PreparedScene | None = None) -> MRTResult:
    """MRT at one point: view factors per envelope and feature, envelope
    correction, then the fourth-power mean.

    mode "native" tallies feature hits in the same ray pass as their
    envelopes, which realizes the envelope correction geometrically.
    mode "subtract" casts against the featureless scene first and then
    subtracts each feature's view factor from its envelope; with
    ``subtract_seed`` unset both passes share the seed and the two modes
    agree exactly.
    """
    temps = scene.region_temperatures()
    if mode == "native":
        prep = prepared if prepared is not None else PreparedScene(scene)
        vfs = view_factors(point, prep, n_rays=n_rays, seed=seed)
        result = mrt_from_view_factors(vfs, temps)
        return MRTResult(mrt=result.mrt, contributions=result.contributions,
                         n_rays=n_rays, seed=seed, mode="native",
                         warnings=result.warnings)
    if mode == "subtract":
        envelope = view_factors(point, scene.without_features(), n_rays=n_rays, seed=seed)
        full = view_factors(point, scene, n_rays=n_rays,
                            seed=seed if subtract_seed is None else subtract_seed)
        entries = _subtract_view_factors(scene, envelope, full)
        result = mrt_from_view_factors(entries, temps)
        return MRTResult(mrt=result.mrt, contributions=result.contributions,
                         n_rays=n_rays, seed=seed, mode="subtract",
                         warnings=result.warnings)
    raise InvalidArgumentError(f"unknown mode {mode!r}; expected 'native' or 'subtract'")


def globe_mrt(reading: GlobeReading) -> float:
    """MRT in kelvins from a black-globe reading.

        mrt = (t_g^4 + 0.4e8 * (t_g - t_a) * |t_g - t_a|^(1/4)) ** (1/4)

    The convective term is signed through (t_g - t_a) while the quarter
    root of the difference is taken on its magnitude.
    """
    dt = reading.t_g - reading.t_a
    radicand = reading.t_g ** 4 + GLOBE_COEFFICIENT * dt * abs(dt) ** 0.25
    if radicand < 0.0:
        raise InvalidArgumentError(
            "globe reading outside the validity range of the conversion "
            f"(t_g={reading.t_g}, t_a={reading.t_a})")
    return radicand ** 0.25
