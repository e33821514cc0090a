"""radiantmap: mean radiant temperature mapping for indoor environments.

Fuses depth/thermal/pose frames into a thermal point cloud, extracts
planar surfaces and their thermal features, estimates view factors by
Monte Carlo ray casting, and evaluates MRT at points and over spatial
grids.
"""

from .errors import RadiantMapError
from .geometry import RigidTransform
from .scene import (
    ExtractionParams,
    Scene,
    Surface,
    ThermalFeature,
    ThermalPointCloud,
    extract_planar_surfaces,
    feature_temperature,
    load_scene,
    save_scene,
    surface_temperature,
)
from .viewfactor import (
    RayHit,
    ViewFactorSet,
    analytic_rectangle_view_factor,
    intersect_ray,
    sample_directions,
    view_factors,
)
from .mrt import GlobeReading, MRTResult, globe_mrt, mrt_at_point, mrt_from_view_factors
from .fusion import (
    CameraIntrinsics,
    CameraModel,
    FrameBundle,
    ICPParams,
    build_thermal_map,
    icp_align,
    load_cloud,
    register_thermal_to_depth,
    save_cloud,
)
from .segmentation import (
    Detection,
    InstanceTrack,
    associate,
    lift_detection,
    register_feature,
    register_features,
    vote_label,
)
from .field import MRTField, MRTGrid, compute_field, export_field, make_grid, read_field_csv

__version__ = "0.1.0"

__all__ = [
    "RadiantMapError",
    "RigidTransform",
    "ExtractionParams",
    "Scene",
    "Surface",
    "ThermalFeature",
    "ThermalPointCloud",
    "extract_planar_surfaces",
    "feature_temperature",
    "load_scene",
    "save_scene",
    "surface_temperature",
    "RayHit",
    "ViewFactorSet",
    "analytic_rectangle_view_factor",
    "intersect_ray",
    "sample_directions",
    "view_factors",
    "GlobeReading",
    "MRTResult",
    "globe_mrt",
    "mrt_at_point",
    "mrt_from_view_factors",
    "CameraIntrinsics",
    "CameraModel",
    "FrameBundle",
    "ICPParams",
    "build_thermal_map",
    "icp_align",
    "load_cloud",
    "register_thermal_to_depth",
    "save_cloud",
    "Detection",
    "InstanceTrack",
    "associate",
    "lift_detection",
    "register_feature",
    "register_features",
    "vote_label",
    "MRTField",
    "MRTGrid",
    "compute_field",
    "export_field",
    "make_grid",
    "read_field_csv",
]
