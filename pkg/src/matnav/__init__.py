"""Motion-aware traversability: velocity-conditioned terrain cost maps,
self-supervised labelling, and sampling-based planning."""

__version__ = "0.1.0"

from .errors import (
    GoalNotReachedError,
    InvalidSpecError,
    MapFormatError,
    MapValidationError,
    MatNavError,
    OutOfBoundsError,
    ResampleError,
    UnderDeterminedFitError,
)
from .matmap import GaussianParams, MatMap, ParamBounds, eval_cost, query
from .terrain import HeightMap, TerrainSpec, VehicleGeometry, generate_terrain

__all__ = [
    "GaussianParams",
    "GoalNotReachedError",
    "HeightMap",
    "InvalidSpecError",
    "MapFormatError",
    "MapValidationError",
    "MatMap",
    "MatNavError",
    "OutOfBoundsError",
    "ParamBounds",
    "ResampleError",
    "TerrainSpec",
    "UnderDeterminedFitError",
    "VehicleGeometry",
    "eval_cost",
    "generate_terrain",
    "query",
]
