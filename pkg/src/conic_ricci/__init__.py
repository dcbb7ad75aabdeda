"""Conformal Ricci flow laboratory on surfaces with asymptotically conical ends."""

__version__ = "0.1.0"

from .surface import (
    ConeEnd,
    ChartGrid,
    ModelSpec,
    ModelError,
    SurfaceModel,
    build_model,
    build_cone_fixture,
    chart_sync,
    laplacian_apply,
    scalar_curvature,
    total_curvature,
    geodesic_distance,
)

__all__ = [
    "ConeEnd",
    "ChartGrid",
    "ModelSpec",
    "ModelError",
    "SurfaceModel",
    "build_model",
    "build_cone_fixture",
    "chart_sync",
    "laplacian_apply",
    "scalar_curvature",
    "total_curvature",
    "geodesic_distance",
    "__version__",
]
