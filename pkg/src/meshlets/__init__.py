"""Surface reconstruction from point clouds with learned local meshlet priors."""

from .mesh import PointCloud, TriMesh, validate_watertight
from .pipeline import ReconConfig, reconstruct

__all__ = ["PointCloud", "ReconConfig", "TriMesh", "reconstruct", "validate_watertight"]
__version__ = "0.1.0"
