"""Orientation distribution features for point clouds, with a small numpy classifier."""

from .alignment import ALIGNMENT_MODES, Frame, compute_frames, pivot_ri_xy, pivot_ri_xyz
from .errors import DegenerateCloudError, NonFiniteLossError, OdfError, ParseError
from .features import ConeBank, ODFField, default_cone_bank, odf_brute_force, odf_cloud, odf_point
from .geometry import (DirectionSet, KnnIndex, PointCloud, build_knn_index, icosphere_directions,
                       knn, normalize_to_unit_sphere)

__version__ = "0.1.0"

__all__ = [
    "ALIGNMENT_MODES", "Frame", "compute_frames", "pivot_ri_xy", "pivot_ri_xyz",
    "DegenerateCloudError", "NonFiniteLossError", "OdfError", "ParseError",
    "ConeBank", "ODFField", "default_cone_bank", "odf_brute_force", "odf_cloud", "odf_point",
    "DirectionSet", "KnnIndex", "PointCloud", "build_knn_index", "icosphere_directions", "knn",
    "normalize_to_unit_sphere",
]
