"""Articulated volumetric deformations with kinematic-tree log-Euclidean blending."""

from .deform import (KTPOLYRIGID, LBS, METHODS, POLYRIGID, DeformationField, eval_ktpolyrigid, eval_lbs,
                     eval_polyrigid, invert_field, resample_image, resample_labels, sample_dense)
from .errors import (BranchAmbiguity, DataError, DimensionMismatch, KTPRError, LeftDomain, NumericalError,
                     OnSurface)
from .kinematics import KinematicTree, ShapeBasis, forward_kinematics
from .lie import RigidTransform, Twist, se3_exp, se3_log
from .mesh import SurfaceMesh
from .metrics import RegularityReport, compare_methods, jacobian_determinant, regularity_report
from .volume import GridSpec, VolumeGrid
from .weights import WeightField, solve_mesh_weights, solve_weights

__version__ = "0.1.0"
