"""Functional tensor regression with a low-Tucker-rank coefficient, fitted by
Riemannian Gauss-Newton iterations under a roughness penalty."""

from .manifold import TangentCoords, TangentFrame, manifold_dim
from .selection import (
    SelectionReport,
    gcv,
    kfold_cv,
    rise,
    select_rank,
    select_rho,
)
from .simulate import SimConfig, SimDataset, SimTruth, gen_dataset, gen_truth
from .solver import FitConfig, FitResult, RegressionData, fit, gn_step, profiled_fit
from .spline import Grid, SplineSystem, midpoint_grid
from .tensor import TuckerTensor, matricize, mode_product, tensorize, thosvd

__version__ = "0.1.0"

__all__ = [
    "FitConfig", "FitResult", "Grid", "RegressionData", "SelectionReport", "SimConfig", "SimDataset",
    "SimTruth", "SplineSystem", "TangentCoords", "TangentFrame", "TuckerTensor", "fit", "gcv",
    "gen_dataset", "gen_truth", "gn_step", "kfold_cv", "manifold_dim", "matricize", "midpoint_grid",
    "mode_product", "profiled_fit", "rise", "select_rank", "select_rho", "tensorize", "thosvd",
]
