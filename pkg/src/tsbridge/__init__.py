"""Gaussian Schrödinger bridges with topology-aware reference SDEs."""

from .dynamics import (
    ReferenceDynamics,
    general_linear,
    heterogeneous,
    tsheat_bm,
    tsheat_ve,
    tsheat_vp,
)
from .gp import GPKernelSpec, gp_covariance, sample_gp
from .gtsb import GTSBridge, StaticCoupling, classical_eot_coupling, marginal, solve_static
from .measures import GaussianMeasure
from .metrics import bures_wasserstein, empirical_wasserstein, gaussian_kl
from .sim import TimeGrid, TrajectoryEnsemble, simulate_gtsb
from .spectral import (
    CoefficientSchedule,
    SpectralOperator,
    eigendecompose,
    fractional_power,
    matrix_function,
)
from .topology import LaplacianSpec, SimplicialComplex2, build_complex, laplacian

__version__ = "0.1.0"

__all__ = [
    "CoefficientSchedule",
    "GPKernelSpec",
    "GTSBridge",
    "GaussianMeasure",
    "LaplacianSpec",
    "ReferenceDynamics",
    "SimplicialComplex2",
    "SpectralOperator",
    "StaticCoupling",
    "TimeGrid",
    "TrajectoryEnsemble",
    "build_complex",
    "bures_wasserstein",
    "classical_eot_coupling",
    "eigendecompose",
    "fractional_power",
    "empirical_wasserstein",
    "gaussian_kl",
    "general_linear",
    "gp_covariance",
    "heterogeneous",
    "laplacian",
    "marginal",
    "matrix_function",
    "sample_gp",
    "simulate_gtsb",
    "solve_static",
    "tsheat_bm",
    "tsheat_ve",
    "tsheat_vp",
]
