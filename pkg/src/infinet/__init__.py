"""Kernels and learners for single- and two-layer infinite neural networks."""

from ._backend import NAME as BACKEND
from .kernels import (
    Activation,
    CovBlock,
    Estimator,
    GramMatrix,
    KernelSpec,
    ScaleConvention,
    bivariate_expectation,
    cross_gram,
    gram,
    h_relu,
    h_step,
    mc_oracle_pairwise,
    single_layer_kernel,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Activation",
    "CovBlock",
    "Estimator",
    "GramMatrix",
    "KernelSpec",
    "ScaleConvention",
    "bivariate_expectation",
    "cross_gram",
    "gram",
    "h_relu",
    "h_step",
    "mc_oracle_pairwise",
    "single_layer_kernel",
]
