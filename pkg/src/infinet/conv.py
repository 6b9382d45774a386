"""Patch-based first-layer kernels.

Every patch ``x^(p)`` is fed to the same infinite layer (one Gaussian measure
over ``R^{d1}``, i.e. shared weights), giving the feature map
``phi_x = (f(<w, x^(1)>), ..., f(<w, x^(P)>))``. Its inner product is the sum
of the per-patch first-layer kernels.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .kernels import Activation, ScaleConvention, single_layer_kernel
from ._backend import backend

log = logging.getLogger(__name__)


class Aggregation(enum.Enum):
    SUM = "sum"
    MEAN = "mean"


def _pair(v) -> tuple[int, ...]:
    return tuple(int(t) for t in (v if isinstance(v, (tuple, list)) else (v,)))


@dataclass(frozen=True)
class PatchScheme:
    """Row-major patch layout over a flat or 2-D input.

    ``input_shape`` and ``patch_shape`` are ``(length,)`` or ``(height, width)``;
    ``stride`` is an int or a per-axis tuple.
    """

    input_shape: tuple
    patch_shape: tuple
    stride: tuple | int = 1
    aggregation: Aggregation = Aggregation.SUM

    def __post_init__(self):
        shape, patch = _pair(self.input_shape), _pair(self.patch_shape)
        stride = _pair(self.stride)
        if len(stride) == 1:
            stride = stride * len(shape)
        if len(shape) not in (1, 2) or len(patch) != len(shape) or len(stride) != len(shape):
            raise ConfigError("input, patch and stride must all be 1-D or all 2-D")
        if any(p < 1 or p > s for p, s in zip(patch, shape)) or any(st < 1 for st in stride):
            raise ConfigError(f"patch {patch} with stride {stride} does not fit input {shape}")
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "patch_shape", patch)
        object.__setattr__(self, "stride", stride)
        object.__setattr__(self, "aggregation", Aggregation(self.aggregation))

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def patch_size(self) -> int:
        return int(np.prod(self.patch_shape))

    @property
    def patch_count(self) -> int:
        return len(self.indices())

    def indices(self) -> np.ndarray:
        """``(P, d1)`` flat indices of every patch, patches in row-major order."""
        shape, patch, stride = self.input_shape, self.patch_shape, self.stride
        if len(shape) == 1:
            starts = range(0, shape[0] - patch[0] + 1, stride[0])
            return np.array([np.arange(s, s + patch[0]) for s in starts])
        h, w = shape
        ph, pw = patch
        grid = np.arange(h * w).reshape(h, w)
        return np.array([
            grid[r:r + ph, c:c + pw].ravel()
            for r in range(0, h - ph + 1, stride[0])
            for c in range(0, w - pw + 1, stride[1])
        ])

    def describe(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "patch_shape": list(self.patch_shape),
            "stride": list(self.stride),
            "aggregation": self.aggregation.value,
        }


def extract_patches(x, scheme: PatchScheme) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != scheme.input_size:
        raise DataError(f"input has {x.size} values, scheme expects {scheme.input_size}")
    return x[scheme.indices()]


def conv_single_layer_kernel(xi, xj, scheme: PatchScheme, activation: Activation = Activation.RELU,
                             scheme_j: PatchScheme | None = None) -> float:
    """Sum (or mean) over patches of the first-layer kernel of aligned patch pairs.

    Under Step, patch pairs where either patch is all zeros are skipped (they
    contribute the zero feature) and counted in the debug log.
    """
    if scheme_j is not None and scheme_j != scheme:
        raise ConfigError("both inputs must use the same patch scheme")
    pi, pj = extract_patches(xi, scheme), extract_patches(xj, scheme)
    total = 0.0
    skipped = 0
    for a, b in zip(pi, pj):
        if activation is Activation.STEP and (not a.any() or not b.any()):
            skipped += 1
            continue
        total += single_layer_kernel(a, b, activation, ScaleConvention.CANONICAL)
    if skipped:
        log.debug("skipped %d zero patch pairs", skipped)
    if scheme.aggregation is Aggregation.MEAN:
        total /= len(pi)
    return total


def conv_kernel_matrix(xa, xb, scheme: PatchScheme, activation: Activation) -> np.ndarray:
    """Patch kernel between all rows of ``xa`` and ``xb`` (``xb=None``: symmetric Gram)."""
    symmetric = xb is None
    xa = np.asarray(xa, dtype=np.float64)
    xb = xa if symmetric else np.asarray(xb, dtype=np.float64)
    for x in (xa, xb):
        if x.shape[1] != scheme.input_size:
            raise DataError(f"inputs have {x.shape[1]} values, scheme expects {scheme.input_size}")
    idx = scheme.indices()
    out = np.zeros((len(xa), len(xb)))
    skipped = 0
    for p in idx:
        pa = np.ascontiguousarray(xa[:, p])
        # the same object on both sides keeps numpy on the symmetric product, as in the flat Gram
        pb = pa if symmetric else np.ascontiguousarray(xb[:, p])
        sq_a = np.einsum("ij,ij->i", pa, pa)
        sq_b = sq_a if symmetric else np.einsum("ij,ij->i", pb, pb)
        # zero patches contribute the zero feature under Step
        keep_a, keep_b = sq_a > 0, sq_b > 0
        if activation is Activation.STEP:
            za, zb = int(np.count_nonzero(~keep_a)), int(np.count_nonzero(~keep_b))
            skipped += za * len(xb) + zb * len(xa) - za * zb
            sq_a_safe = np.where(keep_a, sq_a, 1.0)
            sq_b_safe = sq_a_safe if symmetric else np.where(keep_b, sq_b, 1.0)
        else:
            sq_a_safe, sq_b_safe = sq_a, sq_b
        block, _ = backend.analytic_kernel_matrix(
            np.ascontiguousarray(pa @ pb.T), sq_a_safe, sq_b_safe, activation.code, 1, 0.0, symmetric, 1e-6)
        if activation is Activation.STEP:
            block = block * np.outer(keep_a, keep_b)
        out += block
    if skipped:
        log.debug("skipped %d zero patch pairs", skipped)
    if scheme.aggregation is Aggregation.MEAN:
        out /= len(idx)
    return out
