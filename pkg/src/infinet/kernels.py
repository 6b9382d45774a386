"""Single-layer infinite-network kernels and the bivariate Gaussian primitives.

All closed forms are exact expectations under the standard Gaussian measure
over first-layer weights::

    k_f(x, y) = E_{w ~ N(0, I)} [ f(<x, w>) f(<y, w>) ]

For a zero-mean bivariate Gaussian with standard deviations ``s1, s2`` and
correlation ``rho`` (``theta = arccos(rho)``)::

    E[relu(z1) relu(z2)] = s1 s2 / (2 pi) * (sin(theta) + (pi - theta) rho)
    E[step(z1) step(z2)] = (pi - theta) / (2 pi)

The ``PAPER_PRINTED`` scale convention multiplies the final kernel value by a
constant (2 for ReLU, 2 pi for Step) so that values line up with the
unnormalised forms commonly printed in the literature.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import mc
from ._backend import backend
from .errors import (
    ClampWarning,
    ConfigError,
    DataError,
    DegenerateInputError,
    DomainError,
    NonPSDError,
    NumericError,
)

CLAMP_TOL = 1e-6


class Activation(enum.Enum):
    RELU = "relu"
    STEP = "step"

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self is Activation.RELU:
            return np.maximum(t, 0.0)
        return (t >= 0).astype(np.float64)

    @property
    def code(self) -> int:
        return 0 if self is Activation.RELU else 1


class Estimator(enum.Enum):
    ANALYTIC = "analytic"
    THEOREM1_MC = "theorem1"
    BOCHNER_MC = "bochner"


class ScaleConvention(enum.Enum):
    CANONICAL = "canonical"
    PAPER_PRINTED = "paper"

    def factor(self, activation: Activation) -> float:
        if self is ScaleConvention.CANONICAL:
            return 1.0
        return 2.0 if activation is Activation.RELU else 2.0 * math.pi


@dataclass(frozen=True)
class KernelSpec:
    """Which kernel to evaluate and how.

    ``covariance`` is a :mod:`infinet.deep` covariance and is required for
    depth 2. ``patches`` switches to the patch-sum (convolutional) first-layer
    kernel and is only valid at depth 1.
    """

    activation: Activation = Activation.RELU
    depth: int = 1
    covariance: Any = None
    estimator: Estimator = Estimator.ANALYTIC
    scale_convention: ScaleConvention = ScaleConvention.CANONICAL
    mc_samples: int = 100_000
    seed: int = 0
    n_shards: int = mc.DEFAULT_SHARDS
    patches: Any = None

    def __post_init__(self):
        if self.depth not in (1, 2):
            raise ConfigError(f"depth must be 1 or 2, got {self.depth}")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be >= 1")
        if self.depth == 2:
            if self.covariance is None:
                raise ConfigError("depth-2 kernels need a GP covariance")
            if self.estimator is Estimator.ANALYTIC and self.covariance.kind != "se":
                raise ConfigError("the analytic depth-2 path requires a SquaredExponential covariance")
            if self.estimator is Estimator.BOCHNER_MC and not self.covariance.shift_invariant:
                raise ConfigError("the Bochner estimator requires a shift-invariant covariance")
            if self.patches is not None:
                raise ConfigError("patch kernels are first-layer only")
        elif self.estimator is Estimator.BOCHNER_MC:
            raise ConfigError("the Bochner estimator applies to depth-2 kernels only")

    def describe(self) -> dict:
        d = {
            "activation": self.activation.value,
            "depth": self.depth,
            "estimator": self.estimator.value,
            "scale_convention": self.scale_convention.value,
        }
        if self.depth == 2:
            d["covariance"] = self.covariance.describe()
        if self.estimator is not Estimator.ANALYTIC:
            d.update(mc_samples=self.mc_samples, seed=self.seed, n_shards=self.n_shards)
        if self.patches is not None:
            d["patches"] = self.patches.describe()
        return d

    def fingerprint(self) -> str:
        blob = json.dumps(self.describe(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:32]


@dataclass(frozen=True)
class CovBlock:
    """A 2x2 covariance matrix ``[[s11, s12], [s12, s22]]``."""

    s11: float
    s12: float
    s22: float
    clamped: bool = False

    @classmethod
    def from_entries(cls, s11, s12, s22, tol: float = CLAMP_TOL) -> "CovBlock":
        """Build a valid block, clamping negative variances and |rho| > 1."""
        s11, s12, s22 = float(s11), float(s12), float(s22)
        if not all(map(math.isfinite, (s11, s12, s22))):
            raise NumericError(f"non-finite covariance entries ({s11}, {s12}, {s22})")
        clamped = False
        if s11 < 0 or s22 < 0:
            clamped = True
            s11, s22 = max(s11, 0.0), max(s22, 0.0)
        bound = math.sqrt(s11 * s22)
        if abs(s12) > bound:
            if abs(s12) > bound * (1 + tol):
                clamped = True
            s12 = math.copysign(bound, s12)
        return cls(s11, s12, s22, clamped)

    @classmethod
    def from_matrix(cls, m) -> "CovBlock":
        m = np.asarray(m, dtype=np.float64)
        return cls.from_entries(m[0, 0], 0.5 * (m[0, 1] + m[1, 0]), m[1, 1])

    def as_array(self) -> np.ndarray:
        return np.array([[self.s11, self.s12], [self.s12, self.s22]])

    @property
    def rho(self) -> float:
        d = self.s11 * self.s22
        return self.s12 / math.sqrt(d) if d > 0 else 0.0


def _clamp_rho(rho):
    rho = np.asarray(rho, dtype=np.float64)
    excess = np.abs(rho) - 1.0
    if np.any(excess > CLAMP_TOL):
        warnings.warn(
            f"correlation outside [-1, 1] by {float(np.max(excess)):.2e}; clamped",
            ClampWarning,
            stacklevel=3,
        )
    return np.clip(rho, -1.0, 1.0)


def _j_relu(rho):
    theta = np.arccos(rho)
    return (np.sin(theta) + (np.pi - theta) * rho) / (2 * np.pi)


def _j_step(rho):
    return (np.pi - np.arccos(rho)) / (2 * np.pi)


def h_relu(sigma1, sigma2, rho):
    """``E[relu(z1) relu(z2)]`` for stdevs ``sigma1, sigma2`` and correlation ``rho``.

    Vectorised over array arguments; returns a float for scalar input.
    """
    s1 = np.asarray(sigma1, dtype=np.float64)
    s2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(s1 < 0) or np.any(s2 < 0):
        raise DomainError("standard deviations must be non-negative")
    out = s1 * s2 * _j_relu(_clamp_rho(rho))
    return float(out) if out.ndim == 0 else out


def h_step(rho):
    """``P(z1 >= 0, z2 >= 0)`` for a standard bivariate normal with correlation ``rho``."""
    rho = np.asarray(rho, dtype=np.float64)
    if not np.all(np.isfinite(rho)):
        raise DomainError("correlation must be finite")
    out = _j_step(_clamp_rho(rho))
    return float(out) if out.ndim == 0 else out


def _as_pair(xi, xj):
    xi = np.asarray(xi, dtype=np.float64).ravel()
    xj = np.asarray(xj, dtype=np.float64).ravel()
    if xi.shape != xj.shape:
        raise DataError(f"dimension mismatch: {xi.shape[0]} vs {xj.shape[0]}")
    return xi, xj


def correlation(xi, xj) -> float:
    ni, nj = np.linalg.norm(xi), np.linalg.norm(xj)
    if ni == 0 or nj == 0:
        return 0.0
    return float(_clamp_rho(np.dot(xi, xj) / (ni * nj)))


def angle(xi, xj) -> float:
    """Angle between two nonzero vectors, accurate near 0 and pi.

    Uses ``2 atan2(|u - v|, |u + v|)`` on the unit vectors; ``arccos`` of a
    rounded correlation loses half the digits there.
    """
    xi, xj = _as_pair(xi, xj)
    u, v = xi / np.linalg.norm(xi), xj / np.linalg.norm(xj)
    return float(2.0 * np.arctan2(np.linalg.norm(u - v), np.linalg.norm(u + v)))


def single_layer_kernel(
    xi,
    xj,
    activation: Activation = Activation.RELU,
    scale_convention: ScaleConvention = ScaleConvention.CANONICAL,
) -> float:
    """Closed-form first-layer kernel ``E_w[f(<xi,w>) f(<xj,w>)]``."""
    xi, xj = _as_pair(xi, xj)
    ni, nj = np.linalg.norm(xi), np.linalg.norm(xj)
    if activation is Activation.STEP:
        if ni == 0 or nj == 0:
            raise DegenerateInputError("step kernel is undefined for a zero vector")
        value = (math.pi - angle(xi, xj)) / (2 * math.pi)
    elif ni == 0 or nj == 0:
        value = 0.0
    else:
        theta = angle(xi, xj)
        value = ni * nj * (math.sin(theta) + (math.pi - theta) * math.cos(theta)) / (2 * math.pi)
    return value * scale_convention.factor(activation)


def mc_oracle_pairwise(xi, xj, activation: Activation, n_samples: int, seed,
                       n_shards: int = mc.DEFAULT_SHARDS) -> tuple[float, float]:
    """Plain Monte-Carlo estimate of the first-layer kernel.

    Draws ``w ~ N(0, I_d)`` and averages ``f(<xi,w>) f(<xj,w>)``.
    Returns ``(estimate, stderr)`` with ``stderr = sample std / sqrt(n)``.
    """
    xi, xj = _as_pair(xi, xj)
    basis = np.stack([xi, xj], axis=1)

    def draw(rng, k):
        proj = activation(rng.standard_normal((k, len(xi))) @ basis)
        return proj[:, 0] * proj[:, 1]

    m = mc.sharded_moments(draw, n_samples, seed, n_shards)
    return float(m.mean[0]), float(m.stderr[0])


def bivariate_expectation(sigma: CovBlock, activation: Activation) -> float:
    """``E[f(z1) f(z2)]`` for ``z ~ N(0, sigma)``.

    Degenerate blocks: ReLU gives 0 when either variance is 0. Under Step a
    zero-variance coordinate is identically 0 and ``step(0) = 1``, so the
    value is ``P(other >= 0)``: 1/2, or 1 when both variances vanish.
    """
    if not all(map(math.isfinite, (sigma.s11, sigma.s12, sigma.s22))):
        raise NumericError("non-finite covariance block")
    if sigma.s11 < 0 or sigma.s22 < 0:
        raise DomainError("negative variance in covariance block")
    d = sigma.s11 * sigma.s22
    if activation is Activation.RELU:
        if d == 0:
            return 0.0
        return h_relu(math.sqrt(sigma.s11), math.sqrt(sigma.s22), sigma.rho)
    if d == 0:
        return 1.0 if sigma.s11 == 0 and sigma.s22 == 0 else 0.5
    return h_step(sigma.rho)


def extended_expectation(s11: float, s12: float, s22: float, activation: Activation) -> float:
    """:func:`bivariate_expectation` continued past ``|rho| = 1`` by point reflection.

    Inside the valid region this is the ordinary value. Beyond it,
    ``k(1 + t) = 2 k(1) - k(1 - t)``, which is continuous and monotone, so
    resampling error estimates of a block that sits at the boundary stay
    honest instead of collapsing to zero. Only used for standard errors.
    """
    s11, s22 = max(s11, 0.0), max(s22, 0.0)
    d = s11 * s22
    if d == 0:
        return bivariate_expectation(CovBlock(s11, 0.0, s22), activation)
    root = math.sqrt(d)
    rho = s12 / root
    if abs(rho) <= 1.0:
        return bivariate_expectation(CovBlock(s11, s12, s22), activation)
    edge = math.copysign(1.0, rho)
    mirror = edge * max(2.0 - abs(rho), -1.0)
    inside = bivariate_expectation(CovBlock(s11, edge * root, s22), activation)
    return 2.0 * inside - bivariate_expectation(CovBlock(s11, mirror * root, s22), activation)


# ---------------------------------------------------------------------------
# Gram matrices


@dataclass
class GramMatrix:
    """Kernel values plus the fingerprint of the spec that produced them.

    Square and symmetric when built by :func:`gram`; rectangular (test rows
    against training columns) when built by :func:`cross_gram`.
    """

    values: np.ndarray
    fingerprint: str
    scale: float = 1.0
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    def rescaled(self, factor: float) -> "GramMatrix":
        """Multiply by ``factor``; the fingerprint records the cumulative scale."""
        scale = self.scale * factor
        base = self.meta.get("base_fingerprint", self.fingerprint)
        fp = base if scale == 1.0 else hashlib.sha256(f"{base}*{scale!r}".encode()).hexdigest()[:32]
        return GramMatrix(self.values * factor, fp, scale, {**self.meta, "base_fingerprint": base})

    def submatrix(self, rows, cols=None) -> "GramMatrix":
        rows = np.asarray(rows)
        cols = rows if cols is None else np.asarray(cols)
        return GramMatrix(self.values[np.ix_(rows, cols)], self.fingerprint, self.scale, dict(self.meta))

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.values)[0])

    def check_psd(self, rel_tol: float = 1e-8) -> float:
        """Return the minimum eigenvalue; raise :class:`NonPSDError` below ``-rel_tol * trace``."""
        lo = self.min_eigenvalue()
        tol = rel_tol * max(float(np.trace(self.values)), np.finfo(float).tiny)
        if lo < -tol:
            raise NonPSDError(lo, tol)
        return lo


def _instances(data) -> np.ndarray:
    x = np.asarray(getattr(data, "instances", data), dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or len(x) == 0:
        raise DataError("expected a non-empty (n, d) array of instances")
    return x


def _analytic_block(xa, xb, spec: KernelSpec, symmetric: bool) -> np.ndarray:
    sq_a = np.einsum("ij,ij->i", xa, xa)
    sq_b = sq_a if symmetric else np.einsum("ij,ij->i", xb, xb)
    if spec.activation is Activation.STEP:
        for name, sq in (("row", sq_a), ("column", sq_b)):
            bad = np.flatnonzero(sq == 0)
            if len(bad):
                raise DegenerateInputError(f"step kernel undefined: zero vector at {name} index {bad[0]}")
    dots = xa @ xb.T
    alpha = float(spec.covariance.alpha) if spec.depth == 2 else 0.0
    out, n_clamped = backend.analytic_kernel_matrix(
        np.ascontiguousarray(dots), sq_a, sq_b, spec.activation.code, spec.depth, alpha,
        symmetric, CLAMP_TOL,
    )
    if n_clamped:
        warnings.warn(f"{n_clamped} correlations clamped beyond {CLAMP_TOL}", ClampWarning, stacklevel=3)
    return out


def _pairwise_block(xa, xb, spec: KernelSpec, symmetric: bool) -> np.ndarray:
    from .deep import kernel_value

    out = np.empty((len(xa), len(xb)))
    for i in range(len(xa)):
        for j in range(i if symmetric else 0, len(xb)):
            try:
                out[i, j] = kernel_value(xa[i], xb[j], spec, seed=(spec.seed, i, j))
            except NumericError as exc:
                raise type(exc)(f"{exc} (pair {i}, {j})") from exc
            if symmetric:
                out[j, i] = out[i, j]
    return out


def _block(xa, xb, spec: KernelSpec, symmetric: bool) -> np.ndarray:
    if spec.patches is not None:
        from .conv import conv_kernel_matrix

        return conv_kernel_matrix(xa, None if symmetric else xb, spec.patches, spec.activation) \
            * spec.scale_convention.factor(spec.activation)
    if spec.estimator is Estimator.ANALYTIC:
        return _analytic_block(xa, xb, spec, symmetric) * spec.scale_convention.factor(spec.activation)
    return _pairwise_block(xa, xb, spec, symmetric)


def gram(dataset, spec: KernelSpec) -> GramMatrix:
    """Symmetric Gram matrix of ``spec`` over the instances of ``dataset``.

    Only the upper triangle is evaluated; the lower triangle is a copy, so the
    result is exactly symmetric.
    """
    x = _instances(dataset)
    values = _block(x, x, spec, symmetric=True)
    return GramMatrix(values, spec.fingerprint(), meta={"spec": spec.describe()})


def cross_gram(rows, cols, spec: KernelSpec) -> GramMatrix:
    """Kernel values between ``rows`` (e.g. test points) and ``cols`` (training points)."""
    xa, xb = _instances(rows), _instances(cols)
    if xa.shape[1] != xb.shape[1]:
        raise DataError(f"dimension mismatch: {xa.shape[1]} vs {xb.shape[1]}")
    return GramMatrix(_block(xa, xb, spec, symmetric=False), spec.fingerprint(),
                      meta={"spec": spec.describe()})
