"""Two-layer stochastic kernels.

The second layer draws ``u ~ GP(0, C)`` over first-layer weight space, so the
pre-activations ``z_r = <phi_{x_r}, u>`` are jointly Gaussian with covariance

    Sigma_rs = E_{w1, w2 ~ N(0, I)} [ f(<w1, x_r>) C(w1, w2) f(<w2, x_s>) ]

and the kernel is ``E_{z ~ N(0, Sigma)}[f(z1) f(z2)]``. Three ways to get
``Sigma`` are provided:

* :func:`theorem1_sigma_mc` samples ``(w1, w2)`` directly (any covariance);
* :func:`two_layer_bochner` writes a shift-invariant ``C`` as a random cosine
  feature expectation and samples the 6-dimensional projection vector;
* :func:`two_layer_analytic_se` evaluates ``Sigma`` in closed form for the
  squared-exponential covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from . import mc
from .errors import ConfigError, DegenerateInputError
from .kernels import (
    Activation,
    CovBlock,
    Estimator,
    KernelSpec,
    _as_pair,
    _j_relu,
    _j_step,
    angle,
    bivariate_expectation,
    extended_expectation,
    mc_oracle_pairwise,
    single_layer_kernel,
)

SQRT2 = math.sqrt(2.0)


# ---------------------------------------------------------------------------
# GP covariance functions


@dataclass(frozen=True)
class BochnerSampler:
    """Random-feature representation ``C(w1, w2) = amplitude * E[g(<w1,w>+b) g(<w2,w>+b)]``.

    ``g(t) = sqrt(2) cos(t)``, ``b ~ U[0, 2 pi]`` and the frequency ``w`` is
    drawn from ``law``: ``"gaussian"`` (N(0, scale^2 I)), ``"cauchy"``
    (independent Cauchy(0, scale) coordinates) or ``"zero"`` (point mass at 0).
    """

    law: str
    scale: float = 1.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.law not in ("gaussian", "cauchy", "zero"):
            raise ConfigError(f"unknown frequency law {self.law!r}")

    def draw(self, rng: np.random.Generator, n: int, d: int):
        if self.law == "gaussian":
            w = self.scale * rng.standard_normal((n, d))
        elif self.law == "cauchy":
            # inverse CDF keeps the stream seed-deterministic
            w = self.scale * np.tan(np.pi * (rng.random((n, d)) - 0.5))
        else:
            w = np.zeros((n, d))
        b = 2.0 * np.pi * rng.random(n)
        return w, b

    @staticmethod
    def g(t):
        return SQRT2 * np.cos(t)


@dataclass(frozen=True)
class SquaredExponential:
    """``C(w1, w2) = (1 + 2 alpha)^(1 + d/2) exp(-alpha |w1 - w2|^2 / 2)``.

    The prefactor makes ``N(0,I) x N(0,I) x C`` a scaled Gaussian density in
    ``(w1, w2)``, which is what gives the closed form.
    """

    alpha: float
    kind = "se"
    shift_invariant = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("SquaredExponential alpha must be > 0")

    def amplitude(self, d: int) -> float:
        return (1.0 + 2.0 * self.alpha) ** (1.0 + d / 2.0)

    def __call__(self, w1, w2):
        w1, w2 = np.asarray(w1, dtype=np.float64), np.asarray(w2, dtype=np.float64)
        diff = w1 - w2
        sq = np.einsum("...i,...i->...", diff, diff)
        return self.amplitude(w1.shape[-1]) * np.exp(-0.5 * self.alpha * sq)

    def bochner_sampler(self, d: int) -> BochnerSampler:
        return BochnerSampler("gaussian", math.sqrt(self.alpha), self.amplitude(d))

    def describe(self) -> dict:
        return {"kind": self.kind, "alpha": self.alpha}


@dataclass(frozen=True)
class OrnsteinUhlenbeck:
    """``C(w1, w2) = exp(-|w1 - w2|_1)``; its spectral measure is a product of Cauchys."""

    kind = "ou"
    shift_invariant = True

    def __call__(self, w1, w2):
        diff = np.asarray(w1, dtype=np.float64) - np.asarray(w2, dtype=np.float64)
        return np.exp(-np.abs(diff).sum(axis=-1))

    def bochner_sampler(self, d: int) -> BochnerSampler:
        return BochnerSampler("cauchy", 1.0, 1.0)

    def describe(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Constant:
    value: float = 1.0
    kind = "constant"
    shift_invariant = True

    def __post_init__(self):
        if not self.value > 0:
            raise ConfigError("Constant covariance value must be > 0")

    def __call__(self, w1, w2):
        w1 = np.asarray(w1, dtype=np.float64)
        return np.full(w1.shape[:-1], self.value)

    def bochner_sampler(self, d: int) -> BochnerSampler:
        return BochnerSampler("zero", 1.0, self.value)

    def describe(self) -> dict:
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class Custom:
    """User covariance; ``evaluator(w1, w2)`` must broadcast over leading axes."""

    evaluator: Callable = field(compare=False)
    name: str = "custom"
    shift_invariant: bool = False
    sampler: BochnerSampler | None = None
    kind = "custom"

    def __call__(self, w1, w2):
        return np.asarray(self.evaluator(w1, w2), dtype=np.float64)

    def bochner_sampler(self, d: int) -> BochnerSampler:
        if self.sampler is None:
            raise ConfigError(f"custom covariance {self.name!r} has no Bochner sampler")
        return self.sampler

    def describe(self) -> dict:
        return {"kind": self.kind, "name": self.name}


# ---------------------------------------------------------------------------
# estimators


@dataclass
class DeepEstimate:
    """Kernel estimate with its covariance block and Monte-Carlo errors."""

    estimate: float
    stderr: float
    sigma: CovBlock
    sigma_stderr: np.ndarray
    repaired: bool = False


def _ordered(xi, xj):
    # canonical argument order makes every MC path exactly symmetric in (xi, xj)
    swap = tuple(xj) < tuple(xi)
    return (xj, xi, True) if swap else (xi, xj, False)


def _finish(moments: mc.Moments, activation: Activation, swapped: bool, repaired=False) -> DeepEstimate:
    s11, s12, s22 = moments.mean
    se = moments.stderr
    if swapped:
        s11, s22 = s22, s11
        se = se[::-1]
    sigma = CovBlock.from_entries(s11, s12, s22)
    est = bivariate_expectation(sigma, activation)
    stderr = moments.jackknife_stderr(lambda m: extended_expectation(*m, activation))
    sigma_se = np.array([[se[0], se[1]], [se[1], se[2]]])
    return DeepEstimate(est, stderr, sigma, sigma_se, repaired)


def theorem1_sigma_mc(xi, xj, covariance, activation: Activation, n_samples: int, seed,
                      n_shards: int = mc.DEFAULT_SHARDS) -> DeepEstimate:
    """Estimate ``Sigma`` by sampling independent ``w1, w2 ~ N(0, I)``.

    All three entries share the same draws. The returned estimate is the
    kernel evaluated on the averaged block, with a jackknife stderr.
    """
    xi, xj = _as_pair(xi, xj)
    a, b, swapped = _ordered(xi, xj)
    basis = np.stack([a, b], axis=1)
    d = len(a)

    def draw(rng, k):
        w1 = rng.standard_normal((k, d))
        w2 = rng.standard_normal((k, d))
        f1 = activation(w1 @ basis)
        f2 = activation(w2 @ basis)
        c = covariance(w1, w2)
        return np.stack([f1[:, 0] * c * f2[:, 0], f1[:, 0] * c * f2[:, 1], f1[:, 1] * c * f2[:, 1]], axis=1)

    return _finish(mc.sharded_moments(draw, n_samples, seed, n_shards), activation, swapped)


def analytic_se_sigma(xi, xj, activation: Activation, alpha: float) -> CovBlock:
    """Closed-form ``Sigma`` for the squared-exponential covariance.

    ReLU entries are ``h_relu(sqrt(1+a)|x_r|, sqrt(1+a)|x_s|, a/(1+a) rho_rs)``.
    Step entries are ``(1+2a) h_step(a/(1+a) rho_rs)``; the ``(1+2a)`` factor is
    the true scale of ``Sigma`` and cancels in the outer correlation.
    """
    xi, xj = _as_pair(xi, xj)
    if alpha <= 0:
        raise ConfigError("alpha must be > 0")
    ni, nj = np.linalg.norm(xi), np.linalg.norm(xj)
    if ni == 0 or nj == 0:
        raise DegenerateInputError("two-layer SE kernel needs nonzero inputs")
    r0 = alpha / (1.0 + alpha)
    rho = math.cos(angle(xi, xj))
    if activation is Activation.RELU:
        a = 1.0 + alpha
        return CovBlock.from_entries(a * ni * ni * _j_relu(r0), a * ni * nj * _j_relu(r0 * rho),
                                     a * nj * nj * _j_relu(r0))
    scale = 1.0 + 2.0 * alpha
    diag = scale * _j_step(r0)
    return CovBlock.from_entries(diag, scale * _j_step(r0 * rho), diag)


def two_layer_analytic_se(xi, xj, activation: Activation, alpha: float) -> float:
    return bivariate_expectation(analytic_se_sigma(xi, xj, activation, alpha), activation)


def _sqrt_psd(mats: np.ndarray):
    """Symmetric square roots of a batch of PSD matrices, flooring eigenvalues at 0."""
    vals, vecs = np.linalg.eigh(mats)
    scale = np.maximum(np.abs(vals).max(axis=-1), 1.0)
    repaired = bool(np.any(vals < -1e-10 * scale[:, None]))
    root = np.sqrt(np.maximum(vals, 0.0))
    return (vecs * root[:, None, :]) @ np.swapaxes(vecs, -1, -2), repaired


def bochner_projection_draw(rng, xi, xj, sampler: BochnerSampler, k: int):
    """Sample ``k`` draws of ``(w, b, z_hat)``.

    ``z_hat`` has shape ``(k, 6)`` and covariance ``Gram(xi, w, xj) (x) I_2``,
    ordered ``(<w1,xi>, <w2,xi>, <w1,w>, <w2,w>, <w1,xj>, <w2,xj>)``.
    """
    d = len(xi)
    w, b = sampler.draw(rng, k, d)
    g3 = np.empty((k, 3, 3))
    g3[:, 0, 0] = xi @ xi
    g3[:, 2, 2] = xj @ xj
    g3[:, 0, 2] = g3[:, 2, 0] = xi @ xj
    g3[:, 0, 1] = g3[:, 1, 0] = w @ xi
    g3[:, 2, 1] = g3[:, 1, 2] = w @ xj
    g3[:, 1, 1] = np.einsum("ij,ij->i", w, w)
    root, repaired = _sqrt_psd(g3)
    z = root @ rng.standard_normal((k, 3, 2))
    return w, b, z.reshape(k, 6), repaired


def two_layer_bochner(xi, xj, activation: Activation, sampler: BochnerSampler, n_samples: int,
                      seed, n_shards: int = mc.DEFAULT_SHARDS) -> DeepEstimate:
    """Estimate the two-layer kernel of a shift-invariant GP via random cosine features."""
    xi, xj = _as_pair(xi, xj)
    a, bvec, swapped = _ordered(xi, xj)
    flags = []

    def draw(rng, k):
        _, phase, z, repaired = bochner_projection_draw(rng, a, bvec, sampler, k)
        flags.append(repaired)
        c = sampler.amplitude * sampler.g(z[:, 2] + phase) * sampler.g(z[:, 3] + phase)
        f = activation(z)
        return np.stack([f[:, 0] * f[:, 1] * c, f[:, 0] * f[:, 5] * c, f[:, 4] * f[:, 5] * c], axis=1)

    moments = mc.sharded_moments(draw, n_samples, seed, n_shards)
    return _finish(moments, activation, swapped, repaired=any(flags))


@dataclass
class IdentityReport:
    """Per-pair comparison of a Bochner sampler against its covariance."""

    estimates: np.ndarray
    targets: np.ndarray
    stderrs: np.ndarray
    z_scores: np.ndarray

    @property
    def fraction_outside(self) -> float:
        return float(np.mean(np.abs(self.z_scores) > 3.0))

    def passed(self, max_fraction: float = 0.01) -> bool:
        return self.fraction_outside <= max_fraction


def covariance_identity_check(sampler: BochnerSampler, covariance, n_pairs: int, n_samples: int,
                              seed, dim: int = 3, spread: float = 0.5, pairs=None) -> IdentityReport:
    """Check ``amplitude * E[g(<w1,w>+b) g(<w2,w>+b)] == C(w1, w2)`` on random pairs.

    Pairs are ``w1, w2 ~ N(0, spread^2 I_dim)`` unless given explicitly as an
    array of shape ``(n_pairs, 2, dim)``.
    """
    root = np.random.SeedSequence(seed)
    pair_seed, sample_seed = root.spawn(2)
    if pairs is None:
        pairs = spread * np.random.default_rng(pair_seed).standard_normal((n_pairs, 2, dim))
    pairs = np.asarray(pairs, dtype=np.float64)
    est, se, tgt = [], [], []
    for (w1, w2), child in zip(pairs, sample_seed.spawn(len(pairs))):
        def draw(rng, k, w1=w1, w2=w2):
            w, b = sampler.draw(rng, k, len(w1))
            return sampler.amplitude * sampler.g(w @ w1 + b) * sampler.g(w @ w2 + b)

        m = mc.sharded_moments(draw, n_samples, child)
        est.append(m.mean[0])
        se.append(m.stderr[0])
        tgt.append(float(covariance(w1, w2)))
    est, se, tgt = map(np.asarray, (est, se, tgt))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(se > 0, (est - tgt) / np.where(se > 0, se, 1.0), np.where(est == tgt, 0.0, np.inf))
    return IdentityReport(est, tgt, se, z)


def se_density_identity(w1, w2, alpha: float):
    """Both sides of ``g_I(w1) g_I(w2) C(w1,w2) = (1+2a) N((w1,w2); 0, S)``.

    ``S = [[1+a, a], [a, 1+a]] / (1+2a)`` tensored with ``I_d``. The left side
    is evaluated from its factors, the right via scipy's multivariate normal.
    """
    w1, w2 = np.asarray(w1, dtype=np.float64), np.asarray(w2, dtype=np.float64)
    d = len(w1)
    cov = SquaredExponential(alpha)
    lhs = stats.norm.pdf(w1).prod() * stats.norm.pdf(w2).prod() * float(cov(w1, w2))
    block = np.array([[1 + alpha, alpha], [alpha, 1 + alpha]]) / (1 + 2 * alpha)
    rhs = (1 + 2 * alpha) * stats.multivariate_normal(np.zeros(2 * d), np.kron(block, np.eye(d))).pdf(
        np.concatenate([w1, w2]))
    return lhs, float(rhs)


def kernel_value(xi, xj, spec: KernelSpec, seed=None) -> float:
    """Evaluate ``spec`` on one pair; MC paths use ``seed`` (defaults to ``spec.seed``)."""
    seed = spec.seed if seed is None else seed
    factor = spec.scale_convention.factor(spec.activation)
    if spec.patches is not None:
        from .conv import conv_single_layer_kernel

        return conv_single_layer_kernel(xi, xj, spec.patches, spec.activation) * factor
    if spec.depth == 1:
        if spec.estimator is Estimator.ANALYTIC:
            return single_layer_kernel(xi, xj, spec.activation, spec.scale_convention)
        est, _ = mc_oracle_pairwise(xi, xj, spec.activation, spec.mc_samples, seed, spec.n_shards)
        return est * factor
    if spec.estimator is Estimator.ANALYTIC:
        return two_layer_analytic_se(xi, xj, spec.activation, spec.covariance.alpha) * factor
    if spec.estimator is Estimator.THEOREM1_MC:
        res = theorem1_sigma_mc(xi, xj, spec.covariance, spec.activation, spec.mc_samples, seed, spec.n_shards)
    else:
        sampler = spec.covariance.bochner_sampler(len(np.ravel(xi)))
        res = two_layer_bochner(xi, xj, spec.activation, sampler, spec.mc_samples, seed, spec.n_shards)
    return res.estimate * factor


def kernel_estimate(xi, xj, spec: KernelSpec, seed=None) -> tuple[float, float]:
    """Like :func:`kernel_value` but also returns a standard error (0 for closed forms)."""
    seed = spec.seed if seed is None else seed
    factor = spec.scale_convention.factor(spec.activation)
    if spec.estimator is Estimator.ANALYTIC or spec.patches is not None:
        return kernel_value(xi, xj, spec, seed), 0.0
    if spec.depth == 1:
        est, se = mc_oracle_pairwise(xi, xj, spec.activation, spec.mc_samples, seed, spec.n_shards)
        return est * factor, se * factor
    if spec.estimator is Estimator.THEOREM1_MC:
        res = theorem1_sigma_mc(xi, xj, spec.covariance, spec.activation, spec.mc_samples, seed, spec.n_shards)
    else:
        sampler = spec.covariance.bochner_sampler(len(np.ravel(xi)))
        res = two_layer_bochner(xi, xj, spec.activation, sampler, spec.mc_samples, seed, spec.n_shards)
    return res.estimate * factor, res.stderr * factor
