import logging
import math

import numpy as np
import pytest

from infinet import Activation, KernelSpec, ScaleConvention, gram, single_layer_kernel
from infinet.conv import Aggregation, PatchScheme, conv_kernel_matrix, conv_single_layer_kernel, extract_patches
from infinet.errors import ConfigError, DataError
from infinet.kernels import mc_oracle_pairwise

RELU, STEP = Activation.RELU, Activation.STEP


def test_flat_patches_stride_two():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    p = extract_patches(x, PatchScheme((4,), (2,), 2))
    assert p.tolist() == [[1.0, 2.0], [3.0, 4.0]]


def test_whole_input_patch():
    x = np.arange(6.0)
    for stride in (1, 3, 7):
        scheme = PatchScheme((6,), (6,), stride)
        assert scheme.patch_count == 1
        assert np.array_equal(extract_patches(x, scheme)[0], x)


def test_image_patches_row_major():
    x = np.arange(9.0)
    scheme = PatchScheme((3, 3), (2, 2), 1)
    p = extract_patches(x, scheme)
    assert scheme.patch_count == 4
    assert p.tolist() == [[0, 1, 3, 4], [1, 2, 4, 5], [3, 4, 6, 7], [4, 5, 7, 8]]


def test_scheme_validation():
    with pytest.raises(ConfigError):
        PatchScheme((3, 3), (4, 2))
    with pytest.raises(ConfigError):
        PatchScheme((3, 3), (2,))
    with pytest.raises(ConfigError):
        PatchScheme((5,), (2,), 0)
    with pytest.raises(DataError):
        extract_patches(np.zeros(8), PatchScheme((3, 3), (2, 2)))


@pytest.mark.parametrize("act", [RELU, STEP])
def test_single_patch_reduces_to_flat_kernel(act):
    rng = np.random.default_rng(0)
    xi, xj = rng.standard_normal((2, 7))
    scheme = PatchScheme((7,), (7,))
    assert conv_single_layer_kernel(xi, xj, scheme, act) == single_layer_kernel(xi, xj, act)
    flat = gram(np.stack([xi, xj]), KernelSpec(activation=act)).values
    patched = gram(np.stack([xi, xj]), KernelSpec(activation=act, patches=scheme)).values
    assert np.array_equal(flat, patched)


def test_step_sum_of_unit_patches():
    x = np.array([1.0, 0.0, 0.0, 1.0, 0.6, 0.8, 0.0, -1.0])
    scheme = PatchScheme((8,), (2,), 2)
    assert scheme.patch_count == 4
    assert conv_single_layer_kernel(x, x, scheme, STEP) == pytest.approx(2.0, abs=1e-15)
    mean = PatchScheme((8,), (2,), 2, aggregation=Aggregation.MEAN)
    assert conv_single_layer_kernel(x, x, mean, STEP) == pytest.approx(0.5, abs=1e-15)


def test_relu_matches_patchwise_monte_carlo():
    rng = np.random.default_rng(1)
    xi, xj = rng.standard_normal((2, 9))
    scheme = PatchScheme((3, 3), (2, 2), 1)
    exact = conv_single_layer_kernel(xi, xj, scheme, RELU)
    # shared weight: one w per sample scores every patch
    w = np.random.default_rng(2).standard_normal((400_000, 4))
    pi, pj = extract_patches(xi, scheme), extract_patches(xj, scheme)
    vals = (np.maximum(w @ pi.T, 0) * np.maximum(w @ pj.T, 0)).sum(axis=1)
    est, se = vals.mean(), vals.std(ddof=1) / math.sqrt(len(vals))
    assert abs(est - exact) <= 3 * se
    # and per-patch against the package's own pairwise oracle
    total, var = 0.0, 0.0
    for a, b in zip(pi, pj):
        e, s = mc_oracle_pairwise(a, b, RELU, 100_000, 3)
        total, var = total + e, var + s * s
    assert abs(total - exact) <= 3 * math.sqrt(var)


@pytest.mark.parametrize("act", [RELU, STEP])
def test_conv_gram_is_psd(act):
    x = np.random.default_rng(4).random((50, 36))
    scheme = PatchScheme((6, 6), (3, 3), 1)
    g = conv_kernel_matrix(x, None, scheme, act)
    assert np.allclose(g, g.T)
    assert np.linalg.eigvalsh(g).min() >= -1e-8 * np.trace(g)


@pytest.mark.parametrize("act", [RELU, STEP])
def test_matrix_matches_pairwise(act):
    rng = np.random.default_rng(5)
    xa, xb = rng.standard_normal((4, 16)), rng.standard_normal((3, 16))
    xa[1, :4] = 0.0
    scheme = PatchScheme((4, 4), (2, 2), 2)
    m = conv_kernel_matrix(xa, xb, scheme, act)
    for i in range(4):
        for j in range(3):
            assert m[i, j] == pytest.approx(conv_single_layer_kernel(xa[i], xb[j], scheme, act), abs=1e-12)


def test_translation_changes_the_kernel():
    img = np.zeros((4, 4))
    img[0, 0], img[0, 1], img[1, 0] = 1.0, 0.5, -0.7
    shifted = np.roll(img, 1, axis=1)
    scheme = PatchScheme((4, 4), (2, 2), 2)
    k_self = conv_single_layer_kernel(img.ravel(), img.ravel(), scheme, RELU)
    k_shift = conv_single_layer_kernel(img.ravel(), shifted.ravel(), scheme, RELU)
    # the flat kernel only sees the permutation-invariant norms and a smaller overlap
    assert k_shift < k_self
    assert k_shift != pytest.approx(single_layer_kernel(img.ravel(), shifted.ravel(), RELU))


def test_zero_patches_skipped_under_step(caplog):
    x = np.array([0.0, 0.0, 1.0, 1.0])
    scheme = PatchScheme((4,), (2,), 2)
    with caplog.at_level(logging.DEBUG, logger="infinet.conv"):
        v = conv_single_layer_kernel(x, x, scheme, STEP)
    assert v == pytest.approx(0.5)
    assert "skipped 1 zero patch pairs" in caplog.text
    g = conv_kernel_matrix(np.stack([x, x]), None, scheme, STEP)
    assert np.allclose(g, 0.5)


def test_scheme_mismatch():
    with pytest.raises(ConfigError):
        conv_single_layer_kernel(np.ones(4), np.ones(4), PatchScheme((4,), (2,)), RELU,
                                 scheme_j=PatchScheme((4,), (3,)))


def test_patch_spec_rejects_depth_two():
    from infinet.deep import SquaredExponential

    with pytest.raises(ConfigError):
        KernelSpec(depth=2, covariance=SquaredExponential(1.0), patches=PatchScheme((4,), (2,)))


def test_paper_printed_factor_applies_to_patches():
    x = np.array([1.0, 0.0, 0.0, 1.0])
    scheme = PatchScheme((4,), (2,), 2)
    a = gram(x[None], KernelSpec(activation=STEP, patches=scheme)).values[0, 0]
    b = gram(x[None], KernelSpec(activation=STEP, patches=scheme,
                                 scale_convention=ScaleConvention.PAPER_PRINTED)).values[0, 0]
    assert b == pytest.approx(2 * math.pi * a)
