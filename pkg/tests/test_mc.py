import math

import numpy as np
import pytest

from infinet import mc


def test_merge_matches_bulk_moments():
    x = np.random.default_rng(0).standard_normal((1000, 3))
    merged = mc.Moments.of(x[:137]).merge(mc.Moments.of(x[137:600])).merge(mc.Moments.of(x[600:]))
    bulk = mc.Moments.of(x)
    assert merged.n == 1000
    assert np.allclose(merged.mean, x.mean(axis=0), atol=1e-14)
    assert np.allclose(merged.cov, np.cov(x.T), atol=1e-12)
    assert np.allclose(merged.m2, bulk.m2, atol=1e-10)


def test_merge_with_empty():
    a = mc.Moments.of(np.arange(4.0))
    empty = mc.Moments(0, np.zeros(1), np.zeros((1, 1)))
    assert a.merge(empty) is a and empty.merge(a) is a


def test_shard_sizes():
    assert mc.shard_sizes(10, 3) == [4, 3, 3]
    assert mc.shard_sizes(2, 8) == [1, 1]
    assert sum(mc.shard_sizes(1_000_003, 8)) == 1_000_003


def _normal_draw(rng, k):
    return rng.standard_normal(k)


def test_independent_of_worker_count():
    a = mc.sharded_moments(_normal_draw, 100_000, 5, n_shards=8, workers=1)
    b = mc.sharded_moments(_normal_draw, 100_000, 5, n_shards=8, workers=4)
    assert a.mean.tobytes() == b.mean.tobytes() and a.m2.tobytes() == b.m2.tobytes()


def test_seed_and_shards_change_stream():
    a = mc.sharded_moments(_normal_draw, 10_000, 5, n_shards=8)
    b = mc.sharded_moments(_normal_draw, 10_000, 6, n_shards=8)
    c = mc.sharded_moments(_normal_draw, 10_000, 5, n_shards=4)
    assert a.mean[0] != b.mean[0] and a.mean[0] != c.mean[0]
    d = mc.sharded_moments(_normal_draw, 10_000, np.random.SeedSequence(5), n_shards=8)
    assert d.mean[0] == a.mean[0]


def test_standard_error_is_calibrated():
    m = mc.sharded_moments(_normal_draw, 200_000, 1)
    assert m.stderr[0] == pytest.approx(1 / math.sqrt(200_000), rel=0.02)
    assert abs(m.mean[0]) < 4 * m.stderr[0]


def test_jackknife_of_linear_function_matches_stderr():
    m = mc.sharded_moments(_normal_draw, 64_000, 2)
    jk = m.jackknife_stderr(lambda mean: float(mean[0]))
    assert jk == pytest.approx(m.stderr[0], rel=0.35)
    assert len(m.batches) == mc.DEFAULT_BATCHES


def test_jackknife_needs_batches():
    with pytest.raises(ValueError):
        mc.Moments.of(np.arange(5.0)).jackknife_stderr(lambda v: v[0])


def test_needs_two_samples():
    with pytest.raises(ValueError):
        mc.sharded_moments(_normal_draw, 1, 0)


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("INFINET_THREADS", "1")
    assert mc.max_workers() == 1
    monkeypatch.setenv("INFINET_THREADS", "junk")
    assert mc.max_workers() >= 1
