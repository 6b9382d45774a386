import math

import numpy as np
import pytest
from scipy import optimize

from infinet import Activation, GramMatrix, KernelSpec, cross_gram, gram
from infinet.data import Normalization, make_blobs, make_separable, normalize
from infinet.errors import ConfigError, DataError, FingerprintMismatchError, NonPSDError
from infinet.learn import (
    Model,
    StepRule,
    TrainConfig,
    log_losses,
    predict,
    softmax_loss,
    stability_probe,
    train_klr,
    train_pa,
)

from oracles import klr_primal_oracle


def blobs(n, seed=0, classes=2, dim=5):
    return normalize(make_blobs(n, classes, dim, 0.3, 2.0, seed=seed), Normalization.UNIT_NORM)


# -- softmax ----------------------------------------------------------------


def test_softmax_uniform():
    loss, grad = softmax_loss([0.7, 0.7, 0.7], 1)
    assert loss == pytest.approx(math.log(3), abs=1e-15)
    assert np.allclose(grad, [1 / 3, -2 / 3, 1 / 3], atol=1e-15)


def test_softmax_saturated():
    loss, grad = softmax_loss([50.0, -50.0], 0)
    assert 0 <= loss < 1e-40
    assert np.all(np.isfinite(grad))
    loss, _ = softmax_loss([1000.0, -1000.0], 1)
    assert loss == pytest.approx(2000.0)


def test_softmax_two_class_value():
    loss, _ = softmax_loss([1.0, 0.0], 0)
    assert loss == pytest.approx(math.log1p(math.exp(-1.0)), abs=1e-15)
    assert loss == pytest.approx(0.31326, abs=1e-5)


def test_softmax_gradient_finite_differences():
    rng = np.random.default_rng(0)
    h = 1e-5
    for _ in range(100):
        k = int(rng.integers(2, 8))
        s = 3 * rng.standard_normal(k)
        label = int(rng.integers(k))
        _, grad = softmax_loss(s, label)
        fd = np.empty(k)
        for c in range(k):
            e = np.zeros(k)
            e[c] = h
            fd[c] = (softmax_loss(s + e, label)[0] - softmax_loss(s - e, label)[0]) / (2 * h)
        assert np.linalg.norm(fd - grad) <= 1e-6 * np.linalg.norm(grad)


def test_softmax_rejects_nonfinite():
    with pytest.raises(DataError):
        softmax_loss([np.inf, 0.0], 0)


def test_log_losses_matches_softmax_loss():
    s = np.array([[1.0, 2.0, -1.0], [0.0, 0.0, 5.0]])
    y = np.array([2, 0])
    assert np.allclose(log_losses(s, y), [softmax_loss(s[i], y[i])[0] for i in range(2)])


# -- KLR --------------------------------------------------------------------


def test_train_config_validation():
    for bad in (dict(lam=0), dict(dual_tolerance=0), dict(max_epochs=-1), dict(eta=1.5), dict(inner_steps=0)):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)
    assert TrainConfig(step_rule="fixed").step_rule is StepRule.FIXED


def test_single_example():
    g = np.array([[0.5]])
    model, state, _ = train_klr(g, [0], TrainConfig(lam=1.0, dual_tolerance=1e-10), n_classes=2)
    # weak duality, up to rounding of primal + dual
    assert state.converged and -1e-15 <= state.duality_gap <= 1e-10
    fun, _, _ = klr_primal_oracle(g, np.array([0]), 1.0, 2)
    assert state.primal_objective == pytest.approx(fun, abs=1e-9)
    # scores are 0.5 * (1 - a, a - 1) and the optimum has a = softmax(scores)_0
    a = optimize.brentq(lambda a: a - 1 / (1 + math.exp(-(1 - a))), 0.5, 1.0, xtol=1e-15)
    assert state.alpha[0, 0] == pytest.approx(a, abs=1e-6)


def test_huge_lambda_gives_uniform_predictor():
    ds = blobs(30, classes=3)
    g = gram(ds, KernelSpec())
    model, state, _ = train_klr(g, ds.labels, TrainConfig(lam=1e6))
    assert np.abs(model.beta).max() < 1e-5
    _, scores = predict(model, g)
    assert np.mean(log_losses(scores, ds.labels)) == pytest.approx(math.log(3), abs=1e-6)


@pytest.fixture(scope="module")
def blob_fit():
    ds = blobs(20, seed=1)
    g = gram(ds, KernelSpec())
    cfg = TrainConfig(lam=0.01, max_epochs=200, dual_tolerance=1e-10)
    model, state, trace = train_klr(g, ds.labels, cfg)
    return ds, g, cfg, model, state, trace


def test_blobs_reach_small_gap_and_fit(blob_fit):
    ds, g, cfg, model, state, trace = blob_fit
    assert state.converged and state.epoch <= 200
    assert next(t["epoch"] for t in trace if t["gap"] <= 1e-4) <= 200
    pred, _ = predict(model, g)
    assert np.array_equal(pred, ds.labels)


def test_blobs_match_generic_optimizer(blob_fit):
    ds, g, cfg, model, state, trace = blob_fit
    fun, _, _ = klr_primal_oracle(g.values, ds.labels, cfg.lam, 2)
    assert state.primal_objective == pytest.approx(fun, abs=1e-6)
    assert -state.dual_objective == pytest.approx(fun, abs=1e-6)


def test_trace_invariants(blob_fit):
    ds, g, cfg, model, state, trace = blob_fit
    duals = [t["dual"] for t in trace]
    assert np.all(np.diff(duals) <= 1e-12)
    assert all(t["gap"] >= -1e-8 for t in trace)
    assert all(t["support"] <= len(ds) for t in trace)
    assert np.allclose(state.alpha.sum(axis=1), 1.0, atol=1e-12)
    assert state.alpha.min() >= 0


def test_fixed_step_rule_converges():
    ds = blobs(20, seed=2)
    g = gram(ds, KernelSpec())
    _, state, trace = train_klr(g, ds.labels, TrainConfig(lam=0.05, step_rule="fixed", eta=0.5, max_epochs=400,
                                                          dual_tolerance=1e-6))
    assert state.converged


def test_shuffled_order_reaches_same_optimum():
    ds = blobs(20, seed=3)
    g = gram(ds, KernelSpec())
    _, a, _ = train_klr(g, ds.labels, TrainConfig(lam=0.02, dual_tolerance=1e-10, shuffle=False))
    _, b, _ = train_klr(g, ds.labels, TrainConfig(lam=0.02, dual_tolerance=1e-10, seed=5))
    assert a.primal_objective == pytest.approx(b.primal_objective, abs=1e-9)


def _backends():
    from infinet import _fallback

    mods = [_fallback]
    try:
        from infinet import _core
    except ImportError:
        pass
    else:
        mods.append(_core)
    return mods


def _stiff_row_optimum(c, score_gap, t0):
    # two-class row objective in t = alpha_0, measured from the visit's start t0
    def f(t):
        return (t * math.log(t) + (1 - t) * math.log1p(-t) - (t - t0) * score_gap
                + 2 * c * (t - t0) ** 2)
    return optimize.minimize_scalar(f, bounds=(1e-300, 0.5), method="bounded",
                                    options=dict(xatol=1e-14)).x


@pytest.mark.parametrize("backend", _backends(), ids=lambda m: m.__name__.rsplit(".", 1)[-1])
@pytest.mark.parametrize("start_log,start_eta", [(-4000.0, 1.0), (-5.0, 1e-16)])
def test_eg_row_escapes_underflow_and_stale_step(backend, start_log, start_eta):
    # c = G_ii / (2 lam m) = 500, so the full EG step overshoots and must backtrack.
    # A weight of exp(-4000) underflows, so early steps change its log but not the
    # objective; a stored step of 1e-16 is round-off small. Neither may freeze the row.
    lam = 1e-3
    G = np.array([[1.0]])
    log_alpha = np.array([[start_log, 0.0]])
    log_alpha[0] -= np.logaddexp.reduce(log_alpha[0])
    t0 = math.exp(log_alpha[0, 0])
    S = np.array([[1.0, 0.0]])
    eta = np.array([start_eta])
    backend.eg_epoch(G, np.array([1]), log_alpha, S, eta, lam, False, np.zeros(1, dtype=np.uint8),
                     np.array([0]), 500)
    t = _stiff_row_optimum(0.5 / lam, 1.0, t0)
    assert math.exp(log_alpha[0, 0]) == pytest.approx(t, rel=1e-6)


def test_class_sorted_small_lambda_converges():
    # rows grouped by class with a weak regulariser: the setting where a stalled
    # row order shows up as a duality gap that stops shrinking
    ds = blobs(120, seed=4, classes=4)
    order = np.argsort(ds.labels, kind="stable")
    g = gram(ds.instances[order], KernelSpec())
    _, state, _ = train_klr(g, ds.labels[order], TrainConfig(lam=1e-5, max_epochs=2000, dual_tolerance=1e-4))
    assert state.converged


def test_argmax_invariance_under_joint_scaling():
    ds = blobs(40, seed=4, classes=3)
    tr, te = np.arange(30), np.arange(30, 40)
    spec = KernelSpec(activation=Activation.STEP)
    g = gram(ds.instances[tr], spec)
    c = cross_gram(ds.instances[te], ds.instances[tr], spec)
    cfg = TrainConfig(lam=0.03, dual_tolerance=1e-9)
    m1, _, _ = train_klr(g, ds.labels[tr], cfg)
    m2, _, _ = train_klr(g.rescaled(7.0), ds.labels[tr], TrainConfig(lam=0.21, dual_tolerance=1e-9))
    assert np.array_equal(predict(m1, c)[0], predict(m2, c.rescaled(7.0))[0])


def test_heldout_blobs_and_training_point_consistency():
    ds = blobs(60, seed=5, classes=3)
    tr, te = np.arange(40), np.arange(40, 60)
    g = gram(ds.instances[tr], KernelSpec())
    model, _, _ = train_klr(g, ds.labels[tr], TrainConfig(lam=0.01))
    pred, _ = predict(model, cross_gram(ds.instances[te], ds.instances[tr], KernelSpec()))
    assert np.array_equal(pred, ds.labels[te])
    own, _ = predict(model, g)
    again, _ = predict(model, cross_gram(ds.instances[tr[:5]], ds.instances[tr], KernelSpec()))
    assert np.array_equal(again, own[:5])


def test_non_psd_gram_rejected():
    g = GramMatrix(np.array([[1.0, 2.0], [2.0, 1.0]]), "x")
    with pytest.raises(NonPSDError, match="-1"):
        train_klr(g, [0, 1])


def test_bad_labels():
    with pytest.raises(DataError):
        train_klr(np.eye(2), [0, 3], n_classes=2)
    with pytest.raises(DataError):
        train_klr(np.eye(2), [0])


# -- predict / model --------------------------------------------------------


def test_zero_model_predicts_class_zero():
    model = Model(np.zeros((3, 4)), "fp", np.arange(3), 4)
    pred, scores = predict(model, GramMatrix(np.ones((2, 3)), "fp"))
    assert pred.tolist() == [0, 0] and not scores.any()


def test_fingerprint_mismatch():
    model = Model(np.zeros((2, 2)), "fp-a", np.arange(2), 2)
    with pytest.raises(FingerprintMismatchError):
        predict(model, GramMatrix(np.ones((1, 2)), "fp-b"))
    with pytest.raises(ConfigError):
        predict(model, np.ones((1, 2)))
    with pytest.raises(DataError):
        predict(model, GramMatrix(np.ones((1, 3)), "fp-a"))


def test_model_round_trip(tmp_path, blob_fit):
    model = blob_fit[3]
    model.save(tmp_path / "m.bin")
    back = Model.load(tmp_path / "m.bin")
    assert np.array_equal(back.beta, model.beta)
    assert back.gram_fingerprint == model.gram_fingerprint
    assert np.array_equal(back.train_indices, model.train_indices)
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"X" + raw[1:])
    with pytest.raises(DataError):
        Model.load(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-3])
    with pytest.raises(DataError):
        Model.load(tmp_path / "short.bin")


# -- passive-aggressive -----------------------------------------------------


def test_pa_single_example():
    model, updates, trace = train_pa(np.array([[0.5]]), [1], n_classes=2)
    assert updates == 1
    scores = 0.5 * model.beta[0]
    assert scores[1] - scores[0] >= 1 - 1e-12


def test_pa_counts_only_violations():
    # orthogonal features, two classes: one update each, then no violations
    model, updates, trace = train_pa(0.5 * np.eye(3), [0, 1, 1])
    assert updates == 3
    assert [t["updates"] for t in trace] == [3, 0]
    assert trace[-1]["min_margin"] >= 1 - 1e-12


def test_pa_r_bound_precondition():
    with pytest.raises(DataError):
        train_pa(np.eye(2), [0, 1], r_bound=0.5)


@pytest.mark.parametrize("act", [Activation.RELU, Activation.STEP])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pa_guaranteed_bounds(act, seed):
    """Mistakes <= sum of squared losses <= 2 R^2 |v*|^2 on separable data."""
    prob = make_separable(120, KernelSpec(activation=act), seed=seed)
    g = gram(prob.dataset, KernelSpec(activation=act))
    model, updates, trace = train_pa(g, prob.dataset.labels, r_bound=math.sqrt(prob.r_squared))
    mistakes = sum(t["mistakes"] for t in trace)
    sumsq = sum(t["sum_sq_loss"] for t in trace)
    assert mistakes <= sumsq <= 2 * prob.r_squared * prob.v_star_sq_norm
    assert trace[-1]["updates"] == 0 and trace[-1]["min_margin"] >= 1 - 1e-9


def test_separable_generator_margin():
    spec = KernelSpec()
    prob = make_separable(50, spec, seed=3)
    scores = prob.scale * cross_gram(prob.dataset.instances, prob.anchors, spec).values @ prob.coef
    y = prob.dataset.labels
    other = scores.copy()
    other[np.arange(50), y] = -np.inf
    assert np.min(scores[np.arange(50), y] - other.max(axis=1)) >= 1 - 1e-12


# -- stability --------------------------------------------------------------


def test_stability_constant_learner():
    ds = blobs(60, seed=6)
    rep = stability_probe(ds, KernelSpec(), TrainConfig(lam=1e6), 5, 0, 20, 30)
    assert rep.empirical_bound < 1e-6
    assert all(d >= 0 for d in rep.deltas)


def test_stability_two_points():
    ds = blobs(40, seed=7)
    rep = stability_probe(ds, KernelSpec(), TrainConfig(lam=1.0, dual_tolerance=1e-10), 2, 1, 2, 30)
    assert rep.theoretical_bound == pytest.approx(0.5)
    assert max(rep.deltas) <= 0.5 + 1e-3
    assert rep.converged


def test_stability_validation():
    ds = blobs(10)
    with pytest.raises(ConfigError):
        stability_probe(ds, KernelSpec(), TrainConfig(), 5, 0, 3)
    with pytest.raises(ConfigError):
        stability_probe(ds, KernelSpec(), TrainConfig(), 2, 0, 5, 10)
