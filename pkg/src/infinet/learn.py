"""Kernel multiclass logistic regression, kernel passive-aggressive, stability probe.

Training minimises the regularised average log-loss

    P(v) = (1/m) sum_i -log p_v(y_i | x_i) + (lam/2) sum_k |v_k|^2

through its entropy dual over per-example simplex rows ``alpha_i``. The
primal point attached to ``alpha`` is ``v_k = sum_i beta_ik psi_{x_i}`` with
``beta = (Y - alpha) / (lam m)``, where ``Y`` is the one-hot label matrix.
Everything is expressed through Gram products; feature maps are never built.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._backend import backend
from .errors import ConfigError, DataError, FingerprintMismatchError
from .kernels import GramMatrix, gram as build_gram

log = logging.getLogger(__name__)

MODEL_MAGIC = b"IKMODEL1"
MODEL_VERSION = 1


class StepRule(enum.Enum):
    FIXED = "fixed"
    BACKTRACKING = "backtracking"


@dataclass(frozen=True)
class TrainConfig:
    """Optimiser settings.

    ``lam`` is the regularisation weight; training stops once the duality gap
    is at most ``dual_tolerance`` or after ``max_epochs`` passes. ``eta`` is
    the step for ``StepRule.FIXED`` and the initial step under backtracking.
    ``inner_steps`` caps the EG steps taken on a row per visit. Rows are
    visited in a fresh random order each epoch unless ``shuffle`` is off;
    a fixed order can crawl when the data are grouped by class. ``seed``
    only matters when shuffling.
    """

    lam: float = 0.01
    max_epochs: int = 200
    dual_tolerance: float = 1e-6
    step_rule: StepRule = StepRule.BACKTRACKING
    eta: float = 1.0
    inner_steps: int = 20
    seed: int = 0
    shuffle: bool = True
    psd_tolerance: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "step_rule", StepRule(self.step_rule))
        if not self.lam > 0:
            raise ConfigError(f"lambda must be positive, got {self.lam}")
        if not self.dual_tolerance > 0:
            raise ConfigError(f"dual tolerance must be positive, got {self.dual_tolerance}")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be non-negative")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be >= 1")
        if not 0 < self.eta <= 1:
            raise ConfigError(f"step size must lie in (0, 1], got {self.eta}")


@dataclass
class DualState:
    alpha: np.ndarray
    epoch: int
    dual_objective: float
    primal_objective: float
    duality_gap: float
    converged: bool = False


@dataclass
class Model:
    """Dual coefficients: ``v_k = sum_i beta[i, k] psi_{x_i}`` over training points."""

    beta: np.ndarray
    gram_fingerprint: str
    train_indices: np.ndarray
    n_classes: int

    def __post_init__(self):
        self.beta = np.ascontiguousarray(self.beta, dtype=np.float64)
        self.train_indices = np.asarray(self.train_indices, dtype=np.int64)
        if self.beta.shape != (len(self.train_indices), self.n_classes):
            raise DataError(f"beta shape {self.beta.shape} does not match "
                            f"{len(self.train_indices)} training points x {self.n_classes} classes")

    def save(self, path) -> None:
        """Binary layout (little-endian): magic, u32 version, u32 K, u64 m,
        u32 fingerprint length, fingerprint, beta row-major f64, training
        indices as i64."""
        fp = self.gram_fingerprint.encode()
        m, k = self.beta.shape
        head = MODEL_MAGIC + struct.pack("<IIQI", MODEL_VERSION, k, m, len(fp)) + fp
        Path(path).write_bytes(head + self.beta.astype("<f8").tobytes()
                               + self.train_indices.astype("<i8").tobytes())

    @classmethod
    def load(cls, path) -> "Model":
        raw = Path(path).read_bytes()
        if raw[:8] != MODEL_MAGIC:
            raise DataError(f"{path}: not a model file")
        if len(raw) < 28:
            raise DataError(f"{path}: truncated header")
        version, k, m, fp_len = struct.unpack("<IIQI", raw[8:28])
        if version != MODEL_VERSION:
            raise DataError(f"{path}: unsupported model version {version}")
        off = 28 + fp_len
        if len(raw) != off + 8 * m * k + 8 * m:
            raise DataError(f"{path}: size does not match header")
        fp = raw[28:off].decode()
        beta = np.frombuffer(raw, "<f8", m * k, off).reshape(m, k).astype(np.float64)
        idx = np.frombuffer(raw, "<i8", m, off + 8 * m * k).astype(np.int64)
        return cls(beta, fp, idx, int(k))


# ---------------------------------------------------------------------------
# losses and objectives


def _logsumexp(scores: np.ndarray) -> np.ndarray:
    top = scores.max(axis=-1, keepdims=True)
    return (top + np.log(np.exp(scores - top).sum(axis=-1, keepdims=True)))[..., 0]


def softmax_loss(scores, label: int):
    """Negative log-probability of ``label`` under softmax(scores) and its gradient."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    shifted = s - s.max()
    z = np.exp(shifted)
    total = z.sum()
    p = z / total
    loss = float(np.log(total) - shifted[label])
    grad = p.copy()
    grad[label] -= 1.0
    return loss, grad


def log_losses(scores: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-row ``-log softmax(scores)[label]``."""
    scores = np.asarray(scores, dtype=np.float64)
    return _logsumexp(scores) - scores[np.arange(len(labels)), labels]


def _one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def dual_coefficients(alpha: np.ndarray, labels: np.ndarray, lam: float) -> np.ndarray:
    m, k = alpha.shape
    return (_one_hot(labels, k) - alpha) / (lam * m)


def objectives(G: np.ndarray, labels: np.ndarray, log_alpha: np.ndarray, lam: float):
    """Return ``(dual, primal, gap, scores)`` at the dual point ``exp(log_alpha)``.

    The dual is ``(1/m) sum alpha log alpha + (lam/2) sum_k beta_k' G beta_k``;
    weak duality makes ``primal + dual >= 0``, and that sum is the gap.
    """
    m = len(labels)
    alpha = np.exp(log_alpha)
    beta = dual_coefficients(alpha, labels, lam)
    S = G @ beta
    reg = 0.5 * lam * float(np.sum(beta * S))
    dual = float(np.sum(alpha * log_alpha)) / m + reg
    primal = float(np.mean(log_losses(S, labels))) + reg
    return dual, primal, primal + dual, S


def _check_labels(labels, m: int, n_classes: int | None) -> tuple[np.ndarray, int]:
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (m,):
        raise DataError(f"expected {m} labels, got shape {y.shape}")
    k = int(n_classes) if n_classes else int(y.max()) + 1
    if m and (y.min() < 0 or y.max() >= k):
        raise DataError(f"labels must lie in 0..{k - 1}")
    return y, k


def _as_gram(gram) -> GramMatrix:
    if isinstance(gram, GramMatrix):
        return gram
    return GramMatrix(np.asarray(gram, dtype=np.float64), "")


# ---------------------------------------------------------------------------
# training


def train_klr(gram, labels, config: TrainConfig = TrainConfig(), n_classes: int | None = None,
              train_indices=None):
    """Fit kernel logistic regression by dual exponentiated-gradient sweeps.

    Each sweep visits every row once (see ``TrainConfig.shuffle``) and moves
    ``alpha_i`` along ``log alpha_i <- (1 - eta) log alpha_i + eta * g_i``
    (renormalised), where ``g_i`` is the current scores of row ``i``
    corrected for the row's own move. Under backtracking each visit starts
    from ``eta = 1``; the step is halved until the exact change of the dual
    objective is non-positive, then doubled (capped at 1). A row takes up
    to ``config.inner_steps`` such steps before the next row is visited.

    Returns
    -------
    model : Model
    state : DualState
    trace : list of dict
        One entry per epoch (epoch 0 is the uniform start) with the dual and
        primal objectives, duality gap, accepted updates and support size.
    """
    gm = _as_gram(gram)
    G = np.ascontiguousarray(gm.values, dtype=np.float64)
    m = G.shape[0]
    if G.shape != (m, m) or m == 0:
        raise DataError("training Gram matrix must be square and non-empty")
    gm.check_psd(config.psd_tolerance)
    y, k = _check_labels(labels, m, n_classes)
    lam = float(config.lam)
    fixed = config.step_rule is StepRule.FIXED

    log_alpha = np.full((m, k), -math.log(k))
    eta = np.full(m, float(config.eta))
    updated = np.zeros(m, dtype=np.uint8)
    rng = np.random.default_rng(config.seed)
    dual, primal, gap, S = objectives(G, y, log_alpha, lam)
    S = np.ascontiguousarray(S)
    trace = [dict(epoch=0, dual=dual, primal=primal, gap=gap, accepted=0, support=0)]
    converged = gap <= config.dual_tolerance
    epoch = 0
    while not converged and epoch < config.max_epochs:
        epoch += 1
        order = rng.permutation(m) if config.shuffle else np.arange(m)
        accepted = backend.eg_epoch(G, y, log_alpha, S, eta, lam, fixed, updated,
                                    np.ascontiguousarray(order, dtype=np.int64), config.inner_steps)
        # fresh scores each epoch stop rank-one drift from accumulating
        dual, primal, gap, S_new = objectives(G, y, log_alpha, lam)
        S[...] = S_new
        trace.append(dict(epoch=epoch, dual=dual, primal=primal, gap=gap,
                          accepted=int(accepted), support=int(updated.sum())))
        converged = gap <= config.dual_tolerance
    if not converged:
        log.warning("duality gap %.3e above tolerance after %d epochs", gap, epoch)
    alpha = np.exp(log_alpha)
    alpha /= alpha.sum(axis=1, keepdims=True)
    beta = dual_coefficients(alpha, y, lam)
    idx = np.arange(m) if train_indices is None else train_indices
    model = Model(beta, gm.fingerprint, idx, k)
    state = DualState(alpha, epoch, dual, primal, gap, converged)
    return model, state, trace


def predict(model: Model, gram_cross: GramMatrix):
    """Labels and class scores for rows of kernel values against the training points.

    Ties go to the lowest class index.
    """
    if not isinstance(gram_cross, GramMatrix):
        raise ConfigError("predict needs a GramMatrix so the kernel fingerprint can be checked")
    if gram_cross.fingerprint != model.gram_fingerprint:
        raise FingerprintMismatchError(
            f"kernel fingerprint {gram_cross.fingerprint!r} does not match the model's "
            f"{model.gram_fingerprint!r}; rebuild the Gram with the training spec")
    values = np.atleast_2d(gram_cross.values)
    if values.shape[1] != len(model.train_indices):
        raise DataError(f"cross Gram has {values.shape[1]} columns, model has "
                        f"{len(model.train_indices)} training points")
    scores = values @ model.beta
    return np.argmax(scores, axis=1), scores


def train_pa(gram, labels, r_bound: float | None = None, n_classes: int | None = None,
             max_passes: int = 1000, train_indices=None):
    """Kernel multiclass passive-aggressive learning with unit target margin.

    On each example the most competitive wrong class ``r`` is found; if
    ``score_y - score_r < 1`` both ``v_y`` and ``v_r`` move along ``psi_x`` by
    ``tau = (1 - margin) / (2 K(x, x))``, which lifts that margin to exactly 1.
    Passes repeat until one makes no update.

    Returns
    -------
    model : Model
    updates : int
        Total number of updates over all passes.
    trace : list of dict
        Per pass: updates, mistakes, sum of squared hinge losses, and the
        smallest training margin after the pass.
    """
    gm = _as_gram(gram)
    G = np.ascontiguousarray(gm.values, dtype=np.float64)
    m = G.shape[0]
    y, k = _check_labels(labels, m, n_classes)
    if k < 2:
        raise DataError("passive-aggressive learning needs at least two classes")
    diag = np.diag(G)
    if r_bound is not None and diag.max() > r_bound ** 2 * (1 + 1e-12):
        raise DataError(f"Gram diagonal {diag.max():.6g} exceeds R^2 = {r_bound ** 2:.6g}")
    beta = np.zeros((m, k))
    S = np.zeros((m, k))
    order = np.arange(m, dtype=np.int64)
    trace = []
    total = 0
    for p in range(1, max_passes + 1):
        updates, mistakes, sumsq = backend.pa_pass(G, y, beta, S, order)
        S = G @ beta
        others = S.copy()
        others[np.arange(m), y] = -np.inf
        margins = S[np.arange(m), y] - others.max(axis=1)
        trace.append(dict(epoch=p, updates=int(updates), mistakes=int(mistakes),
                          sum_sq_loss=float(sumsq), min_margin=float(margins.min())))
        total += updates
        if updates == 0:
            break
        S = np.ascontiguousarray(S)
    idx = np.arange(m) if train_indices is None else train_indices
    return Model(beta, gm.fingerprint, idx, k), total, trace


# ---------------------------------------------------------------------------
# stability


@dataclass
class StabilityReport:
    """Replace-one retraining summary.

    ``deltas[r]`` is the largest change of the log-loss over the evaluation
    points (test set plus the swapped-out and swapped-in examples) caused by
    replacement ``r``; ``mean_test_deltas[r]`` is the change in average test
    loss. ``gap`` is ``|test loss - train loss|`` of the base model.
    """

    deltas: list
    mean_test_deltas: list
    replaced: list
    empirical_bound: float
    theoretical_bound: float
    train_loss: float
    test_loss: float
    gap: float
    signed_gap: float
    test_stderr: float
    gram_scale: float
    m: int
    lam: float
    converged: bool
    meta: dict = field(default_factory=dict)

    @property
    def deltas_within_bound(self) -> bool:
        return self.empirical_bound <= self.theoretical_bound + 3.0 * self.test_stderr

    @property
    def gap_within_bound(self) -> bool:
        return self.gap <= self.theoretical_bound + 3.0 * self.test_stderr

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "deltas", "mean_test_deltas", "replaced", "empirical_bound", "theoretical_bound",
            "train_loss", "test_loss", "gap", "signed_gap", "test_stderr", "gram_scale", "m",
            "lam", "converged")}
        out["deltas_within_bound"] = self.deltas_within_bound
        out["gap_within_bound"] = self.gap_within_bound
        out.update(self.meta)
        return out


def stability_probe(dataset, spec, config: TrainConfig, n_replacements: int, seed,
                    n_train: int, n_test: int | None = None) -> StabilityReport:
    """Retrain with single examples swapped for fresh draws and measure loss changes.

    The dataset is split (by ``seed``) into ``n_train`` training points,
    ``n_test`` test points and ``n_replacements`` fresh replacements. The Gram
    over all of them is scaled to unit maximum diagonal so ``|psi_x| <= 1``;
    the factor is recorded as ``gram_scale``.
    """
    from .data import split_indices

    n = len(dataset)
    if n_replacements > n_train:
        raise ConfigError(f"n_replacements={n_replacements} exceeds m={n_train}")
    if n_test is None:
        n_test = n - n_train - n_replacements
    if n_test < 1 or n_train + n_test + n_replacements > n:
        raise ConfigError(f"dataset of {n} points cannot supply {n_train} train, "
                          f"{n_test} test and {n_replacements} replacement points")
    ss = np.random.SeedSequence(seed if isinstance(seed, (int, tuple)) else int(seed))
    split_seed, pick_seed = ss.spawn(2)
    train, test, fresh = split_indices(n, [n_train, n_test, n_replacements], split_seed)
    used = np.concatenate([train, test, fresh])
    full = build_gram(dataset.instances[used], spec)
    factor = 1.0 / float(np.max(np.diag(full.values)))
    full = full.rescaled(factor)
    G = full.values
    k = dataset.n_classes
    y_all = dataset.labels[used]
    tr = np.arange(n_train)
    te = np.arange(n_train, n_train + n_test)
    fr = np.arange(n_train + n_test, len(used))

    def fit(rows):
        model, state, _ = train_klr(GramMatrix(G[np.ix_(rows, rows)], full.fingerprint),
                                    y_all[rows], config, n_classes=k)
        return model.beta, state.converged

    def losses(beta, rows, points):
        return log_losses(G[np.ix_(points, rows)] @ beta, y_all[points])

    beta0, conv = fit(tr)
    test0 = losses(beta0, tr, te)
    train_loss = float(np.mean(losses(beta0, tr, tr)))
    test_loss = float(np.mean(test0))
    stderr = float(np.std(test0, ddof=1) / math.sqrt(n_test)) if n_test > 1 else 0.0

    positions = np.sort(np.random.default_rng(pick_seed).choice(n_train, n_replacements, replace=False))
    deltas, mean_deltas, replaced = [], [], []
    for r, pos in enumerate(positions):
        rows = tr.copy()
        rows[pos] = fr[r]
        beta_r, ok = fit(rows)
        conv = conv and ok
        probe = np.concatenate([te, [tr[pos], fr[r]]])
        diff = np.abs(losses(beta0, tr, probe) - losses(beta_r, rows, probe))
        deltas.append(float(diff.max()))
        mean_deltas.append(abs(float(np.mean(losses(beta_r, rows, te))) - test_loss))
        replaced.append(int(used[tr[pos]]))
    signed = test_loss - train_loss
    return StabilityReport(
        deltas=deltas, mean_test_deltas=mean_deltas, replaced=replaced,
        empirical_bound=max(deltas, default=0.0), theoretical_bound=1.0 / (n_train * config.lam),
        train_loss=train_loss, test_loss=test_loss, gap=abs(signed), signed_gap=signed,
        test_stderr=stderr, gram_scale=factor, m=n_train, lam=config.lam, converged=bool(conv),
    )
