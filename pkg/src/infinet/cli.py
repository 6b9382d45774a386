"""Command-line experiment runner.

Every command reads a flat config (see :mod:`infinet.config`), writes its
results as JSON (and CSV for ``convergence``) and prints the JSON payload.
Payloads carry a ``schema`` field; wall-clock data lives under ``timing``,
the only part that may differ between identical reruns.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._backend import NAME as BACKEND
from .config import load_config, resolved
from .conv import PatchScheme
from .data import Normalization, center, load_csv, load_idx, make_blobs, normalize, save_gram, split_indices
from .deep import Constant, OrnsteinUhlenbeck, SquaredExponential, analytic_se_sigma, kernel_estimate, \
    theorem1_sigma_mc, two_layer_analytic_se, two_layer_bochner
from .errors import ConfigError, DataError, InfinetError, NumericError
from .kernels import Activation, Estimator, KernelSpec, ScaleConvention, cross_gram, gram
from .learn import Model, StepRule, TrainConfig, log_losses, predict, stability_probe, train_klr, train_pa

log = logging.getLogger("infinet")

SCHEMA_VERSION = 1
EXIT_CODES = ((ConfigError, 2), (DataError, 3), (NumericError, 4))


# ---------------------------------------------------------------------------
# config -> library objects


def _enum(cls, value, key):
    aliases = {"paper_printed": "paper"}
    try:
        return cls(aliases.get(value, value))
    except ValueError:
        raise ConfigError(f"{key}: {value!r} is not one of {[e.value for e in cls]}") from None


def build_spec(cfg) -> KernelSpec:
    activation = _enum(Activation, cfg["kernel.activation"], "kernel.activation")
    depth = cfg["kernel.depth"]
    covariance = None
    if depth == 2:
        kind = cfg["kernel.covariance"]
        if kind == "se":
            covariance = SquaredExponential(cfg["kernel.alpha"])
        elif kind == "ou":
            covariance = OrnsteinUhlenbeck()
        elif kind == "constant":
            covariance = Constant(cfg["kernel.constant"])
        else:
            raise ConfigError(f"kernel.covariance: unknown covariance {kind!r}")
    patches = None
    if cfg["kernel.patch_input"]:
        patches = PatchScheme(cfg["kernel.patch_input"], cfg["kernel.patch_shape"],
                              cfg["kernel.patch_stride"], cfg["kernel.patch_aggregation"])
    return KernelSpec(
        activation=activation, depth=depth, covariance=covariance,
        estimator=_enum(Estimator, cfg["kernel.estimator"], "kernel.estimator"),
        scale_convention=_enum(ScaleConvention, cfg["kernel.scale_convention"], "kernel.scale_convention"),
        mc_samples=cfg["kernel.mc_samples"], seed=cfg.seed_for("kernel.seed"),
        n_shards=cfg["kernel.shards"], patches=patches,
    )


def build_train_config(cfg) -> TrainConfig:
    return TrainConfig(
        lam=cfg["train.lambda"], max_epochs=cfg["train.max_epochs"],
        dual_tolerance=cfg["train.tolerance"],
        step_rule=_enum(StepRule, cfg["train.step_rule"], "train.step_rule"),
        eta=cfg["train.eta"], seed=cfg.seed_for("train.seed"), shuffle=cfg["train.shuffle"],
    )


def _require_file(path, key):
    if not path:
        raise ConfigError(f"{key} must be set")
    if not Path(path).is_file():
        raise ConfigError(f"{key}: {path} does not exist")


def load_dataset(cfg, center_rows=None):
    """Load and normalise the configured dataset.

    With ``data.center`` the mean of ``center_rows`` (all rows if None) is
    subtracted after byte scaling and before any UnitNorm.
    """
    source = cfg["data.source"]
    mode = _enum(Normalization, cfg["data.normalization"], "data.normalization")
    centering = cfg["data.center"]
    load_mode = mode
    if centering and mode is Normalization.UNIT_NORM:
        load_mode = Normalization.SCALE_255 if source == "idx" else Normalization.NONE
    if source == "blobs":
        ds = make_blobs(cfg["data.n"], cfg["data.classes"], cfg["data.dim"], cfg["data.spread"],
                        cfg["data.separation"], seed=cfg.seed_for("data.seed"))
        ds = normalize(ds, load_mode)
    elif source == "csv":
        _require_file(cfg["data.path"], "data.path")
        ds = normalize(load_csv(cfg["data.path"], cfg["data.label_column"], cfg["data.header"]), load_mode)
    elif source == "idx":
        _require_file(cfg["data.path"], "data.path")
        _require_file(cfg["data.labels_path"], "data.labels_path")
        ds = load_idx(cfg["data.path"], cfg["data.labels_path"], load_mode)
    else:
        raise ConfigError(f"data.source: unknown source {source!r}")
    if centering:
        ds = center(ds, center_rows)
        if mode is Normalization.UNIT_NORM:
            ds = normalize(ds, mode)
    return ds


def split(cfg, ds):
    sizes = [cfg["data.train_size"], cfg["data.test_size"]]
    if sum(sizes) > len(ds) or min(sizes) < 1:
        raise ConfigError(f"split sizes {sizes} do not fit a dataset of {len(ds)} points")
    return split_indices(len(ds), sizes, cfg.seed_for("data.split_seed"))


def load_split(cfg):
    """Dataset plus train/test indices, centred on the training split if requested."""
    ds = load_dataset(cfg)
    tr, te = split(cfg, ds)
    if cfg["data.center"]:
        ds = load_dataset(cfg, center_rows=tr)
    return ds, tr, te


def _out_dir(cfg) -> Path:
    out = Path(cfg["output.dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _payload(command, cfg, results, started):
    return {
        "schema": f"infinet.{command}/{SCHEMA_VERSION}",
        "version": __version__,
        "backend": BACKEND,
        "config": resolved(cfg),
        "results": results,
        "timing": {"seconds": round(time.perf_counter() - started, 6)},
    }


def _dump(payload) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"


def _emit(payload, path=None):
    text = _dump(payload)
    if path is not None:
        Path(path).write_text(text)
    sys.stdout.write(text)


def _train_gram(cfg, spec, x_train):
    g = gram(x_train, spec)
    scale = 1.0
    if cfg["train.unit_diagonal"]:
        scale = 1.0 / float(np.max(np.diag(g.values)))
        g = g.rescaled(scale)
    return g, scale


def _metrics(model, g_train, g_test, y_train, y_test):
    pred_tr, s_tr = predict(model, g_train)
    pred_te, s_te = predict(model, g_test)
    return {
        "train_error": float(np.mean(pred_tr != y_train)),
        "test_error": float(np.mean(pred_te != y_test)),
        "train_log_loss": float(np.mean(log_losses(s_tr, y_train))),
        "test_log_loss": float(np.mean(log_losses(s_te, y_test))),
    }


# ---------------------------------------------------------------------------
# commands


def _vector(text, name):
    try:
        return np.array([float(t) for t in text.split(",")])
    except ValueError:
        raise ConfigError(f"{name}: expected comma-separated numbers, got {text!r}") from None


def cmd_kernel(cfg, args):
    started = time.perf_counter()
    spec = build_spec(cfg)
    if args.points:
        _require_file(args.points, "--points")
        x = np.loadtxt(args.points, delimiter=",", ndmin=2)
        try:
            xi, xj = x[args.i], x[args.j]
        except IndexError:
            raise DataError(f"--points has {len(x)} rows") from None
    elif args.xi and args.xj:
        xi, xj = _vector(args.xi, "--xi"), _vector(args.xj, "--xj")
    else:
        raise ConfigError("kernel needs --xi and --xj, or --points with --i/--j")
    if len(xi) != len(xj):
        raise DataError(f"inputs differ in dimension: {len(xi)} vs {len(xj)}")
    value, stderr = kernel_estimate(xi, xj, spec)
    results = {"value": value, "spec": spec.describe(), "fingerprint": spec.fingerprint()}
    if spec.estimator is not Estimator.ANALYTIC:
        results["stderr"] = stderr
    out = Path(args.out) / "kernel.json" if args.out else None
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
    _emit(_payload("kernel", cfg, results, started), out)


def cmd_gram(cfg, args):
    started = time.perf_counter()
    spec = build_spec(cfg)
    ds = load_dataset(cfg)
    g = gram(ds, spec)
    out = _out_dir(cfg)
    save_gram(out / "gram.ikg", g)
    lo = g.min_eigenvalue()
    tr = float(np.trace(g.values))
    results = {
        "n": g.n, "fingerprint": g.fingerprint, "min_eigenvalue": lo, "trace": tr,
        "psd_ok": bool(lo >= -1e-8 * tr),
        "file_sha256": hashlib.sha256((out / "gram.ikg").read_bytes()).hexdigest(),
    }
    _emit(_payload("gram", cfg, results, started), out / "gram.json")


def cmd_train(cfg, args):
    started = time.perf_counter()
    spec = build_spec(cfg)
    ds, tr, te = load_split(cfg)
    g_train, scale = _train_gram(cfg, spec, ds.instances[tr])
    g_test = cross_gram(ds.instances[te], ds.instances[tr], spec).rescaled(scale)
    y_tr, y_te = ds.labels[tr], ds.labels[te]
    out = _out_dir(cfg)
    if cfg["train.algorithm"] == "klr":
        model, state, trace = train_klr(g_train, y_tr, build_train_config(cfg),
                                        n_classes=ds.n_classes, train_indices=tr)
        info = {"epochs": state.epoch, "duality_gap": state.duality_gap,
                "dual_objective": state.dual_objective, "primal_objective": state.primal_objective,
                "converged": state.converged, "support_size": trace[-1]["support"],
                "trace": trace}
    elif cfg["train.algorithm"] == "pa":
        model, updates, trace = train_pa(g_train, y_tr, n_classes=ds.n_classes,
                                         max_passes=cfg["train.max_epochs"], train_indices=tr)
        info = {"updates": updates, "epochs": len(trace),
                "support_size": int(np.count_nonzero(np.any(model.beta != 0, axis=1))),
                "trace": trace}
    else:
        raise ConfigError(f"train.algorithm: unknown algorithm {cfg['train.algorithm']!r}")
    model.save(out / "model.bin")
    results = {**_metrics(model, g_train, g_test, y_tr, y_te), **info,
               "n_train": len(tr), "n_test": len(te), "gram_scale": scale,
               "fingerprint": model.gram_fingerprint}
    _emit(_payload("train", cfg, results, started), out / "train.json")


def cmd_eval(cfg, args):
    started = time.perf_counter()
    spec = build_spec(cfg)
    ds, _, te = load_split(cfg)
    out = _out_dir(cfg)
    model_path = Path(args.model) if args.model else out / "model.bin"
    if not model_path.is_file():
        raise ConfigError(f"model file {model_path} does not exist (run train first)")
    model = Model.load(model_path)
    tr = model.train_indices
    if tr.max(initial=-1) >= len(ds):
        raise DataError("model training indices exceed the configured dataset")
    g_train, scale = _train_gram(cfg, spec, ds.instances[tr])
    g_test = cross_gram(ds.instances[te], ds.instances[tr], spec).rescaled(scale)
    results = {**_metrics(model, g_train, g_test, ds.labels[tr], ds.labels[te]),
               "n_train": len(tr), "n_test": len(te), "fingerprint": model.gram_fingerprint}
    _emit(_payload("eval", cfg, results, started), out / "eval.json")


def _fit_slope(ns, errors):
    slope, _ = np.polyfit(np.log(ns), np.log(errors), 1)
    return float(slope)


def _constant_rows(pairs, activation, value, n, seed):
    """Theorem-1 and Bochner estimates of Sigma for a constant covariance.

    A constant covariance makes the GP a single Gaussian scalar times the
    constant function, so Sigma factorises as ``c * E f(<w, x_i>) E f(<w, x_j>)``.
    """
    mean_f = (lambda x: np.linalg.norm(x) / math.sqrt(2 * math.pi)) if activation is Activation.RELU \
        else (lambda x: 0.5)
    cov = Constant(value)
    rows = []
    for p, (xi, xj) in enumerate(pairs):
        exact = np.array([value * mean_f(xi) ** 2, value * mean_f(xi) * mean_f(xj), value * mean_f(xj) ** 2])
        for path in ("theorem1", "bochner"):
            ss = np.random.SeedSequence([seed, p, 1 if path == "theorem1" else 2])
            if path == "theorem1":
                res = theorem1_sigma_mc(xi, xj, cov, activation, n, ss)
            else:
                res = two_layer_bochner(xi, xj, activation, cov.bochner_sampler(len(xi)), n, ss)
            est = np.array([res.sigma.s11, res.sigma.s12, res.sigma.s22])
            se = np.array([res.sigma_stderr[0, 0], res.sigma_stderr[0, 1], res.sigma_stderr[1, 1]])
            z = (est - exact) / np.where(se > 0, se, np.inf)
            rows.append({"pair": p, "path": path, "exact": exact.tolist(), "estimate": est.tolist(),
                         "stderr": se.tolist(), "max_abs_z": float(np.max(np.abs(z)))})
    return rows


def convergence_study(cfg):
    """RMS error of both MC paths against the closed form over growing sample counts."""
    activation = _enum(Activation, cfg["kernel.activation"], "kernel.activation")
    alpha = cfg["kernel.alpha"]
    cov = SquaredExponential(alpha)
    seed = cfg.seed_for("convergence.seed")
    dim = cfg["convergence.dim"]
    rng = np.random.default_rng([seed, 0])
    pairs = []
    for _ in range(cfg["convergence.pairs"]):
        u = rng.standard_normal((2, dim))
        pairs.append(tuple(u / np.linalg.norm(u, axis=1, keepdims=True)))
    exact = [two_layer_analytic_se(a, b, activation, alpha) for a, b in pairs]
    sig = [analytic_se_sigma(a, b, activation, alpha) for a, b in pairs]
    ns = sorted(cfg["convergence.samples"])
    repeats = cfg["convergence.repeats"]
    rows, summary = [], {}
    for path in ("theorem1", "bochner"):
        rms, rms_sigma, last = [], [], []
        for n in ns:
            sq, sq_sigma, ses = [], [], []
            for p, (a, b) in enumerate(pairs):
                for r in range(repeats):
                    ss = np.random.SeedSequence([seed, 1 if path == "theorem1" else 2, n, p, r])
                    if path == "theorem1":
                        res = theorem1_sigma_mc(a, b, cov, activation, n, ss)
                    else:
                        res = two_layer_bochner(a, b, activation, cov.bochner_sampler(dim), n, ss)
                    sq.append((res.estimate - exact[p]) ** 2)
                    sq_sigma.append(float(np.sum((res.sigma.as_array() - sig[p].as_array()) ** 2)))
                    ses.append(res.stderr)
                    if n == ns[-1]:
                        last.append((res.estimate - exact[p]) / res.stderr if res.stderr > 0 else 0.0)
            err = math.sqrt(float(np.mean(sq)))
            rms.append(err)
            rms_sigma.append(math.sqrt(float(np.mean(sq_sigma))))
            rows.append({"path": path, "samples": n, "rms_error": err, "rms_sigma_error": rms_sigma[-1],
                         "mean_stderr": float(np.mean(ses)), "runs": len(sq)})
        summary[path] = {
            "slope": _fit_slope(ns, rms) if len(ns) > 1 else None,
            "sigma_slope": _fit_slope(ns, rms_sigma) if len(ns) > 1 else None,
            "largest_n": ns[-1],
            "fraction_beyond_3se_at_largest_n": float(np.mean(np.abs(last) > 3.0)),
        }
    constant = _constant_rows(pairs, activation, cfg["kernel.constant"], ns[-1] if ns[-1] <= 100_000 else 100_000,
                              seed)
    return rows, summary, constant


def cmd_convergence(cfg, args):
    started = time.perf_counter()
    rows, summary, constant = convergence_study(cfg)
    out = _out_dir(cfg)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=["path", "samples", "rms_error", "rms_sigma_error", "mean_stderr", "runs"],
                       lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    (out / "convergence.csv").write_text(buf.getvalue())
    results = {"rows": rows, "paths": summary, "constant_factorization": constant}
    _emit(_payload("convergence", cfg, results, started), out / "convergence.json")


def cmd_stability(cfg, args):
    started = time.perf_counter()
    spec = build_spec(cfg)
    ds = load_dataset(cfg)
    report = stability_probe(ds, spec, build_train_config(cfg), cfg["stability.replacements"],
                             cfg.seed_for("stability.seed"), cfg["stability.train_size"],
                             cfg["stability.test_size"])
    out = _out_dir(cfg)
    _emit(_payload("stability", cfg, report.to_dict(), started), out / "stability.json")


COMMANDS = {
    "kernel": cmd_kernel,
    "gram": cmd_gram,
    "train": cmd_train,
    "eval": cmd_eval,
    "convergence": cmd_convergence,
    "stability": cmd_stability,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infinet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value config file")
        p.add_argument("--seed", type=int, help="override the top-level seed")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "kernel":
            p.add_argument("--xi", help="first input, comma-separated")
            p.add_argument("--xj", help="second input, comma-separated")
            p.add_argument("--points", help="CSV of input rows (no label column)")
            p.add_argument("--i", type=int, default=0, help="row of --points for the first input")
            p.add_argument("--j", type=int, default=1, help="row of --points for the second input")
        if name == "eval":
            p.add_argument("--model", help="model file (default: <out>/model.bin)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"seed={args.seed}")
        if args.out:
            overrides.append(f"output.dir={args.out}")
        cfg = load_config(args.config, overrides)
        COMMANDS[args.command](cfg, args)
    except InfinetError as exc:
        print(f"infinet {args.command}: {exc}", file=sys.stderr)
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                return code
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
