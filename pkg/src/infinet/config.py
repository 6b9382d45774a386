"""Flat ``key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment. Unknown keys are errors.
Every documented key and its default is listed in :data:`KEYS`. Per-area
seeds left unset fall back to the top-level ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError


def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple:
    return tuple(int(t) for t in v.replace("x", ",").split(",") if t.strip())


def _opt_int(v: str):
    return None if v.strip().lower() in ("", "none") else int(v)


def _str(v: str) -> str:
    return v.strip()


@dataclass(frozen=True)
class Key:
    parse: object
    default: object
    doc: str


KEYS = {
    "seed": Key(int, 0, "master seed for every unset per-area seed"),
    "data.source": Key(_str, "blobs", "blobs | csv | idx"),
    "data.path": Key(_str, "", "CSV file, or IDX image file"),
    "data.labels_path": Key(_str, "", "IDX label file"),
    "data.label_column": Key(int, -1, "CSV label column index"),
    "data.header": Key(_bool, False, "CSV has a header row"),
    "data.normalization": Key(_str, "unit", "none | unit | scale255"),
    "data.center": Key(_bool, False, "subtract the training-split mean before normalising"),
    "data.n": Key(int, 200, "blob generator: number of points"),
    "data.classes": Key(int, 2, "blob generator: number of classes"),
    "data.dim": Key(int, 5, "blob generator: input dimension"),
    "data.spread": Key(float, 0.3, "blob generator: per-coordinate noise scale"),
    "data.separation": Key(float, 2.0, "blob generator: distance of centres from origin"),
    "data.seed": Key(_opt_int, None, "blob generator seed"),
    "data.train_size": Key(int, 100, "training split size"),
    "data.test_size": Key(int, 100, "test split size"),
    "data.split_seed": Key(_opt_int, None, "train/test split seed"),
    "kernel.activation": Key(_str, "relu", "relu | step"),
    "kernel.depth": Key(int, 1, "1 or 2"),
    "kernel.covariance": Key(_str, "se", "se | ou | constant (depth 2)"),
    "kernel.alpha": Key(float, 1.0, "squared-exponential precision"),
    "kernel.constant": Key(float, 1.0, "value of the constant covariance"),
    "kernel.estimator": Key(_str, "analytic", "analytic | theorem1 | bochner"),
    "kernel.scale_convention": Key(_str, "canonical", "canonical | paper_printed"),
    "kernel.mc_samples": Key(int, 100_000, "Monte Carlo samples per kernel value"),
    "kernel.seed": Key(_opt_int, None, "Monte Carlo seed"),
    "kernel.shards": Key(int, 8, "Monte Carlo shards (fixed for reproducibility)"),
    "kernel.patch_input": Key(_ints, (), "patch kernel input shape, e.g. 28x28 (empty: no patches)"),
    "kernel.patch_shape": Key(_ints, (), "patch shape, e.g. 5x5"),
    "kernel.patch_stride": Key(_ints, (1,), "patch stride"),
    "kernel.patch_aggregation": Key(_str, "sum", "sum | mean"),
    "train.algorithm": Key(_str, "klr", "klr | pa"),
    "train.lambda": Key(float, 0.01, "regularisation weight"),
    "train.max_epochs": Key(int, 200, "epoch (or pass) limit"),
    "train.tolerance": Key(float, 1e-6, "duality-gap stopping tolerance"),
    "train.step_rule": Key(_str, "backtracking", "backtracking | fixed"),
    "train.eta": Key(float, 1.0, "step size (initial step under backtracking)"),
    "train.shuffle": Key(_bool, True, "visit rows in a fresh random order each epoch"),
    "train.seed": Key(_opt_int, None, "row-order seed (only used with shuffling)"),
    "train.unit_diagonal": Key(_bool, False, "rescale the Gram to unit maximum diagonal"),
    "stability.train_size": Key(int, 200, "m for the replace-one probe"),
    "stability.test_size": Key(int, 1000, "held-out points for the probe"),
    "stability.replacements": Key(int, 10, "number of replace-one retrainings"),
    "stability.seed": Key(_opt_int, None, "probe seed"),
    "convergence.samples": Key(_ints, (1000, 10_000, 100_000, 1_000_000), "sample counts"),
    "convergence.repeats": Key(int, 10, "independent repeats per sample count"),
    "convergence.pairs": Key(int, 3, "random input pairs"),
    "convergence.dim": Key(int, 3, "input dimension"),
    "convergence.seed": Key(_opt_int, None, "study seed"),
    "output.dir": Key(_str, "runs", "directory for output files"),
}


class Config(dict):
    """Parsed configuration; missing keys take their documented defaults."""

    def seed_for(self, key: str) -> int:
        own = self[key]
        return self["seed"] if own is None else own

    def __missing__(self, key):
        if key in KEYS:
            return KEYS[key].default
        raise ConfigError(f"unknown configuration key {key!r}")


def _set(cfg: Config, key: str, raw: str, where: str) -> None:
    key = key.strip()
    if key not in KEYS:
        raise ConfigError(f"{where}: unknown configuration key {key!r}")
    try:
        cfg[key] = KEYS[key].parse(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from None


def parse_config(text: str, source: str = "<config>") -> Config:
    cfg = Config()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        _set(cfg, key, raw, f"{source}:{lineno}")
    return cfg


def load_config(path=None, overrides=()) -> Config:
    """Read ``path`` (or start from defaults) and apply ``key=value`` overrides."""
    if path is None:
        cfg = Config()
    else:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cfg = parse_config(p.read_text(), str(path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        _set(cfg, key, raw, "--set")
    return cfg


def resolved(cfg: Config) -> dict:
    """Every key with its effective value, for echoing into result files."""
    out = {}
    for k in sorted(KEYS):
        v = cfg[k]
        out[k] = list(v) if isinstance(v, tuple) else v
    return out
