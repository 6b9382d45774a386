"""Datasets, IDX/CSV ingestion, synthetic generators and Gram persistence."""

from __future__ import annotations

import csv
import enum
import gzip
import hashlib
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ChecksumError,
    CsvFormatError,
    DataError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
)
from .kernels import GramMatrix

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
GRAM_MAGIC = b"IKGRAM01"
UNIT_TOL = 1e-10


class Normalization(enum.Enum):
    NONE = "none"
    UNIT_NORM = "unit"
    SCALE_255 = "scale255"


@dataclass
class Dataset:
    """Instances ``(n, d)`` with integer labels in ``0..n_classes-1``."""

    instances: np.ndarray
    labels: np.ndarray
    normalization: Normalization = Normalization.NONE
    provenance: dict = field(default_factory=dict)
    label_map: list = field(default_factory=list)
    n_classes: int = 0

    def __post_init__(self):
        self.instances = np.asarray(self.instances, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.instances.ndim != 2 or len(self.instances) != len(self.labels):
            raise DataError("instances must be (n, d) with one label per row")
        if not np.all(np.isfinite(self.instances)):
            raise DataError("instances contain non-finite values")
        if len(self.labels) and self.labels.min() < 0:
            raise DataError("labels must be non-negative")
        if not self.n_classes:
            self.n_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if len(self.labels) and self.labels.max() >= self.n_classes:
            raise DataError("label outside 0..n_classes-1")
        if not self.label_map:
            self.label_map = list(range(self.n_classes))

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.instances.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        prov = {**self.provenance, "subset_of": self.provenance.get("sha256", "")}
        return replace(self, instances=self.instances[idx], labels=self.labels[idx], provenance=prov)


def normalize(dataset: Dataset, mode: Normalization) -> Dataset:
    """Return a copy with ``mode`` applied; UnitNorm is idempotent."""
    mode = Normalization(mode)
    x = dataset.instances
    if mode is Normalization.NONE:
        return dataset
    if mode is Normalization.SCALE_255:
        x = x / 255.0
    else:
        norms = np.linalg.norm(x, axis=1)
        if np.any(norms == 0):
            raise DataError(f"cannot unit-normalise zero row {int(np.flatnonzero(norms == 0)[0])}")
        off = np.abs(norms - 1.0) > 1e-15
        x = x.copy()
        x[off] /= norms[off, None]
    steps = [*dataset.provenance.get("normalization_steps", []), mode.value]
    return replace(dataset, instances=x, normalization=mode,
                   provenance={**dataset.provenance, "normalization_steps": steps})


def center(dataset: Dataset, rows=None) -> Dataset:
    """Subtract the mean of ``rows`` (default: all rows) from every instance.

    Pass the training indices so held-out points are shifted by the training
    mean only. Apply before UnitNorm.
    """
    x = dataset.instances
    ref = x if rows is None else x[np.asarray(rows)]
    if len(ref) == 0:
        raise DataError("cannot centre on an empty row set")
    steps = [*dataset.provenance.get("normalization_steps", []), "center"]
    return replace(dataset, instances=x - ref.mean(axis=0), normalization=Normalization.NONE,
                   provenance={**dataset.provenance, "normalization_steps": steps})


def split_indices(n: int, sizes, seed) -> list[np.ndarray]:
    """Disjoint random index sets of the requested sizes."""
    sizes = [int(s) for s in sizes]
    if sum(sizes) > n:
        raise DataError(f"split sizes {sizes} exceed dataset size {n}")
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0, *sizes])
    return [np.sort(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]


def _sha256(*paths) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# IDX


def _read_maybe_gzip(path) -> bytes:
    raw = Path(path).read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def load_idx(images_path, labels_path, normalization: Normalization = Normalization.SCALE_255) -> Dataset:
    """Read an IDX image/label file pair (optionally gzipped) into a Dataset.

    Images are flattened row-major; pixel bytes are scaled per ``normalization``
    (``UNIT_NORM`` scales to [0, 1] first, then normalises rows).
    """
    img = _read_maybe_gzip(images_path)
    lab = _read_maybe_gzip(labels_path)
    if len(img) < 16:
        raise IdxTruncatedError(f"{images_path}: header truncated")
    magic, n, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise IdxMagicError(f"{images_path}: bad image magic 0x{magic:08x}")
    if len(lab) < 8:
        raise IdxTruncatedError(f"{labels_path}: header truncated")
    lmagic, n_labels = struct.unpack(">II", lab[:8])
    if lmagic != IDX_LABELS_MAGIC:
        raise IdxMagicError(f"{labels_path}: bad label magic 0x{lmagic:08x}")
    if len(img) < 16 + n * rows * cols:
        raise IdxTruncatedError(f"{images_path}: expected {n * rows * cols} pixel bytes, got {len(img) - 16}")
    if len(lab) < 8 + n_labels:
        raise IdxTruncatedError(f"{labels_path}: expected {n_labels} label bytes, got {len(lab) - 8}")
    if n != n_labels:
        raise IdxCountMismatchError(f"{n} images but {n_labels} labels")
    x = np.frombuffer(img, dtype=np.uint8, count=n * rows * cols, offset=16).reshape(n, rows * cols)
    y = np.frombuffer(lab, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    prov = {"images": str(images_path), "labels": str(labels_path),
            "sha256": _sha256(images_path, labels_path), "shape": [rows, cols]}
    ds = Dataset(x.astype(np.float64), y, Normalization.NONE, prov, n_classes=10 if y.max(initial=0) < 10 else 0)
    mode = Normalization(normalization)
    if mode is Normalization.NONE:
        return ds
    ds = normalize(ds, Normalization.SCALE_255)
    return ds if mode is Normalization.SCALE_255 else normalize(ds, mode)


def write_idx(images, labels, images_path, labels_path) -> None:
    """Write ``(n, rows, cols)`` uint8 images and uint8 labels as an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


# ---------------------------------------------------------------------------
# CSV


def _label_order(values):
    try:
        return sorted(set(values), key=float)
    except ValueError:
        return sorted(set(values))


def load_csv(path, label_column: int | str = -1, header: bool = False) -> Dataset:
    """Read a numeric CSV with one label column (any strings) into a Dataset.

    Labels are re-indexed to ``0..K-1`` in sorted order (numeric order when
    every label parses as a number); ``label_map[k]`` is the original label.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    names = None
    if header and rows:
        names, rows = rows[0], rows[1:]
    if not rows:
        raise CsvFormatError(f"{path}: no data rows")
    width = len(rows[0])
    if isinstance(label_column, str):
        if names is None or label_column not in names:
            raise CsvFormatError(f"{path}: no column named {label_column!r}")
        label_column = names.index(label_column)
    col = label_column % width
    feats, raw_labels = [], []
    for lineno, row in enumerate(rows, start=2 if header else 1):
        if len(row) != width:
            raise CsvFormatError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
        raw_labels.append(row[col].strip())
        try:
            feats.append([float(v) for k, v in enumerate(row) if k != col])
        except ValueError as exc:
            raise CsvFormatError(f"{path}:{lineno}: {exc}") from None
    order = _label_order(raw_labels)
    index = {lab: k for k, lab in enumerate(order)}
    prov = {"path": str(path), "sha256": _sha256(path), "label_column": col}
    return Dataset(np.array(feats, dtype=np.float64).reshape(len(rows), width - 1),
                   np.array([index[v] for v in raw_labels]), Normalization.NONE, prov, list(order), len(order))


def write_csv(dataset: Dataset, path) -> None:
    """Write features (shortest round-trip repr) followed by the original label."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for x, y in zip(dataset.instances, dataset.labels):
            w.writerow([repr(float(v)) for v in x] + [dataset.label_map[y]])


# ---------------------------------------------------------------------------
# synthetic data


def make_blobs(n: int, n_classes: int = 2, dim: int = 5, spread: float = 0.3,
               separation: float = 1.0, seed=0, centers=None) -> Dataset:
    """Isotropic Gaussian blobs around random (or given) centres, classes round-robin."""
    rng = np.random.default_rng(seed)
    if centers is None:
        centers = rng.standard_normal((n_classes, dim))
        centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    centers = np.asarray(centers, dtype=np.float64)
    y = np.arange(n) % n_classes
    x = centers[y] + spread * rng.standard_normal((n, centers.shape[1]))
    prov = {"generator": "blobs", "seed": repr(seed), "centers": centers.tolist(), "spread": spread}
    return Dataset(x, y, Normalization.NONE, prov, n_classes=n_classes)


@dataclass
class SeparableProblem:
    """A dataset separated with unit margin by an explicitly known ``v*``.

    ``v*_k = scale * sum_a coef[a, k] psi_{anchor_a}``, so
    ``sum_k |v*_k|^2 = scale^2 * trace(coef^T K_AA coef)``.
    """

    dataset: Dataset
    anchors: np.ndarray
    coef: np.ndarray
    scale: float
    v_star_sq_norm: float
    r_squared: float


def make_separable(n: int, spec, n_classes: int = 3, dim: int = 4, n_anchors: int = 6,
                   keep_fraction: float = 0.5, seed=0) -> SeparableProblem:
    """Sample unit-norm points labelled by a random kernel expansion ``v*``.

    Candidates whose raw margin falls below the ``1 - keep_fraction`` quantile
    are discarded; ``v*`` is then scaled so every kept point has margin >= 1.
    """
    from .kernels import cross_gram, gram

    rng = np.random.default_rng(seed)
    n_cand = int(np.ceil(n / keep_fraction)) + 1
    anchors = rng.standard_normal((n_anchors, dim))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)
    coef = rng.standard_normal((n_anchors, n_classes))
    cand = rng.standard_normal((n_cand, dim))
    cand /= np.linalg.norm(cand, axis=1, keepdims=True)
    scores = cross_gram(cand, anchors, spec).values @ coef
    top2 = np.sort(scores, axis=1)[:, -2:]
    margin = top2[:, 1] - top2[:, 0]
    keep = np.argsort(-margin, kind="stable")[:n]
    scale = 1.0 / margin[keep].min()
    x = cand[keep]
    y = np.argmax(scores[keep], axis=1)
    kaa = gram(anchors, spec).values
    vsq = float(scale ** 2 * np.trace(coef.T @ kaa @ coef))
    r2 = float(np.max(np.diag(gram(x, spec).values)))
    ds = Dataset(x, y, Normalization.UNIT_NORM, {"generator": "separable", "seed": repr(seed)},
                 n_classes=n_classes)
    return SeparableProblem(ds, anchors, coef, scale, vsq, r2)


# ---------------------------------------------------------------------------
# Gram persistence


def _checksum(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def save_gram(path, gram: GramMatrix) -> None:
    """Write an ``IKGRAM01`` file.

    Layout (little-endian): magic, u64 n, u32 fingerprint length, fingerprint
    bytes, upper triangle row-major as f64, then an 8-byte BLAKE2b checksum of
    every preceding byte.
    """
    values = np.asarray(gram.values, dtype=np.float64)
    n = values.shape[0]
    if values.shape != (n, n):
        raise DataError("only square Gram matrices can be saved")
    fp = gram.fingerprint.encode()
    body = GRAM_MAGIC + struct.pack("<QI", n, len(fp)) + fp + values[np.triu_indices(n)].astype("<f8").tobytes()
    Path(path).write_bytes(body + _checksum(body))


def load_gram(path) -> GramMatrix:
    raw = Path(path).read_bytes()
    if raw[:8] != GRAM_MAGIC:
        raise DataError(f"{path}: not an IKGRAM01 file")
    if len(raw) < 8 + 12 + 8:
        raise DataError(f"{path}: truncated header")
    n, fp_len = struct.unpack("<QI", raw[8:20])
    tri = n * (n + 1) // 2
    expected = 20 + fp_len + 8 * tri + 8
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated or corrupt)")
    body, check = raw[:-8], raw[-8:]
    if _checksum(body) != check:
        raise ChecksumError(f"{path}: checksum mismatch")
    fp = raw[20:20 + fp_len].decode()
    upper = np.frombuffer(raw, dtype="<f8", count=tri, offset=20 + fp_len).astype(np.float64)
    values = np.empty((n, n))
    iu = np.triu_indices(n)
    values[iu] = upper
    values.T[iu] = upper
    return GramMatrix(values, fp)
