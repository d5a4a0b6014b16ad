"""Synthetic classification tasks, corruptions, OOD pairs and file loaders.

Every synthetic generator is a pure function of its parameters and seeds. A
task's *geometry* (class centres and the embedding of the signal subspace into
input space) depends only on ``TaskSpec.geometry_seed``; the *samples* depend
on the sample seed passed to :func:`sample`.
"""

from __future__ import annotations

import hashlib
import math
import struct
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .rng import Rng


class DataError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


@dataclass
class Dataset:
    x: np.ndarray  # (N, D)
    y: np.ndarray  # (N,) int64
    n_classes: int
    split_tag: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.x.shape[0] < 1 or self.y.shape != (self.x.shape[0],):
            raise DataError(f"bad dataset shapes x{self.x.shape} y{self.y.shape}")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise IndexError(f"labels must lie in [0, {self.n_classes})")
        if not np.isfinite(self.x).all():
            raise DataError("dataset contains non-finite features")

    def __len__(self):
        return self.x.shape[0]

    @property
    def dim(self):
        return self.x.shape[1]


@dataclass(frozen=True)
class TaskSpec:
    """Gaussian mixture task: each class owns ``modes`` centres in a signal subspace.

    Centres lie at ``radius`` from the origin inside a ``signal_dim``-dimensional
    subspace embedded in ``dim`` input dimensions by a fixed orthonormal map.
    With ``signal_dim == 2`` the centres sit on a ring at equal angles (offset
    by ``angle_offset`` turns); otherwise they are spread on a sphere.
    Samples add isotropic N(0, spread^2) noise in all ``dim`` directions.
    """

    n_classes: int = 8
    dim: int = 16
    signal_dim: int = 2
    modes: int = 1
    radius: float = 1.0
    spread: float = 0.1
    angle_offset: float = 0.0
    geometry_seed: int = 0
    center_pool_offset: int = 0


def _embedding(spec):
    if spec.signal_dim == spec.dim:
        return np.eye(spec.dim)
    g = Rng(spec.geometry_seed).split("embedding").normal((spec.dim, spec.signal_dim))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def _center_pool(spec, count):
    """Deterministic centre pool; index ``k`` is the same point for every spec sharing geometry."""
    if spec.signal_dim == 1:
        return spec.radius * np.where(np.arange(count) % 2 == 0, 1.0, -1.0)[:, None] \
            * (1 + np.arange(count) // 2)[:, None]
    if spec.signal_dim == 2:
        total = spec.n_classes * spec.modes
        k = np.arange(count)
        angle = 2 * np.pi * (k / total + spec.angle_offset)
        return spec.radius * np.stack([np.cos(angle), np.sin(angle)], axis=1)
    pts = Rng(spec.geometry_seed).split("centres").normal((count, spec.signal_dim))
    return spec.radius * pts / np.linalg.norm(pts, axis=1, keepdims=True)


def class_centres(spec):
    """Signal-space centres, shape (n_classes, modes, signal_dim)."""
    n = spec.n_classes * spec.modes
    pool = _center_pool(spec, spec.center_pool_offset + n)[spec.center_pool_offset:]
    # interleave so the modes of one class are spread around the pool
    return pool.reshape(spec.modes, spec.n_classes, spec.signal_dim).transpose(1, 0, 2)


def sample(spec, n_per_class, seed, split_tag="train"):
    rng = Rng(seed).split(f"sample/{split_tag}")
    centres = class_centres(spec) @ _embedding(spec).T  # (C, modes, dim)
    y = np.repeat(np.arange(spec.n_classes), n_per_class)
    mode = rng.integers(0, spec.modes, y.size)
    means = centres[y, mode]
    noise = rng.normal(means.shape, 0.0, spec.spread) if spec.spread > 0 else 0.0
    x = means + noise
    order = rng.permutation(y.size)
    prov = {"generator": "clusters", "seed": int(seed), "n_per_class": int(n_per_class), **asdict(spec)}
    return Dataset(x[order], y[order], spec.n_classes, split_tag, prov)


def make_clusters(n_classes, n_per_class, dim, spread, seed, **geometry):
    """Gaussian blobs around deterministic class means, shuffled by ``seed``."""
    if n_classes < 2:
        raise ValueError("n_classes must be >= 2")
    spec = TaskSpec(n_classes=n_classes, dim=dim, spread=spread,
                    signal_dim=geometry.pop("signal_dim", min(dim, 2)), **geometry)
    return sample(spec, n_per_class, seed)


def source_target_split(spec, overlap, n_per_class_source, n_per_class_target, seed):
    """Source and target tasks sharing the input distribution's signal subspace.

    The first ``round(overlap * C)`` source classes reuse the target's class
    centres (same label structure); the rest use centres from a disjoint part
    of the pool. Sample draws use distinct seeds, so the sets are disjoint.
    """
    if not 0 <= overlap <= 1:
        raise ValueError("overlap must lie in [0, 1]")
    n_shared = int(round(overlap * spec.n_classes))
    target = sample(spec, n_per_class_target, seed, "target")
    if spec.signal_dim == 2:
        # a disjoint ring: same radius, angles shifted half a slot
        other = replace(spec, angle_offset=spec.angle_offset + 0.5 / (spec.n_classes * spec.modes))
    else:
        other = replace(spec, center_pool_offset=spec.center_pool_offset + spec.n_classes * spec.modes)
    own = class_centres(spec)
    new = class_centres(other)
    centres = np.concatenate([own[:n_shared], new[n_shared:]], axis=0)
    src_rng = Rng(seed).split("sample/source")
    emb = _embedding(spec)
    y = np.repeat(np.arange(spec.n_classes), n_per_class_source)
    mode = src_rng.integers(0, spec.modes, y.size)
    means = (centres @ emb.T)[y, mode]
    x = means + (src_rng.normal(means.shape, 0.0, spec.spread) if spec.spread > 0 else 0.0)
    order = src_rng.permutation(y.size)
    prov = {"generator": "source", "seed": int(seed), "overlap": float(overlap), **asdict(spec)}
    source = Dataset(x[order], y[order], spec.n_classes, "train", prov)
    return source, target


# -- corruptions ------------------------------------------------------------

CORRUPTIONS = {
    # additive N(0, s^2)
    "gaussian_noise": (0.05, 0.1, 0.2, 0.4, 0.8),
    # additive U(-a, a)
    "uniform_noise": (0.1, 0.2, 0.35, 0.7, 1.4),
    # each feature zeroed independently with probability p
    "feature_dropout": (0.05, 0.1, 0.2, 0.35, 0.5),
    # x * (1 + s) + s * u for a fixed unit direction u
    "affine_shift": (0.1, 0.2, 0.35, 0.5, 0.8),
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTIONS:
            raise ValueError(f"unknown corruption {self.kind!r}")
        if not 1 <= self.severity <= 5:
            raise ValueError("severity must lie in 1..5")

    @property
    def magnitude(self):
        return CORRUPTIONS[self.kind][self.severity - 1]


def corrupt(d, spec, seed):
    rng = Rng(seed).split(f"corrupt/{spec.kind}/{spec.severity}")
    s = spec.magnitude
    x = d.x
    if spec.kind == "gaussian_noise":
        x = x + rng.normal(x.shape, 0.0, s)
    elif spec.kind == "uniform_noise":
        x = x + rng.uniform_range(-s, s, x.shape)
    elif spec.kind == "feature_dropout":
        x = np.where(rng.uniform(x.shape) < s, 0.0, x)
    else:
        u = Rng(seed).split("corrupt/affine_direction").normal(x.shape[1])
        x = x * (1.0 + s) + s * u / np.linalg.norm(u)
    prov = dict(d.provenance, corruption=spec.kind, severity=spec.severity, corruption_seed=int(seed))
    return Dataset(x, d.y.copy(), d.n_classes, d.split_tag, prov)


def ood_pair(in_spec, ood_spec, n_per_class, seed):
    """In-distribution test set and an OOD set from a second generator.

    OOD labels come from the OOD generator and are ignored by the metrics.
    """
    if in_spec == ood_spec:
        warnings.warn("ood_pair: identical task specs give a degenerate OOD set")
    ind = sample(in_spec, n_per_class, seed, "test")
    ood = sample(ood_spec, n_per_class, seed, "ood")
    ood.split_tag = "ood"
    return ind, ood


# -- file loaders -----------------------------------------------------------

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x):
        std = x.std(axis=0)
        return cls(x.mean(axis=0), np.where(std > 0, std, 1.0))

    def apply(self, x):
        return (x - self.mean) / self.std


@dataclass
class CsvSchema:
    label: str
    features: tuple = ()  # empty: every column except the label
    n_classes: int = 0  # 0: infer as max label + 1


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _read_csv(path, schema):
    import csv

    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", 1) from None
        header = [h.strip() for h in header]
        if schema.label not in header:
            raise DataError(f"label column {schema.label!r} missing from header", 1)
        feats = list(schema.features) or [h for h in header if h != schema.label]
        missing = [f for f in feats if f not in header]
        if missing:
            raise DataError(f"feature columns missing: {missing}", 1)
        li = header.index(schema.label)
        fi = [header.index(f) for f in feats]
        xs, ys = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"expected {len(header)} fields, got {len(row)}", lineno)
            try:
                label = int(row[li])
                vals = [float(row[i]) for i in fi]
            except ValueError as exc:
                raise DataError(str(exc), lineno) from None
            if any(math.isnan(v) or math.isinf(v) for v in vals):
                raise DataError("non-finite feature", lineno)
            if label < 0 or (schema.n_classes and label >= schema.n_classes):
                raise DataError(f"label {label} out of range", lineno)
            xs.append(vals)
            ys.append(label)
    if not xs:
        raise DataError("no data rows", 2)
    return np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64)


def load_csv(path, schema, split_tag="train", standardizer=None, standardize=True):
    """Load a headered CSV. Train splits fit their own standardizer; others need one."""
    x, y = _read_csv(path, schema)
    n_classes = schema.n_classes or int(y.max()) + 1
    if standardize:
        if standardizer is None:
            if split_tag != "train":
                raise ValueError("non-train splits must be standardized with train statistics")
            standardizer = Standardizer.fit(x)
        x = standardizer.apply(x)
    prov = {"generator": "csv", "path": str(path), "sha256": _sha256(path)}
    ds = Dataset(x, y, n_classes, split_tag, prov)
    ds.standardizer = standardizer
    return ds


def load_csv_splits(train_path, test_path, schema):
    train = load_csv(train_path, schema, "train")
    test = load_csv(test_path, schema, "test", standardizer=train.standardizer)
    n = max(train.n_classes, test.n_classes)
    train.n_classes = test.n_classes = n
    return train, test


IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_idx(path, expected_magic):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataError(f"{path}: IDX magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    body = raw[4 + 4 * ndim:]
    if len(body) != int(np.prod(dims)):
        raise DataError(f"{path}: payload has {len(body)} bytes, expected {int(np.prod(dims))}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(f">I{array.ndim}I", magic, *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path, labels_path, split_tag="train", standardizer=None, n_classes=0):
    images = _read_idx(images_path, IDX_IMAGES)
    labels = _read_idx(labels_path, IDX_LABELS).astype(np.int64)
    if images.shape[0] != labels.shape[0]:
        raise DataError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.reshape(images.shape[0], -1).astype(np.float64)
    if standardizer is None:
        if split_tag != "train":
            raise ValueError("non-train splits must be standardized with train statistics")
        standardizer = Standardizer.fit(x)
    prov = {"generator": "idx", "images_sha256": _sha256(images_path),
            "labels_sha256": _sha256(labels_path)}
    ds = Dataset(standardizer.apply(x), labels, n_classes or int(labels.max()) + 1, split_tag, prov)
    ds.standardizer = standardizer
    return ds
