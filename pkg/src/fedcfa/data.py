"""Datasets, client partitioning, the coloured two-digit dataset and the
local/global average-data pipeline."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import TARGET_SUM_TOL, check_soft_targets

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DEFAULT_SHADES = (0.3, 0.42, 0.54, 0.66, 0.78, 0.9)


class IdxFormatError(ValueError):
    pass


@dataclass
class LabeledDataset:
    xs: np.ndarray
    ys: np.ndarray

    def __post_init__(self):
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.ys = np.asarray(self.ys, dtype=np.float64)
        if self.xs.ndim != 2 or self.ys.ndim != 2:
            raise ValueError("xs and ys must be 2-D")
        if len(self.xs) != len(self.ys):
            raise ValueError(f"xs has {len(self.xs)} rows but ys has {len(self.ys)}")
        if len(self.ys):
            check_soft_targets(self.ys, TARGET_SUM_TOL)

    def __len__(self) -> int:
        return len(self.xs)

    @property
    def in_dim(self) -> int:
        return self.xs.shape[1]

    @property
    def num_classes(self) -> int:
        return self.ys.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return self.ys.argmax(axis=1)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.xs[idx], self.ys[idx])


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# --------------------------------------------------------------------------
# partitioning
# --------------------------------------------------------------------------

@dataclass
class PartitionPlan:
    assignments: list[list[int]]

    def __post_init__(self):
        self.assignments = [sorted(int(i) for i in a) for a in self.assignments]

    @property
    def num_clients(self) -> int:
        return len(self.assignments)

    def sizes(self) -> list[int]:
        return [len(a) for a in self.assignments]

    def validate(self, n: int | None = None) -> None:
        seen: set[int] = set()
        for k, a in enumerate(self.assignments):
            if not a:
                raise ValueError(f"client {k} is empty")
            if seen.intersection(a):
                raise ValueError("partition index lists overlap")
            seen.update(a)
        if n is not None and seen != set(range(n)):
            raise ValueError("partition does not cover every sample")

    def to_json(self) -> str:
        return json.dumps(self.assignments)

    @classmethod
    def from_json(cls, text: str) -> "PartitionPlan":
        return cls(json.loads(text))

    def apply(self, ds: LabeledDataset) -> list[LabeledDataset]:
        return [ds.subset(a) for a in self.assignments]


def dirichlet_partition(ds: LabeledDataset, K: int, alpha: float, seed: int) -> PartitionPlan:
    """Label-skewed split: each class is divided by proportions ~ Dir_K(alpha).

    Clients left empty steal one sample from the currently largest client.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if K > len(ds):
        raise ValueError(f"cannot split {len(ds)} samples among {K} clients")
    rng = np.random.default_rng(seed)
    labels = ds.labels
    buckets: list[list[int]] = [[] for _ in range(K)]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        p = rng.dirichlet(np.full(K, alpha))
        cuts = (np.cumsum(p)[:-1] * idx.size).astype(np.int64)
        for k, part in enumerate(np.split(idx, cuts)):
            buckets[k].extend(part.tolist())
    for k in range(K):
        if not buckets[k]:
            donor = max(range(K), key=lambda j: (len(buckets[j]), -j))
            buckets[k].append(buckets[donor].pop())
    return PartitionPlan(buckets)


def iid_partition(ds: LabeledDataset, K: int, seed: int) -> PartitionPlan:
    if not 1 <= K <= len(ds):
        raise ValueError(f"cannot split {len(ds)} samples among {K} clients")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return PartitionPlan([perm[k::K].tolist() for k in range(K)])


def max_class_share(plan: PartitionPlan, ds: LabeledDataset) -> float:
    """Mean over clients of the largest single-class fraction."""
    labels = ds.labels
    shares = []
    for a in plan.assignments:
        counts = np.bincount(labels[a], minlength=ds.num_classes)
        shares.append(counts.max() / counts.sum())
    return float(np.mean(shares))


# --------------------------------------------------------------------------
# IDX files
# --------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise IdxFormatError(f"{what}: file too short")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IdxFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    if len(raw) < 4 + 4 * ndim:
        raise IdxFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    count = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) != count:
        raise IdxFormatError(f"{what}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, classes: int = 10) -> LabeledDataset:
    """Read an IDX image/label pair; pixels scaled to [0, 1], labels one-hot."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= classes:
        raise IdxFormatError(f"label {labels.max()} outside {classes} classes")
    xs = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return LabeledDataset(xs, one_hot(labels, classes))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images ``[n, rows, cols]`` and labels ``[n]`` as IDX."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    header = struct.pack(">I", IDX_IMAGES_MAGIC) + struct.pack(">3I", *images.shape)
    Path(images_path).write_bytes(header + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def find_mnist(data_dir) -> tuple[Path, Path] | None:
    data_dir = Path(data_dir)
    for stem in ("train-images-idx3-ubyte", "train-images.idx3-ubyte"):
        for suffix in ("", ".gz"):
            img = data_dir / (stem + suffix)
            lab = data_dir / (stem.replace("images", "labels").replace("idx3", "idx1") + suffix)
            if img.exists() and lab.exists():
                return img, lab
    return None


# --------------------------------------------------------------------------
# synthetic digit surrogate and the coloured Simpson's-paradox split
# --------------------------------------------------------------------------

def synthetic_digits(n: int, seed: int, side: int = 12, ambiguity: float = 0.08) -> LabeledDataset:
    """Two-blob stand-ins for MNIST digits 1 and 7 (10-class one-hot).

    A "1" is two blobs stacked on the centre column; a "7" is a blob at the
    top right plus one lower left of centre. A fraction ``ambiguity`` of the
    samples gets blob positions interpolated towards the other class so shape
    alone does not separate the classes perfectly.
    """
    rng = np.random.default_rng(seed)
    labels = np.where(rng.random(n) < 0.5, 1, 7)
    rr, cc = np.mgrid[0:side, 0:side].astype(np.float64)
    u = side / 12.0
    one = np.array([[3.0, 6.0], [8.5, 6.0]]) * u
    seven = np.array([[2.5, 8.5], [8.0, 4.0]]) * u
    images = np.empty((n, side, side))
    for i in range(n):
        own, other = (one, seven) if labels[i] == 1 else (seven, one)
        mix = rng.uniform(0.35, 0.6) if rng.random() < ambiguity else rng.uniform(0.0, 0.2)
        centres = (1 - mix) * own + mix * other + rng.normal(0.0, 0.6 * u, size=(2, 2))
        width = rng.uniform(1.1, 1.7) * u
        img = np.zeros((side, side))
        for r0, c0 in centres:
            img += np.exp(-((rr - r0) ** 2 + (cc - c0) ** 2) / (2 * width ** 2))
        img += rng.normal(0.0, 0.05, size=img.shape)
        images[i] = np.clip(img / max(img.max(), 1e-12), 0.0, 1.0)
    return LabeledDataset(images.reshape(n, -1), one_hot(labels, 10))


def filter_classes(ds: LabeledDataset, classes=(1, 7)) -> LabeledDataset:
    keep = np.isin(ds.labels, classes)
    return ds.subset(np.flatnonzero(keep))


def shade_rgb(t: float) -> np.ndarray:
    """RGB multiplier for shade ``t``: dark yellow at low t, near-white at high t."""
    return np.array([t, t, t ** 3])


def colorize(xs: np.ndarray, rgb) -> np.ndarray:
    """Replicate flattened grayscale rows into 3 channels scaled by ``rgb``.

    Layout is channel-major: ``[R pixels, G pixels, B pixels]``.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 1:
        return np.concatenate([xs * c for c in rgb], axis=1)
    return np.concatenate([xs * rgb[:, [c]] for c in range(3)], axis=1)


@dataclass
class SimpsonSplit:
    clients: list[LabeledDataset]
    test: LabeledDataset
    shades: tuple[float, ...]
    client_shades: list[tuple[float, float]] = field(default_factory=list)
    test_shade_index: np.ndarray | None = None
    gray_train: LabeledDataset | None = None


def make_simpson_colored(
    ds: LabeledDataset,
    clients: int = 5,
    seed: int = 0,
    shades=DEFAULT_SHADES,
    test_fraction: float = 0.2,
    gray_range: tuple[float, float] | None = None,
) -> SimpsonSplit:
    """Colour digits 1/7 by shade so each client sees "1 darker than 7".

    Client ``c`` (1-based) renders 1s at ``shades[c-1]`` and 7s at
    ``shades[c]``; the held-out test set has both digits at every shade.
    Labels are relabelled to binary (0 = digit 1, 1 = digit 7).
    ``gray_train`` holds the pooled training images rendered achromatic at
    uniformly random brightness in ``gray_range`` (default: the shade span),
    for pretraining without the colour cue.
    """
    shades = tuple(float(s) for s in shades)
    if len(shades) != clients + 1:
        raise ValueError(f"need {clients + 1} shades for {clients} clients")
    labels = ds.labels
    present = set(np.unique(labels).tolist())
    if present != {1, 7}:
        raise ValueError(f"dataset must contain exactly classes {{1, 7}}, found {sorted(present)}")
    rng = np.random.default_rng(seed)
    binary = (labels == 7).astype(np.int64)
    perm = rng.permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    test_idx, train_idx = perm[:n_test], perm[n_test:]

    client_sets = []
    client_shades = []
    per_class = {cls: np.array_split(train_idx[binary[train_idx] == cls], clients) for cls in (0, 1)}
    for c in range(clients):
        lo, hi = shades[c], shades[c + 1]
        i1, i7 = per_class[0][c], per_class[1][c]
        xs = np.concatenate([colorize(ds.xs[i1], shade_rgb(lo)), colorize(ds.xs[i7], shade_rgb(hi))])
        ys = one_hot(np.concatenate([np.zeros(len(i1), np.int64), np.ones(len(i7), np.int64)]), 2)
        order = rng.permutation(len(xs))
        client_sets.append(LabeledDataset(xs[order], ys[order]))
        client_shades.append((lo, hi))

    # balanced test: shades assigned round-robin within each class
    shade_idx = np.empty(len(test_idx), dtype=np.int64)
    for cls in (0, 1):
        pos = np.flatnonzero(binary[test_idx] == cls)
        shade_idx[pos] = rng.permutation(np.arange(len(pos)) % len(shades))
    rgb = np.stack([shade_rgb(shades[s]) for s in shade_idx]) if len(test_idx) else np.zeros((0, 3))
    test = LabeledDataset(colorize(ds.xs[test_idx], rgb), one_hot(binary[test_idx], 2))

    lo, hi = gray_range or (shades[0], shades[-1])
    level = rng.uniform(lo, hi, size=len(train_idx))
    gray = colorize(ds.xs[train_idx], np.repeat(level[:, None], 3, axis=1))
    gray_train = LabeledDataset(gray, one_hot(binary[train_idx], 2))
    return SimpsonSplit(client_sets, test, shades, client_shades, shade_idx, gray_train)


# --------------------------------------------------------------------------
# local and global average data
# --------------------------------------------------------------------------

@dataclass
class LocalAverage:
    xs: np.ndarray
    ys: np.ndarray
    n: int
    client_id: int = 0

    def __iter__(self):
        return iter((self.xs, self.ys, self.n))


@dataclass
class GlobalAverageDataset:
    xs: np.ndarray
    ys: np.ndarray
    present: bool = True

    @classmethod
    def absent(cls) -> "GlobalAverageDataset":
        return cls(np.zeros((0, 0)), np.zeros((0, 0)), present=False)

    @property
    def size(self) -> int:
        return len(self.xs) if self.present else 0


def subset_means(values: np.ndarray, B: int, perm=None) -> tuple[np.ndarray, int]:
    values = np.asarray(values, dtype=np.float64)
    n = len(values) // B
    if n < 1:
        raise ValueError(f"need at least B={B} samples, have {len(values)}")
    perm = np.arange(len(values)) if perm is None else np.asarray(perm)
    kept = values[perm[: B * n]]
    return kept.reshape(B, n, *values.shape[1:]).mean(axis=1), n


def local_average(ds: LabeledDataset, B: int, rng=None, client_id: int = 0, shuffle: bool = True) -> LocalAverage:
    """B subset means of ``floor(|ds|/B)`` samples each; the remainder is dropped."""
    if B < 1:
        raise ValueError("B must be >= 1")
    if len(ds) < B:
        raise ValueError(f"dataset of {len(ds)} samples is smaller than B={B}")
    if shuffle:
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
        perm = rng.permutation(len(ds))
    else:
        perm = None
    xs, n = subset_means(ds.xs, B, perm)
    ys, _ = subset_means(ds.ys, B, perm)
    return LocalAverage(xs, ys, n, client_id)


def global_average_aggregate(locals_) -> GlobalAverageDataset:
    """Index-aligned mean of local averages weighted by subset size.

    Summation runs in ascending ``client_id`` order whatever the input order.
    """
    items = [la if isinstance(la, LocalAverage) else LocalAverage(*la) for la in locals_]
    if not items:
        raise ValueError("no local averages to aggregate")
    items.sort(key=lambda la: la.client_id)
    shape_x, shape_y = items[0].xs.shape, items[0].ys.shape
    for la in items:
        if la.xs.shape != shape_x or la.ys.shape != shape_y:
            raise ValueError("local averages disagree on B or width")
    total = float(sum(la.n for la in items))
    gx = np.zeros(shape_x)
    gy = np.zeros(shape_y)
    for la in items:
        w = la.n / total
        gx = gx + w * la.xs
        gy = gy + w * la.ys
    return GlobalAverageDataset(gx, gy, present=True)


def sample_global_batch(g: GlobalAverageDataset, m: int, rng) -> tuple[np.ndarray, np.ndarray]:
    if not g.present:
        raise ValueError("global average dataset is absent")
    rows = rng.integers(0, len(g.xs), size=m)
    return g.xs[rows], g.ys[rows]


def synthetic_mixture(n: int, classes: int = 10, dim: int = 64, seed: int = 0, spread: float = 1.0) -> LabeledDataset:
    """Gaussian class clusters around random prototypes, for the partition presets."""
    rng = np.random.default_rng(seed)
    protos = rng.normal(0.0, 1.0, size=(classes, dim))
    labels = rng.integers(0, classes, size=n)
    xs = protos[labels] + rng.normal(0.0, spread, size=(n, dim))
    return LabeledDataset(xs, one_hot(labels, classes))


def train_test_split(ds: LabeledDataset, test_fraction: float, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    perm = np.random.default_rng(seed).permutation(len(ds))
    n_test = int(round(test_fraction * len(ds)))
    return ds.subset(perm[n_test:]), ds.subset(perm[:n_test])
