"""Long-tailed paired multi-modal datasets: synthesis, label trimming,
affinity construction, head/tail partitioning, splits, and file I/O.

A dataset pairs an image-side feature matrix X (n x d_x) with a text-side
matrix Y (n x d_y) and a multi-hot label matrix (n x L). The synthetic
generator plants one latent center per class and emits both modalities as
noisy linear images of the same latent, so cross-modal class structure is
shared by construction.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

DATASET_MAGIC = b"LCMD"
DATASET_FORMAT_VERSION = 1


@dataclass
class MultiModalDataset:
    X: np.ndarray        # n x d_x
    Y: np.ndarray        # n x d_y
    labels: np.ndarray   # n x L, values in {0, 1}
    class_names: Optional[list] = None

    def __post_init__(self):
        n = self.X.shape[0]
        if self.Y.shape[0] != n or self.labels.shape[0] != n:
            raise ShapeError(
                f"row counts differ: X {self.X.shape}, Y {self.Y.shape}, "
                f"labels {self.labels.shape}"
            )
        if np.any(self.labels.sum(axis=1) < 1):
            raise ValueError("every sample needs at least one label")

    @property
    def n(self):
        return self.X.shape[0]

    @property
    def num_classes(self):
        return self.labels.shape[1]


@dataclass(frozen=True)
class LongTailSpec:
    """Shape of a synthetic long-tailed training pool.

    ``groups`` lists (num_classes, samples_per_class) blocks in descending
    sample count, e.g. the Flickr-style shape is
    ``[(4, 2000), (10, 200), (10, 50)]``. ``extra_per_class`` adds pool
    samples beyond the training counts so query/retrieval splits have
    material to draw from.
    """

    groups: Sequence[tuple]
    d_x: int = 32
    d_y: int = 24
    extra_per_class: int = 0
    mixed_fraction: float = 0.2
    latent_dim: int = 16
    noise_std: float = 0.5

    def __post_init__(self):
        counts = [c for _, c in self.groups]
        if any(k < 1 or c < 1 for k, c in self.groups):
            raise ConfigError("group counts must be >= 1")
        if counts != sorted(counts, reverse=True):
            raise ConfigError("groups must be sorted by descending samples_per_class")

    @property
    def num_classes(self):
        return sum(k for k, _ in self.groups)

    def class_counts(self):
        """Per-class training sample counts, classes ordered head-first."""
        out = []
        for k, c in self.groups:
            out.extend([c] * k)
        return np.asarray(out, dtype=np.int64)


@dataclass
class HeadTailPartition:
    is_head: np.ndarray   # bool, length L
    counts: np.ndarray    # training sample count per class

    @property
    def head_classes(self):
        return np.flatnonzero(self.is_head)

    @property
    def tail_classes(self):
        return np.flatnonzero(~self.is_head)


def synthesize_long_tailed(spec: LongTailSpec, seed: int) -> MultiModalDataset:
    """Generate a paired dataset whose per-class counts match the spec.

    Each class k gets a latent center z_k; a sample of class k is
    A_x z + noise on the image side and A_y z + noise on the text side for
    shared fixed maps A_x, A_y. A ``mixed_fraction`` of each class's samples
    mixes in a second class's latent and carries both labels.
    """
    rng = np.random.default_rng(seed)
    L = spec.num_classes
    counts = spec.class_counts() + spec.extra_per_class
    centers = rng.normal(size=(L, spec.latent_dim)) * 2.0
    a_x = rng.normal(size=(spec.d_x, spec.latent_dim)) / np.sqrt(spec.latent_dim)
    a_y = rng.normal(size=(spec.d_y, spec.latent_dim)) / np.sqrt(spec.latent_dim)

    xs, ys, labs = [], [], []
    for k in range(L):
        m = int(counts[k])
        n_mixed = int(np.floor(spec.mixed_fraction * m)) if L > 1 else 0
        second = rng.integers(0, L - 1, size=n_mixed) if n_mixed else np.empty(0, int)
        second = np.where(second >= k, second + 1, second)
        lab = np.zeros((m, L), dtype=np.uint8)
        lab[:, k] = 1
        z = np.tile(centers[k], (m, 1))
        for i, j in enumerate(second):
            z[i] = 0.5 * (centers[k] + centers[j])
            lab[i, j] = 1
        z = z + rng.normal(size=z.shape) * 0.3
        xs.append(z @ a_x.T + rng.normal(size=(m, spec.d_x)) * spec.noise_std)
        ys.append(z @ a_y.T + rng.normal(size=(m, spec.d_y)) * spec.noise_std)
        labs.append(lab)

    return MultiModalDataset(
        X=np.concatenate(xs), Y=np.concatenate(ys), labels=np.concatenate(labs)
    )


def trim_labels(labels: np.ndarray, min_keep: int = 2, max_keep: int = 3,
                seed: int = 0) -> np.ndarray:
    """Reduce rows with more than max_keep labels to min_keep..max_keep labels.

    Kept labels are the globally rarest ones (smallest column sums in the
    input matrix), ties broken by ascending class index; the keep count per
    row is drawn uniformly from [min_keep, max_keep]. Rows already at or
    below max_keep labels pass through unchanged.
    """
    labels = np.asarray(labels)
    if np.any(labels.sum(axis=1) < 1):
        raise ValueError("every row needs at least one label")
    rng = np.random.default_rng(seed)
    global_counts = labels.sum(axis=0)
    out = labels.copy()
    for i in range(labels.shape[0]):
        present = np.flatnonzero(labels[i])
        if present.size <= max_keep:
            continue
        keep_n = int(rng.integers(min_keep, max_keep + 1))
        # rarest first; lexsort's last key dominates, index breaks ties
        order = np.lexsort((present, global_counts[present]))
        keep = present[order[:keep_n]]
        out[i] = 0
        out[i, keep] = 1
    return out


def build_affinity(labels_a: np.ndarray, labels_b: np.ndarray) -> np.ndarray:
    """a_ij = 1 iff rows i (of labels_a) and j (of labels_b) share a label."""
    labels_a = np.asarray(labels_a)
    labels_b = np.asarray(labels_b)
    if labels_a.shape[1] != labels_b.shape[1]:
        raise ShapeError(
            f"label widths differ: {labels_a.shape} vs {labels_b.shape}"
        )
    return (labels_a.astype(np.int64) @ labels_b.astype(np.int64).T > 0).astype(np.uint8)


def split_head_tail(class_counts: np.ndarray, threshold: int) -> HeadTailPartition:
    """Flag a class as head iff its training count is >= threshold."""
    if threshold < 1:
        raise ConfigError("threshold must be >= 1")
    counts = np.asarray(class_counts, dtype=np.int64)
    return HeadTailPartition(is_head=counts >= threshold, counts=counts)


def primary_labels(labels: np.ndarray) -> np.ndarray:
    """First set label per row; used to attribute multi-label samples to one
    class when carving splits."""
    return np.argmax(np.asarray(labels) > 0, axis=1)


def split_query_retrieval(dataset: MultiModalDataset,
                          train_per_class: np.ndarray,
                          queries_per_class: int = 50,
                          seed: int = 0,
                          retrieval_includes_queries: bool = False):
    """Carve (train, query, retrieval) index sets out of the full pool.

    Per class (by primary label): train_per_class[k] samples go to training,
    then queries_per_class to the query set, the remainder to the retrieval
    set. A class with fewer spare samples than queries_per_class contributes
    all its non-training samples as queries; a class with no non-training
    samples is a configuration error when queries are requested.
    """
    train_per_class = np.asarray(train_per_class, dtype=np.int64)
    L = dataset.num_classes
    if train_per_class.shape != (L,):
        raise ShapeError(
            f"train_per_class shape {train_per_class.shape} != ({L},)"
        )
    rng = np.random.default_rng(seed)
    prim = primary_labels(dataset.labels)
    train, query, retrieval = [], [], []
    for k in range(L):
        idx = np.flatnonzero(prim == k)
        rng.shuffle(idx)
        t = min(int(train_per_class[k]), idx.size)
        rest = idx[t:]
        if queries_per_class > 0 and rest.size == 0:
            raise ConfigError(f"class {k} has no non-training samples for queries")
        q = min(queries_per_class, rest.size)
        train.append(idx[:t])
        query.append(rest[:q])
        retrieval.append(rest[q:])
    train = np.sort(np.concatenate(train))
    query = np.sort(np.concatenate(query))
    retrieval = np.sort(np.concatenate(retrieval))
    if retrieval_includes_queries:
        retrieval = np.sort(np.concatenate([retrieval, query]))
    return train, query, retrieval


# --- file I/O ----------------------------------------------------------------

def _pack_labels(labels: np.ndarray) -> bytes:
    return np.packbits(labels.astype(np.uint8), axis=1, bitorder="little").tobytes()


def _unpack_labels(buf: bytes, n: int, L: int) -> np.ndarray:
    row_bytes = (L + 7) // 8
    packed = np.frombuffer(buf, dtype=np.uint8).reshape(n, row_bytes)
    return np.unpackbits(packed, axis=1, bitorder="little")[:, :L]


def save_dataset(dataset: MultiModalDataset, path):
    with open(path, "wb") as f:
        f.write(DATASET_MAGIC)
        f.write(struct.pack("<I", DATASET_FORMAT_VERSION))
        n, d_x = dataset.X.shape
        d_y = dataset.Y.shape[1]
        L = dataset.labels.shape[1]
        f.write(struct.pack("<QQQQ", n, d_x, d_y, L))
        f.write(dataset.X.astype("<f8").tobytes())
        f.write(dataset.Y.astype("<f8").tobytes())
        f.write(_pack_labels(dataset.labels))


def load_dataset(path) -> MultiModalDataset:
    with open(path, "rb") as f:
        data = f.read()

    def take(offset, n, what):
        if offset + n > len(data):
            raise FormatError(f"truncated while reading {what} at offset {offset}")
        return data[offset:offset + n], offset + n

    magic, off = take(0, 4, "magic")
    if magic != DATASET_MAGIC:
        raise FormatError(f"bad magic {magic!r} at offset 0")
    buf, off = take(off, 4, "version")
    (version,) = struct.unpack("<I", buf)
    if version != DATASET_FORMAT_VERSION:
        raise FormatError(f"unsupported dataset version {version} at offset 4")
    buf, off = take(off, 32, "header")
    n, d_x, d_y, L = struct.unpack("<QQQQ", buf)
    buf, off = take(off, 8 * n * d_x, "X")
    X = np.frombuffer(buf, dtype="<f8").reshape(n, d_x).copy()
    buf, off = take(off, 8 * n * d_y, "Y")
    Y = np.frombuffer(buf, dtype="<f8").reshape(n, d_y).copy()
    buf, off = take(off, n * ((L + 7) // 8), "labels")
    labels = _unpack_labels(buf, n, L)
    return MultiModalDataset(X=X, Y=Y, labels=labels)


def load_csv(image_path, text_path, label_path, num_classes=None) -> MultiModalDataset:
    """Import external data: one CSV of floats per modality plus a label file
    with semicolon-separated class indices per line."""
    X = np.loadtxt(image_path, delimiter=",", ndmin=2)
    Y = np.loadtxt(text_path, delimiter=",", ndmin=2)
    rows = []
    with open(label_path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rows.append([int(tok) for tok in line.split(";") if tok])
    L = num_classes if num_classes is not None else max(max(r) for r in rows) + 1
    labels = np.zeros((len(rows), L), dtype=np.uint8)
    for i, r in enumerate(rows):
        labels[i, r] = 1
    return MultiModalDataset(X=X, Y=Y, labels=labels)
