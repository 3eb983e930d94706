"""Dataset ingestion, synthetic blobs and federated partitioning.

Samples are stored as columns: a :class:`DataMatrix` with ``m`` features and
``n`` samples has ``values.shape == (m, n)``.
"""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import kmeans_centralized, repair_empty

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataFormatError(ValueError):
    pass


@dataclass
class DataMatrix:
    values: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("values must be a 2-D (features x samples) array")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("values must be finite")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise ValueError(f"expected {self.n} labels, got {self.labels.shape}")
            if self.labels.size and self.labels.min() < 0:
                raise ValueError("labels must be >= 0")

    @property
    def m(self) -> int:
        return self.values.shape[0]

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels is not None and self.labels.size else 0

    def subset(self, indices) -> "DataMatrix":
        indices = np.asarray(indices, dtype=np.intp)
        labels = None if self.labels is None else self.labels[indices]
        return DataMatrix(self.values[:, indices], labels)


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    sample_indices: np.ndarray

    @property
    def n_i(self) -> int:
        return len(self.sample_indices)


def load_csv(path, has_labels: bool = False) -> DataMatrix:
    """Read a CSV whose rows are features and whose columns are samples.

    With ``has_labels`` the last row holds the integer class of each sample.
    """
    rows = []
    with open(path, newline="") as fh:
        for r, row in enumerate(csv.reader(fh)):
            if not row or all(not cell.strip() for cell in row):
                continue
            parsed = []
            for c, cell in enumerate(row):
                try:
                    value = float(cell)
                except ValueError:
                    raise DataFormatError(f"{path}: row {r}, column {c}: cannot parse {cell!r}") from None
                if not math.isfinite(value):
                    raise DataFormatError(f"{path}: row {r}, column {c}: non-finite value {cell!r}")
                parsed.append(value)
            if rows and len(parsed) != len(rows[0]):
                raise DataFormatError(f"{path}: row {r} has {len(parsed)} columns, expected {len(rows[0])}")
            rows.append(parsed)
    if not rows:
        raise DataFormatError(f"{path}: empty file")
    values = np.array(rows)
    labels = None
    if has_labels:
        if values.shape[0] < 2:
            raise DataFormatError(f"{path}: need at least one feature row plus the label row")
        raw = values[-1]
        if np.any(raw != np.round(raw)) or np.any(raw < 0):
            raise DataFormatError(f"{path}: label row must hold nonnegative integers")
        labels = raw.astype(np.int64)
        values = values[:-1]
    return DataMatrix(values, labels)


def _read_bytes(path) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, path) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataFormatError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = math.prod(dims)
    payload = raw[header:]
    if len(payload) != expected:
        raise DataFormatError(f"{path}: payload has {len(payload)} bytes, dimensions imply {expected}")
    return dims, payload


def load_idx(images_path, labels_path=None) -> DataMatrix:
    """Load an IDX image file (optionally gzipped) with pixels scaled to [0, 1]."""
    dims, payload = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    count, rows, cols = dims
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(count, rows * cols)
    values = pixels.T.astype(float) / 255.0
    labels = None
    if labels_path is not None:
        (n_labels,), lab = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
        if n_labels != count:
            raise DataFormatError(f"{labels_path}: {n_labels} labels for {count} images")
        labels = np.frombuffer(lab, dtype=np.uint8).astype(np.int64)
    return DataMatrix(values, labels)


def generate_blobs(m: int, k_true: int, n: int, separation: float, spread: float, seed: int) -> DataMatrix:
    """Gaussian blobs around ``k_true`` centres on a sphere of radius ``separation``.

    Cluster sizes differ by at most one and columns come in random order.
    """
    if m < 1 or k_true < 1 or n < k_true:
        raise ValueError(f"need m >= 1 and 1 <= k_true <= n, got m={m}, k_true={k_true}, n={n}")
    if separation <= 0 or spread < 0:
        raise ValueError("separation must be > 0 and spread >= 0")
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((m, k_true))
    centres *= separation / np.linalg.norm(centres, axis=0, keepdims=True)
    labels = rng.permutation(np.arange(n) % k_true)
    values = centres[:, labels] + spread * rng.standard_normal((m, n))
    return DataMatrix(values, labels)


def _check_cover(shards, n):
    if any(s.n_i == 0 for s in shards):
        raise AssertionError("empty shard")
    allidx = np.sort(np.concatenate([s.sample_indices for s in shards]))
    if not np.array_equal(allidx, np.arange(n)):
        raise AssertionError("shards do not form a disjoint cover")


def partition_iid(n: int, N: int, seed: int) -> list[ClientShard]:
    """Random permutation split into N blocks; the first ``n mod N`` get one extra."""
    if N < 1 or N > n:
        raise ValueError(f"need 1 <= N <= n, got N={N}, n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    return [ClientShard(i, np.sort(block)) for i, block in enumerate(np.array_split(perm, N))]


def _fragments_per_label(counts: np.ndarray, total: int) -> np.ndarray:
    # one fragment per present label, then repeatedly split the label whose
    # fragments are currently largest; keeps fragment sizes near-equal
    alloc = (counts > 0).astype(np.int64)
    for _ in range(total - int(alloc.sum())):
        size = np.where(alloc > 0, counts / np.maximum(alloc, 1), 0.0)
        alloc[int(np.argmax(size))] += 1
    return alloc


def partition_shards(labels, N: int, classes_per_client: int, seed: int) -> list[ClientShard]:
    """Label-sorted shards: every client gets ``classes_per_client`` single-label fragments.

    Fragments never straddle two labels; each label receives a number of
    near-equal fragments proportional to its frequency.
    """
    if labels is None:
        raise ValueError("shard partitioning needs labels")
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.size
    n_frag = N * classes_per_client
    if N < 1 or classes_per_client < 1:
        raise ValueError("N and classes_per_client must be >= 1")
    counts = np.bincount(labels)
    distinct = int((counts > 0).sum())
    if n_frag < distinct:
        raise ValueError(f"{n_frag} fragments cannot cover {distinct} distinct labels")
    if n_frag > n:
        raise ValueError(f"{n_frag} fragments exceed {n} samples")
    rng = np.random.default_rng(seed)
    order = np.argsort(labels, kind="stable")
    alloc = _fragments_per_label(counts, n_frag)
    fragments = []
    start = 0
    for label, count in enumerate(counts):
        block = order[start : start + count]
        start += count
        if count:
            fragments.extend(np.array_split(block, alloc[label]))
    dealt = rng.permutation(len(fragments))
    shards = []
    for i in range(N):
        picks = dealt[i * classes_per_client : (i + 1) * classes_per_client]
        shards.append(ClientShard(i, np.sort(np.concatenate([fragments[f] for f in picks]))))
    _check_cover(shards, n)
    return shards


def partition_by_kmeans(X, N: int, seed: int) -> list[ClientShard]:
    """One client per k-means cluster (k = N) of the samples."""
    X = X.values if isinstance(X, DataMatrix) else np.asarray(X, dtype=float)
    n = X.shape[1]
    if N < 1 or N > n:
        raise ValueError(f"need 1 <= N <= n, got N={N}, n={n}")
    _, labels = kmeans_centralized(X, N, seed=seed)
    labels = repair_empty(X, labels, N)
    return [ClientShard(i, np.flatnonzero(labels == i)) for i in range(N)]


def write_partition_csv(shards, path) -> None:
    rows = sorted((int(j), s.client_id) for s in shards for j in s.sample_indices)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_index", "client_id"])
        w.writerows(rows)


def read_partition_csv(path) -> list[ClientShard]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        pairs = [(int(r["sample_index"]), int(r["client_id"])) for r in reader]
    if not pairs:
        raise DataFormatError(f"{path}: no rows")
    N = max(c for _, c in pairs) + 1
    buckets = [[] for _ in range(N)]
    for j, c in pairs:
        buckets[c].append(j)
    return [ClientShard(i, np.array(sorted(b), dtype=np.int64)) for i, b in enumerate(buckets)]


def subsample(data: DataMatrix, size: int, seed: int) -> DataMatrix:
    """Uniform random subset of ``size`` samples, kept in original order."""
    if size > data.n:
        raise ValueError(f"cannot draw {size} of {data.n} samples")
    idx = np.sort(np.random.default_rng(seed).choice(data.n, size=size, replace=False))
    return data.subset(idx)


def subsample_balanced(data: DataMatrix, size: int, seed: int) -> DataMatrix:
    """Class-stratified subset: each label gets ``size // C`` samples (the first
    ``size mod C`` labels one more), kept in original order."""
    if data.labels is None:
        raise ValueError("balanced subsampling needs labels")
    C = data.n_classes
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(C):
        want = size // C + (1 if c < size % C else 0)
        pool = np.flatnonzero(data.labels == c)
        if want > pool.size:
            raise ValueError(f"label {c} has {pool.size} samples, {want} requested")
        picks.append(rng.choice(pool, size=want, replace=False))
    return data.subset(np.sort(np.concatenate(picks)))


def find_mnist(directory) -> tuple[Path, Path]:
    """Locate the training images/labels IDX pair (plain or gzipped) in ``directory``."""
    directory = Path(directory)
    for suffix in ("", ".gz"):
        images = directory / f"train-images-idx3-ubyte{suffix}"
        labels = directory / f"train-labels-idx1-ubyte{suffix}"
        if images.exists() and labels.exists():
            return images, labels
    raise FileNotFoundError(f"no MNIST training IDX files in {directory}")
