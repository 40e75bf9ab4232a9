"""Dataset container, on-disk formats, and a seeded block-model generator.

A dataset bundles a graph, node features, integer labels (-1 marks an
unknown label), and disjoint train/val/test masks. On disk it is a JSON
manifest naming the individual files, so converters can produce one from
any public source without this package shipping the data itself.

Feature files are either CSV or a raw binary format: an 8-byte magic, two
little-endian int64 (rows, columns), then the row-major float64 payload.
The binary round-trips bit-exactly, which the determinism guarantees rely
on.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DomainError, FormatError
from .evalkit import PcaProjection, pca_apply, pca_fit
from .graphs import Graph, load_edge_list, make_graph

FEATURE_MAGIC = b"GCFLOW1\x00"

TRAIN_PER_CLASS = 20
VAL_PER_CLASS = 30


@dataclass
class Dataset:
    name: str
    graph: Graph
    features: np.ndarray
    labels: np.ndarray  # -1 where unknown
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int
    pca: PcaProjection | None = None

    @property
    def n(self):
        return self.graph.n

    @property
    def dim(self):
        return self.features.shape[1]

    def mask_indices(self, which):
        mask = getattr(self, f"{which}_mask")
        return np.flatnonzero(mask)


def _check(ds: Dataset):
    n = ds.graph.n
    if ds.features.shape[0] != n:
        raise FormatError(f"feature rows ({ds.features.shape[0]}) do not match node count ({n})")
    for field in ("labels", "train_mask", "val_mask", "test_mask"):
        if getattr(ds, field).shape[0] != n:
            raise FormatError(f"{field} length does not match node count ({n})")
    overlap = (
        (ds.train_mask & ds.val_mask) | (ds.train_mask & ds.test_mask) | (ds.val_mask & ds.test_mask)
    )
    if overlap.any():
        raise FormatError("train/val/test masks overlap")
    if np.any(ds.labels[ds.train_mask] < 0):
        raise FormatError("training nodes must have known labels")
    if np.any(ds.labels >= ds.num_classes):
        raise FormatError(f"label id exceeds class count {ds.num_classes}")
    return ds


# -- feature files ------------------------------------------------------


def write_features(path, x):
    x = np.ascontiguousarray(x, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<qq", x.shape[0], x.shape[1]))
        fh.write(x.tobytes())


def read_features(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != FEATURE_MAGIC:
            raise FormatError(f"{path}: not a feature file (bad magic)")
        header = fh.read(16)
        if len(header) != 16:
            raise FormatError(f"{path}: truncated header")
        rows, cols = struct.unpack("<qq", header)
        if rows < 0 or cols < 0:
            raise FormatError(f"{path}: negative dimensions in header")
        payload = fh.read()
    expected = rows * cols * 8
    if len(payload) != expected:
        raise FormatError(f"{path}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(rows, cols).copy()


def _load_feature_file(path):
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == FEATURE_MAGIC:
        return read_features(path)
    try:
        return np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise FormatError(f"{path}: cannot parse as CSV features ({exc})") from None


def _load_int_lines(path):
    values = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                values.append(int(line))
            except ValueError:
                raise FormatError(f"{path}:{lineno}: expected an integer") from None
    return np.array(values, dtype=np.intp)


def _mask_from_indices(indices, n, path):
    mask = np.zeros(n, dtype=bool)
    if indices.size:
        if indices.min() < 0 or indices.max() >= n:
            raise FormatError(f"{path}: node index out of range")
        mask[indices] = True
    return mask


# -- manifest load/save -------------------------------------------------

MANIFEST_KEYS = ("n", "dim", "classes", "features", "edges", "labels", "train", "val", "test")


def load_dataset(manifest_path) -> Dataset:
    """Read a manifest and every file it names, validating the result."""
    from pathlib import Path

    manifest_path = Path(manifest_path)
    with open(manifest_path) as fh:
        try:
            manifest = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{manifest_path}: invalid JSON ({exc})") from None
    missing = [k for k in MANIFEST_KEYS if k not in manifest]
    if missing:
        raise FormatError(f"{manifest_path}: missing keys {missing}")
    base = manifest_path.parent
    n = int(manifest["n"])
    dim = int(manifest["dim"])
    classes = int(manifest["classes"])

    features = _load_feature_file(base / manifest["features"])
    if features.shape != (n, dim):
        raise FormatError(
            f"features are {features.shape[0]}x{features.shape[1]}, manifest says {n}x{dim}"
        )
    try:
        graph = make_graph(n, load_edge_list(base / manifest["edges"]))
    except DomainError as exc:
        raise FormatError(f"edge list: {exc}") from None
    labels = _load_int_lines(base / manifest["labels"])
    if labels.shape[0] != n:
        raise FormatError(f"labels file has {labels.shape[0]} entries, expected {n}")
    masks = {
        which: _mask_from_indices(_load_int_lines(base / manifest[which]), n, manifest[which])
        for which in ("train", "val", "test")
    }
    ds = Dataset(
        name=str(manifest.get("name", manifest_path.parent.name)),
        graph=graph,
        features=features,
        labels=labels,
        train_mask=masks["train"],
        val_mask=masks["val"],
        test_mask=masks["test"],
        num_classes=classes,
    )
    return _check(ds)


def save_dataset(ds: Dataset, directory) -> str:
    """Write a dataset as manifest plus data files; returns the manifest path."""
    from pathlib import Path

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_features(directory / "features.bin", ds.features)
    with open(directory / "edges.tsv", "w") as fh:
        for i, j in ds.graph.edges:
            fh.write(f"{i}\t{j}\n")
    with open(directory / "labels.csv", "w") as fh:
        fh.writelines(f"{int(label)}\n" for label in ds.labels)
    for which in ("train", "val", "test"):
        with open(directory / f"{which}.txt", "w") as fh:
            fh.writelines(f"{i}\n" for i in ds.mask_indices(which))
    manifest = {
        "name": ds.name,
        "n": ds.n,
        "dim": ds.dim,
        "classes": ds.num_classes,
        "features": "features.bin",
        "edges": "edges.tsv",
        "labels": "labels.csv",
        "train": "train.txt",
        "val": "val.txt",
        "test": "test.txt",
    }
    path = directory / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return str(path)


# -- synthetic block model ----------------------------------------------


@dataclass
class SbmConfig:
    blocks: int = 3
    block_size: int = 100
    p_intra: float = 0.1
    q_inter: float = 0.01
    dim: int = 8
    separation: float = 3.0
    noise: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.q_inter < self.p_intra <= 1.0):
            raise DomainError(
                f"need 0 <= q < p <= 1, got p={self.p_intra}, q={self.q_inter}"
            )
        if self.separation <= 0.0:
            raise DomainError(f"class separation must be positive, got {self.separation}")
        if self.noise <= 0.0:
            raise DomainError(f"feature noise must be positive, got {self.noise}")
        if self.blocks < 2 or self.block_size < 1:
            raise DomainError("need at least two blocks of at least one node")


def generate_sbm(cfg: SbmConfig) -> Dataset:
    """Sample a block-model graph with Gaussian class-blob features.

    Class k's feature mean is the all-ones direction scaled to length
    k * separation, so adjacent classes sit `separation` apart regardless
    of dimension. The default split takes 20 train and 30 val nodes per
    class; blocks must be large enough to leave test nodes.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.blocks * cfg.block_size
    labels = np.repeat(np.arange(cfg.blocks), cfg.block_size)

    prob = np.where(labels[:, None] == labels[None, :], cfg.p_intra, cfg.q_inter)
    draw = rng.random((n, n))
    upper = np.triu(draw < prob, k=1)
    src, dst = np.nonzero(upper)
    graph = make_graph(n, list(zip(src.tolist(), dst.tolist())))

    direction = np.ones(cfg.dim) / np.sqrt(cfg.dim)
    features = labels[:, None] * cfg.separation * direction[None, :]
    features = features + cfg.noise * rng.normal(size=(n, cfg.dim))

    ds = Dataset(
        name=f"sbm{cfg.blocks}x{cfg.block_size}s{cfg.seed}",
        graph=graph,
        features=features,
        labels=labels,
        train_mask=np.zeros(n, dtype=bool),
        val_mask=np.zeros(n, dtype=bool),
        test_mask=np.zeros(n, dtype=bool),
        num_classes=cfg.blocks,
    )
    return make_split(ds, TRAIN_PER_CLASS, VAL_PER_CLASS, seed=cfg.seed)


def make_split(ds: Dataset, per_class_train, per_class_val, seed) -> Dataset:
    """Stratified masks: fixed counts per class, the labeled rest is test."""
    if per_class_train < 1 or per_class_val < 0:
        raise ConfigError("need at least one training node per class")
    rng = np.random.default_rng(seed)
    train = np.zeros(ds.n, dtype=bool)
    val = np.zeros(ds.n, dtype=bool)
    test = np.zeros(ds.n, dtype=bool)
    for c in range(ds.num_classes):
        mine = np.flatnonzero(ds.labels == c)
        if mine.size < per_class_train + per_class_val + 1:
            raise ConfigError(
                f"class {c} has {mine.size} labeled nodes, too few for "
                f"{per_class_train} train + {per_class_val} val + test"
            )
        order = rng.permutation(mine)
        train[order[:per_class_train]] = True
        val[order[per_class_train:per_class_train + per_class_val]] = True
        test[order[per_class_train + per_class_val:]] = True
    return _check(replace(ds, train_mask=train, val_mask=val, test_mask=test))


def apply_pca_reduction(ds: Dataset, r) -> Dataset:
    """Replace features with their top-r principal coordinates."""
    proj = pca_fit(ds.features, r)
    return replace(ds, features=pca_apply(proj, ds.features), pca=proj)
