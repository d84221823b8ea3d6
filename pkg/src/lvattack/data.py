"""Datasets: synthetic generators (blobs, rings, token sequences, block-model
graphs), Planetoid-style citation graph ingestion, deterministic splits, and
bit-exact persistence.

Every generator is a pure function of (params, seed).
"""

from dataclasses import dataclass, field

import numpy as np

from . import serial
from .tensor import SeededRng

SPLIT_NAMES = ("train", "validation", "test")


@dataclass
class Dataset:
    """I.i.d. examples with per-example split assignments."""

    domain: str
    inputs: np.ndarray
    labels: np.ndarray
    splits: np.ndarray  # values from SPLIT_NAMES, one per example
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.inputs)
        if len(self.labels) != n or len(self.splits) != n:
            raise ValueError(f"inputs/labels/splits counts disagree: {n}/{len(self.labels)}/{len(self.splits)}")
        if n and (np.min(self.labels) < 0 or np.max(self.labels) >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.inputs)

    def indices(self, split: str) -> np.ndarray:
        if split not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split!r}")
        return np.flatnonzero(self.splits == split)


@dataclass
class GraphDataset:
    """One graph: dense symmetric 0/1 adjacency, node features, node labels."""

    adjacency: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    train_mask: np.ndarray = None
    val_mask: np.ndarray = None
    test_mask: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        a = self.adjacency
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"adjacency must be square, got {a.shape}")
        if np.max(np.abs(a - a.T)) != 0:
            raise ValueError("adjacency must be symmetric")
        if np.any(np.diag(a) != 0):
            raise ValueError("adjacency diagonal must be zero")

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    def node_indices(self, split: str) -> np.ndarray:
        mask = {"train": self.train_mask, "validation": self.val_mask, "test": self.test_mask}.get(split)
        if mask is None:
            raise ValueError(f"unknown or unassigned split {split!r}")
        return np.flatnonzero(mask)


def _balanced_labels(n: int, classes: int, rng: SeededRng) -> np.ndarray:
    # class counts differ by at most one example
    labels = np.concatenate([np.full(n // classes + (1 if c < n % classes else 0), c) for c in range(classes)])
    return labels[rng.permutation(n)].astype(np.intp)


def _assign_splits(n: int, rng: SeededRng, train_frac=0.7, val_frac=0.15) -> np.ndarray:
    order = rng.permutation(n)
    n_train = int(n * train_frac)
    n_val = int(n * val_frac)
    splits = np.empty(n, dtype=object)
    splits[order[:n_train]] = "train"
    splits[order[n_train : n_train + n_val]] = "validation"
    splits[order[n_train + n_val :]] = "test"
    return splits.astype("U10")


def _orthogonal_directions(classes: int, dim: int, rng: SeededRng) -> np.ndarray:
    if dim < classes:
        raise ValueError(f"blobs need dim >= classes, got dim={dim}, classes={classes}")
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q[:classes]


def gen_synthetic(kind: str, params: dict, rng: SeededRng):
    """Build a synthetic Dataset (blobs, rings, tokens) or GraphDataset (sbm-graph)."""
    if kind == "blobs":
        return _gen_blobs(params, rng)
    if kind == "rings":
        return _gen_rings(params, rng)
    if kind == "tokens":
        return _gen_tokens(params, rng)
    if kind == "images":
        return _gen_images(params, rng)
    if kind == "sbm-graph":
        return _gen_sbm_graph(params, rng)
    raise ValueError(f"unknown synthetic dataset kind {kind!r}")


def _check_counts(params):
    n = int(params.get("n", 200))
    classes = int(params.get("classes", 2))
    if classes < 2:
        raise ValueError(f"need at least 2 classes, got {classes}")
    if n < classes:
        raise ValueError(f"need at least one example per class, got n={n} for {classes} classes")
    return n, classes


def _gen_blobs(params, rng):
    n, classes = _check_counts(params)
    dim = int(params.get("dim", 4))
    radius = float(params.get("radius", 1.0))
    std = float(params.get("std", 0.4))
    centers = _orthogonal_directions(classes, dim, rng) * radius
    labels = _balanced_labels(n, classes, rng)
    inputs = centers[labels] + std * rng.standard_normal((n, dim))
    splits = _assign_splits(n, rng, params.get("train_frac", 0.7), params.get("val_frac", 0.15))
    meta = {"kind": "blobs", "dim": dim, "radius": radius, "std": std}
    return Dataset("vector", inputs, labels, splits, classes, meta)


def _gen_rings(params, rng):
    n, classes = _check_counts(params)
    gap = float(params.get("gap", 1.0))
    noise = float(params.get("noise", 0.1))
    labels = _balanced_labels(n, classes, rng)
    angles = rng.uniform(0.0, 2.0 * np.pi, n)
    radii = gap * (labels + 1) + noise * rng.standard_normal(n)
    inputs = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    splits = _assign_splits(n, rng, params.get("train_frac", 0.7), params.get("val_frac", 0.15))
    return Dataset("vector", inputs, labels, splits, classes, {"kind": "rings", "dim": 2})


def _gen_tokens(params, rng):
    n, classes = _check_counts(params)
    vocab_size = int(params.get("vocab_size", 40))
    seq_len = int(params.get("seq_len", 12))
    signal = float(params.get("signal", 0.7))
    slab = vocab_size // (classes + 1)
    if slab < 1:
        raise ValueError(f"vocab size {vocab_size} too small for {classes} classes")
    labels = _balanced_labels(n, classes, rng)
    inputs = np.empty((n, seq_len), dtype=np.intp)
    for i in range(n):
        preferred = rng.integers(labels[i] * slab, (labels[i] + 1) * slab, seq_len)
        background = rng.integers(0, vocab_size, seq_len)
        use_signal = rng.uniform(0.0, 1.0, seq_len) < signal
        inputs[i] = np.where(use_signal, preferred, background)
    splits = _assign_splits(n, rng, params.get("train_frac", 0.7), params.get("val_frac", 0.15))
    meta = {"kind": "tokens", "vocab_size": vocab_size, "seq_len": seq_len}
    return Dataset("text", inputs, labels, splits, classes, meta)


def _gen_images(params, rng):
    # per-class base pattern plus pixel noise, clipped to the unit range
    n, classes = _check_counts(params)
    channels = int(params.get("channels", 2))
    size = int(params.get("size", 8))
    std = float(params.get("std", 0.1))
    contrast = float(params.get("contrast", 0.35))
    patterns = 0.5 + contrast * np.sign(rng.standard_normal((classes, channels, size, size)))
    labels = _balanced_labels(n, classes, rng)
    inputs = patterns[labels] + std * rng.standard_normal((n, channels, size, size))
    inputs = np.clip(inputs, 0.0, 1.0)
    splits = _assign_splits(n, rng, params.get("train_frac", 0.7), params.get("val_frac", 0.15))
    meta = {"kind": "images", "channels": channels, "size": size}
    return Dataset("image", inputs, labels, splits, classes, meta)


def _gen_sbm_graph(params, rng):
    n, classes = _check_counts(params)
    dim = int(params.get("dim", 24))
    p_in = float(params.get("p_in", 0.1))
    p_out = float(params.get("p_out", 0.01))
    q_in = float(params.get("q_in", 0.4))
    q_out = float(params.get("q_out", 0.05))
    labels = _balanced_labels(n, classes, rng)

    same_block = labels[:, None] == labels[None, :]
    probs = np.where(same_block, p_in, p_out)
    upper = np.triu(rng.uniform(0.0, 1.0, (n, n)) < probs, 1)
    adjacency = (upper | upper.T).astype(np.float64)

    slab = dim // classes
    if slab < 1:
        raise ValueError(f"feature dim {dim} too small for {classes} classes")
    active_prob = np.full((n, dim), q_out)
    for c in range(classes):
        active_prob[labels == c, c * slab : (c + 1) * slab] = q_in
    features = (rng.uniform(0.0, 1.0, (n, dim)) < active_prob).astype(np.float64)
    features = row_normalize(features)

    graph = GraphDataset(adjacency, features, labels, classes, meta={"kind": "sbm-graph", "dim": dim})
    graph.train_mask, graph.val_mask, graph.test_mask = split_nodes(graph, rng.derive(1))
    return graph


def row_normalize(features: np.ndarray) -> np.ndarray:
    sums = features.sum(axis=1, keepdims=True)
    sums[sums == 0] = 1.0
    return features / sums


def load_citation_graph(content_path, cites_path) -> GraphDataset:
    """Read Planetoid-style text files.

    ``content``: per line, node id, binary feature vector, class label.
    ``cites``: per line, two node ids. Edges are symmetrized; edges naming
    unknown ids are skipped and counted in ``meta['skipped_edges']``.
    """
    ids = []
    feature_rows = []
    label_names = []
    with open(content_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) < 3:
                raise ValueError(f"{content_path}:{lineno}: expected id, features, label")
            ids.append(parts[0])
            try:
                feature_rows.append([float(v) for v in parts[1:-1]])
            except ValueError as err:
                raise ValueError(f"{content_path}:{lineno}: bad feature value ({err})") from None
            label_names.append(parts[-1])
            if len(feature_rows[-1]) != len(feature_rows[0]):
                raise ValueError(
                    f"{content_path}:{lineno}: {len(feature_rows[-1])} features, expected {len(feature_rows[0])}"
                )
    if not ids:
        raise ValueError(f"{content_path}: no nodes found")
    if len(set(ids)) != len(ids):
        raise ValueError(f"{content_path}: duplicate node ids")
    index = {node_id: i for i, node_id in enumerate(ids)}
    classes = sorted(set(label_names))
    labels = np.array([classes.index(name) for name in label_names], dtype=np.intp)
    features = row_normalize(np.asarray(feature_rows, dtype=np.float64))

    n = len(ids)
    adjacency = np.zeros((n, n))
    skipped = 0
    with open(cites_path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"{cites_path}:{lineno}: expected two node ids")
            a, b = parts
            if a not in index or b not in index:
                skipped += 1
                continue
            i, j = index[a], index[b]
            if i != j:
                adjacency[i, j] = 1.0
                adjacency[j, i] = 1.0
    meta = {"kind": "citation", "classes": classes, "skipped_edges": skipped, "node_ids": ids}
    return GraphDataset(adjacency, features, labels, len(classes), meta=meta)


def split_nodes(graph: GraphDataset, rng: SeededRng, scheme: str = "tenth-of-all"):
    """Deterministic node split masks.

    ``tenth-of-all``: 10% train, 10% validation, 80% test.
    ``tenth-of-labeled``: a 20% labeled pool of which 10% trains
    (2% train, 18% validation overall), the rest tests.
    """
    n = graph.n_nodes
    if n < 10:
        raise ValueError(f"need at least 10 nodes to split, got {n}")
    if scheme == "tenth-of-all":
        n_train = n // 10
        n_val = n // 10
    elif scheme == "tenth-of-labeled":
        labeled = n // 5
        n_train = labeled // 10
        n_val = labeled - n_train
    else:
        raise ValueError(f"unknown split scheme {scheme!r}")
    order = rng.permutation(n)
    train = np.zeros(n, dtype=bool)
    val = np.zeros(n, dtype=bool)
    test = np.zeros(n, dtype=bool)
    train[order[:n_train]] = True
    val[order[n_train : n_train + n_val]] = True
    test[order[n_train + n_val :]] = True
    return train, val, test


# ---------------------------------------------------------------------------
# persistence

_SPLIT_CODES = {name: i for i, name in enumerate(SPLIT_NAMES)}


def save_dataset(base: str, ds) -> None:
    if isinstance(ds, GraphDataset):
        meta = {"graph": True, "n_classes": ds.n_classes, "meta": ds.meta}
        arrays = [
            ("adjacency", ds.adjacency),
            ("features", ds.features),
            ("labels", ds.labels),
            ("train_mask", ds.train_mask),
            ("val_mask", ds.val_mask),
            ("test_mask", ds.test_mask),
        ]
    else:
        meta = {"graph": False, "domain": ds.domain, "n_classes": ds.n_classes, "meta": ds.meta}
        codes = np.array([_SPLIT_CODES[s] for s in ds.splits], dtype=np.int64)
        arrays = [("inputs", ds.inputs), ("labels", ds.labels), ("split_codes", codes)]
    serial.save_bundle(base, "dataset", meta, arrays)


def load_dataset(base: str):
    meta, arrays = serial.load_bundle(base, expect_kind="dataset")
    if meta["graph"]:
        return GraphDataset(
            arrays["adjacency"],
            arrays["features"],
            arrays["labels"].astype(np.intp),
            meta["n_classes"],
            train_mask=arrays["train_mask"].astype(bool),
            val_mask=arrays["val_mask"].astype(bool),
            test_mask=arrays["test_mask"].astype(bool),
            meta=meta["meta"],
        )
    splits = np.array([SPLIT_NAMES[c] for c in arrays["split_codes"]], dtype="U10")
    inputs = arrays["inputs"]
    if meta["domain"] == "text":
        inputs = inputs.astype(np.intp)
    return Dataset(meta["domain"], inputs, arrays["labels"].astype(np.intp), splits, meta["n_classes"], meta["meta"])
