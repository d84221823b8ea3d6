"""Trainable whitebox target classifiers exposing unnormalized class scores.

Scores are raw logits, differentiable with respect to the input when a tape
is supplied, which is what the attack modules rely on. Predictions break
argmax ties toward the lowest class index.
"""

import hashlib
import logging

import numpy as np

from . import layers as L
from . import tensor as T
from .data import Dataset, GraphDataset
from .tensor import GradientTape, SeededRng, Tensor

log = logging.getLogger(__name__)


class Classifier:
    arch = "base"

    def __init__(self, n_classes: int):
        self.n_classes = n_classes
        self.frozen = False

    def scores(self, x, tape=None) -> Tensor:
        raise NotImplementedError

    def parameters(self):
        raise NotImplementedError

    def param_tensors(self):
        return [t for _, t in self.parameters()]


class MlpClassifier(Classifier):
    """Two-layer perceptron for vector inputs."""

    arch = "mlp"

    def __init__(self, in_dim: int, hidden: int, n_classes: int, rng: SeededRng):
        super().__init__(n_classes)
        self.in_dim = in_dim
        self.hidden_dim = hidden
        self.hidden = L.LinearLayer(in_dim, hidden, rng)
        self.head = L.LinearLayer(hidden, n_classes, rng)

    def scores(self, x, tape=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"input shape {x.shape} does not match in_dim {self.in_dim}")
        return self.head.forward(T.relu(self.hidden.forward(x, tape)), tape)

    def parameters(self):
        return [(f"hidden.{n}", t) for n, t in self.hidden.parameters()] + [
            (f"head.{n}", t) for n, t in self.head.parameters()
        ]

    def meta(self):
        return {"in_dim": self.in_dim, "hidden": self.hidden_dim}


class ConvClassifier(Classifier):
    """Small conv + dense model for [C, H, W] images in the unit range."""

    arch = "conv"

    def __init__(self, channels: int, size: int, n_classes: int, rng: SeededRng, conv_channels: int = 6):
        super().__init__(n_classes)
        self.channels = channels
        self.size = size
        self.conv_channels = conv_channels
        self.conv = L.Conv2dLayer(channels, conv_channels, 3, rng, stride=1, padding=1)
        self.head = L.LinearLayer(conv_channels * size * size, n_classes, rng)

    def scores(self, x, tape=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        single = x.data.ndim == 3
        h = T.relu(L.conv2d_forward(self.conv, x, tape))
        flat_dim = self.conv_channels * self.size * self.size
        h = T.reshape(h, (flat_dim,) if single else (x.shape[0], flat_dim))
        return self.head.forward(h, tape)

    def parameters(self):
        return [(f"conv.{n}", t) for n, t in self.conv.parameters()] + [
            (f"head.{n}", t) for n, t in self.head.parameters()
        ]

    def meta(self):
        return {"channels": self.channels, "size": self.size, "conv_channels": self.conv_channels}


class LstmClassifier(Classifier):
    """Single-layer LSTM over learned token embeddings, classifying sequences.

    Accepts either integer token ids (embedded via the model's table) or an
    already-embedded [T, emb] tensor, which is the path attacks differentiate
    through.
    """

    arch = "lstm"

    def __init__(self, vocab_size: int, emb_dim: int, hidden: int, n_classes: int, rng: SeededRng):
        super().__init__(n_classes)
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hidden_dim = hidden
        self.embeddings = Tensor(rng.standard_normal((vocab_size, emb_dim)) * 0.3)
        self.cell = L.LstmCell(emb_dim, hidden, rng)
        self.head = L.LinearLayer(hidden, n_classes, rng)

    def scores(self, x, tape=None) -> Tensor:
        if isinstance(x, Tensor):
            return self.scores_embeddings(x, tape)
        return self.scores_tokens(np.asarray(x), tape)

    def scores_tokens(self, ids: np.ndarray, tape=None) -> Tensor:
        single = ids.ndim == 1
        ids2 = ids[None, :] if single else ids
        if np.any(ids2 < 0) or np.any(ids2 >= self.vocab_size):
            raise ValueError(f"token ids must lie in [0, {self.vocab_size})")
        emb = tape.watch(self.embeddings) if tape is not None else self.embeddings
        steps = [T.gather_rows(emb, ids2[:, t]) for t in range(ids2.shape[1])]
        _, final = L.lstm_forward(self.cell, steps, tape=tape)
        logits = self.head.forward(final, tape)
        return T.reshape(logits, (self.n_classes,)) if single else logits

    def scores_embeddings(self, seq: Tensor, tape=None) -> Tensor:
        if seq.data.ndim != 2 or seq.shape[1] != self.emb_dim:
            raise ValueError(f"expected [T, {self.emb_dim}] embeddings, got {seq.shape}")
        steps = [T.gather_rows(seq, [t]) for t in range(seq.shape[0])]
        _, final = L.lstm_forward(self.cell, steps, tape=tape)
        logits = self.head.forward(final, tape)
        return T.reshape(logits, (self.n_classes,))

    def parameters(self):
        out = [("embeddings", self.embeddings)]
        out += [(f"cell.{n}", t) for n, t in self.cell.parameters()]
        out += [(f"head.{n}", t) for n, t in self.head.parameters()]
        return out

    def meta(self):
        return {"vocab_size": self.vocab_size, "emb_dim": self.emb_dim, "hidden": self.hidden_dim}


class GcnClassifier(Classifier):
    """Single graph-convolution layer: logits = A_hat X W + b for all nodes."""

    arch = "gcn"

    def __init__(self, a_hat: Tensor, in_dim: int, n_classes: int, rng: SeededRng):
        super().__init__(n_classes)
        self.in_dim = in_dim
        self.a_hat = a_hat
        self.layer = L.GraphConvLayer(in_dim, n_classes, rng)
        self.bias = Tensor(np.zeros(n_classes))

    def scores(self, x, tape=None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return T.add_bias(L.gcn_forward(self.a_hat, x, self.layer, tape), tape.watch(self.bias) if tape else self.bias)

    def node_scores_with_delta(self, clean_row: np.ndarray, delta_rows: Tensor, attacker_idx, node: int, tape=None):
        """Logits of one node after adding ``delta_rows`` to the attacker rows.

        Single-layer propagation is linear in the features, so the perturbed
        logits are the clean logits plus sum_j A_hat[node, j] (delta_j W).
        """
        w = tape.watch(self.layer.weight) if tape is not None else self.layer.weight
        coeffs = Tensor(self.a_hat.data[node, np.asarray(attacker_idx, dtype=np.intp)].reshape(1, -1))
        correction = T.matmul(coeffs, T.matmul(delta_rows, w))
        return T.add(Tensor(clean_row), T.reshape(correction, (self.n_classes,)))

    def parameters(self):
        return [("layer.weight", self.layer.weight), ("bias", self.bias)]

    def meta(self):
        return {"in_dim": self.in_dim}


def build_target(arch: str, n_classes: int, rng: SeededRng, a_hat: Tensor = None, **dims) -> Classifier:
    if arch == "mlp":
        return MlpClassifier(dims["in_dim"], dims.get("hidden", 32), n_classes, rng)
    if arch == "conv":
        return ConvClassifier(dims["channels"], dims["size"], n_classes, rng, dims.get("conv_channels", 6))
    if arch == "lstm":
        return LstmClassifier(dims["vocab_size"], dims.get("emb_dim", 16), dims.get("hidden", 32), n_classes, rng)
    if arch == "gcn":
        if a_hat is None:
            raise ValueError("gcn target needs the normalized adjacency")
        return GcnClassifier(a_hat, dims["in_dim"], n_classes, rng)
    raise ValueError(f"unknown architecture {arch!r}")


def scores(model: Classifier, x, tape=None) -> Tensor:
    return model.scores(x, tape)


def predict(model: Classifier, x) -> int:
    return int(np.argmax(model.scores(x).data))


def param_checksum(model) -> str:
    digest = hashlib.sha256()
    for name, t in model.parameters():
        digest.update(name.encode())
        digest.update(t.data.tobytes())
    return digest.hexdigest()


# ---------------------------------------------------------------------------
# training and evaluation


def _batch_scores(model, inputs, idx, tape=None):
    if model.arch == "lstm":
        return model.scores_tokens(inputs[idx], tape)
    return model.scores(Tensor(inputs[idx]), tape)


def train_target(model: Classifier, dataset, epochs: int, lr: float, batch_size: int = 32, seed: int = 0):
    """Adam on cross-entropy; returns (model, per-epoch accuracy history).

    The model is marked frozen on return. Graph targets train full-batch on
    the train mask; i.i.d. targets train on shuffled train-split minibatches.
    """
    if isinstance(dataset, GraphDataset):
        return _train_gcn(model, dataset, epochs, lr)
    if len(dataset) == 0 or len(dataset.indices("train")) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = SeededRng(seed)
    params = model.param_tensors()
    state = L.AdamState(params, lr=lr)
    train_idx = dataset.indices("train")
    history = {"train": [], "validation": []}
    for _ in range(epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        for start in range(0, len(order), batch_size):
            batch = order[start : start + batch_size]
            tape = GradientTape()
            logits = _batch_scores(model, dataset.inputs, batch, tape)
            loss = L.cross_entropy(logits, dataset.labels[batch])
            grads = T.backward(loss)
            L.adam_step(state, params, [grads.get(tape.leaf_id(p)) for p in params])
        history["train"].append(accuracy(model, dataset, split="train"))
        history["validation"].append(accuracy(model, dataset, split="validation"))
    model.frozen = True
    return model, history


def _train_gcn(model: GcnClassifier, graph: GraphDataset, epochs: int, lr: float):
    if graph.train_mask is None or not graph.train_mask.any():
        raise ValueError("graph dataset has no train split")
    params = model.param_tensors()
    state = L.AdamState(params, lr=lr)
    train_idx = np.flatnonzero(graph.train_mask)
    history = {"train": [], "validation": []}
    for _ in range(epochs):
        tape = GradientTape()
        logits = model.scores(Tensor(graph.features), tape)
        loss = L.cross_entropy(T.gather_rows(logits, train_idx), graph.labels[train_idx])
        grads = T.backward(loss)
        L.adam_step(state, params, [grads.get(tape.leaf_id(p)) for p in params])
        history["train"].append(accuracy(model, graph, split="train"))
        history["validation"].append(accuracy(model, graph, split="validation"))
    model.frozen = True
    return model, history


def accuracy(model: Classifier, dataset, split: str = None) -> float:
    """Fraction of correct argmax predictions; empty selections score 0.0."""
    if isinstance(dataset, GraphDataset):
        idx = dataset.node_indices(split) if split else np.arange(dataset.n_nodes)
        if len(idx) == 0:
            log.warning("accuracy over an empty node selection, reporting 0.0")
            return 0.0
        logits = model.scores(Tensor(dataset.features)).data
        return float(np.mean(np.argmax(logits[idx], axis=1) == dataset.labels[idx]))
    idx = dataset.indices(split) if split else np.arange(len(dataset))
    if len(idx) == 0:
        log.warning("accuracy over an empty dataset, reporting 0.0")
        return 0.0
    correct = 0
    for start in range(0, len(idx), 256):
        batch = idx[start : start + 256]
        logits = _batch_scores(model, dataset.inputs, batch).data
        correct += int(np.sum(np.argmax(logits, axis=1) == dataset.labels[batch]))
    return correct / len(idx)


# ---------------------------------------------------------------------------
# persistence


def save_target(base: str, model: Classifier) -> None:
    meta = {"arch": model.arch, "n_classes": model.n_classes, "dims": model.meta()}
    L.save_checkpoint(base, model.parameters(), meta)


def load_target(base: str, a_hat: Tensor = None) -> Classifier:
    """Rebuild a target from a checkpoint; gcn targets need ``a_hat`` supplied."""
    meta, arrays = L.load_checkpoint(base)
    model = build_target(meta["arch"], meta["n_classes"], SeededRng(0), a_hat=a_hat, **meta["dims"])
    for name, t in model.parameters():
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != t.data.shape:
            raise ValueError(f"parameter {name!r} shape {arrays[name].shape} != {t.data.shape}")
        t.data[...] = arrays[name]
    model.frozen = True
    return model
