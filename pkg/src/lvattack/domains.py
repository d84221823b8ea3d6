"""Domain bindings: combination functions, similarity functions, the
differentiable nearest-neighbor token mixture with its hard projection, and
attacker-set masking for graph attacks.

Adapters are immutable after construction; per-node graph masks are attached
with ``with_mask`` which returns a copy.
"""

import dataclasses
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .data import GraphDataset
from .tensor import SeededRng, Tensor


class Vocabulary:
    """Token list plus embedding rows; rows must be nonzero so angular
    distance is defined for every word."""

    def __init__(self, tokens, embeddings: Tensor):
        self.tokens = list(tokens)
        self.embeddings = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
        if len(self.tokens) != self.embeddings.shape[0]:
            raise ValueError(
                f"{len(self.tokens)} tokens but {self.embeddings.shape[0]} embedding rows"
            )
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        norms = np.linalg.norm(self.embeddings.data, axis=1)
        if np.any(norms == 0):
            raise ValueError("vocabulary embeddings must be nonzero rows")
        self._inv_norms = 1.0 / norms

    def __len__(self):
        return len(self.tokens)

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def row(self, token_id: int) -> np.ndarray:
        return self.embeddings.data[token_id]


def save_vocabulary(base: str, vocab: Vocabulary) -> None:
    with open(base + ".txt", "w") as fh:
        for token in vocab.tokens:
            fh.write(f"{token}\n")
    T.write_tensor_file(base + ".tns", vocab.embeddings)


def load_vocabulary(base: str) -> Vocabulary:
    with open(base + ".txt") as fh:
        tokens = [line.rstrip("\n") for line in fh if line.strip()]
    return Vocabulary(tokens, T.read_tensor_file(base + ".tns"))


@dataclass(frozen=True)
class InfluencerMask:
    """Binary node mask: b is 1 exactly on the attacker set."""

    b: np.ndarray
    attacker_set: np.ndarray
    target_set: np.ndarray

    def __post_init__(self):
        expected = np.zeros_like(self.b)
        expected[self.attacker_set] = 1.0
        if not np.array_equal(self.b, expected):
            raise ValueError("mask b must be 1 exactly on the attacker set")
        direct = np.array_equal(np.sort(self.attacker_set), np.sort(self.target_set))
        overlap = np.intersect1d(self.attacker_set, self.target_set)
        if not direct and overlap.size:
            raise ValueError("influencer attacker set must exclude the target")

    @property
    def is_direct(self) -> bool:
        return np.array_equal(np.sort(self.attacker_set), np.sort(self.target_set))


@dataclass(frozen=True)
class DomainAdapter:
    """Combination + similarity bindings that make the attack domain-agnostic."""

    domain: str
    combination: str  # additive | masked | soft-nn
    similarity_mode: str  # l2 | angular
    vocab: Optional[Vocabulary] = None
    mask: Optional[InfluencerMask] = None
    tau: float = 1.0
    clamp: Optional[tuple] = None
    cap_fraction: Optional[float] = None

    def __post_init__(self):
        if self.combination == "soft-nn" and self.vocab is None:
            raise ValueError("soft-nn combination requires a vocabulary")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")

    def with_mask(self, mask: InfluencerMask) -> "DomainAdapter":
        # masked combination needs a mask at combine time; graph adapters
        # start bare and get one attached per attacked node
        return dataclasses.replace(self, mask=mask)


def build_adapter(domain: str, vocab: Vocabulary = None, tau: float = 1.0,
                  cap_fraction: float = 0.15) -> DomainAdapter:
    if domain == "vector":
        return DomainAdapter("vector", "additive", "l2")
    if domain == "image":
        return DomainAdapter("image", "additive", "l2", clamp=(0.0, 1.0))
    if domain == "text":
        if vocab is None:
            raise ValueError("text adapter requires a vocabulary")
        return DomainAdapter("text", "soft-nn", "l2", vocab=vocab, tau=tau, cap_fraction=cap_fraction)
    if domain == "graph":
        return DomainAdapter("graph", "masked", "l2")
    raise ValueError(f"unknown domain {domain!r}")


# ---------------------------------------------------------------------------
# combination functions


def combine_additive(delta: Tensor, x: Tensor, evaluation: bool = False, clamp=None) -> Tensor:
    """x' = x + delta; clamped to the valid range at evaluation time only."""
    if delta.shape != x.shape:
        raise ValueError(f"shape mismatch: delta {delta.shape} vs input {x.shape}")
    out = T.add(x, delta)
    if evaluation and clamp is not None:
        return Tensor(np.clip(out.data, clamp[0], clamp[1]))
    return out


def combine_masked(delta: Tensor, x: Tensor, mask: InfluencerMask) -> Tensor:
    """x' equals x bit-for-bit on rows with b = 0 and x + delta on attacker rows."""
    if delta.shape != x.shape:
        raise ValueError(f"shape mismatch: delta {delta.shape} vs input {x.shape}")
    if mask.b.shape[0] != x.shape[0]:
        raise ValueError(f"mask covers {mask.b.shape[0]} rows, input has {x.shape[0]}")
    rows = np.flatnonzero(mask.b)
    out = x.data.copy()
    out[rows] = x.data[rows] + delta.data[rows]

    def bwd(g):
        gd = np.zeros_like(delta.data)
        gd[rows] = g[rows]
        return gd, g.copy()

    return T.apply_op(out, (delta, x), bwd)


def _taped_angular_weights(perturbed: Tensor, vocab: Vocabulary, tau: float) -> Tensor:
    # softmax over negated angular distances: nearer words weigh more
    norm = float(np.linalg.norm(perturbed.data))
    if norm == 0.0:
        raise ValueError("perturbed embedding is the zero vector; angular distance undefined")
    dots = T.matmul(vocab.embeddings, perturbed)
    cos = T.div(T.mul(dots, Tensor(vocab._inv_norms)), T.l2_norm(perturbed))
    alpha = T.arccos(cos)
    return T.softmax(T.neg(alpha), axis=0, temperature=tau)


def soft_nn_mixture(perturbed: Tensor, vocab: Vocabulary, tau: float):
    """Differentiable mixture sum_w softmax(-alpha/tau)_w E(w) for a perturbed
    embedding; returns (mixture, weights)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    weights = _taped_angular_weights(perturbed, vocab, tau)
    mixed = T.matmul(T.reshape(weights, (1, -1)), vocab.embeddings)
    return T.reshape(mixed, (-1,)), weights


def soft_nn_combine(delta_i: Tensor, token_id: int, vocab: Vocabulary, tau: float) -> Tensor:
    """Training-time combination for one token: relax E(x_i) + delta_i onto
    the vocabulary simplex via nearest-neighbor attention."""
    perturbed = T.add(Tensor(vocab.row(int(token_id))), delta_i)
    mixed, _ = soft_nn_mixture(perturbed, vocab, tau)
    return mixed


def angular_distances(vector: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    norm = np.linalg.norm(vector)
    if norm == 0.0:
        raise ValueError("cannot project the zero vector")
    cos = (vocab.embeddings.data @ vector) * vocab._inv_norms / norm
    return np.arccos(np.clip(cos, -1.0, 1.0))


def hard_nn_project(vector, vocab: Vocabulary) -> int:
    """Nearest vocabulary token by angular distance; ties go to the lowest id."""
    v = vector.data if isinstance(vector, Tensor) else np.asarray(vector, dtype=np.float64)
    return int(np.argmin(angular_distances(v, vocab)))


# ---------------------------------------------------------------------------
# graph attacker sets


def select_influencer_set(graph: GraphDataset, target_node: int, k: int = 5,
                          rng: SeededRng = None) -> InfluencerMask:
    """Sample up to k neighbors of the target as the attacker set; pad with
    random non-target, non-neighbor nodes when the neighborhood is smaller."""
    n = graph.n_nodes
    if n < 2:
        raise ValueError("cannot pick an attacker set in a single-node graph")
    if rng is None:
        rng = SeededRng(0)
    neighbors = np.flatnonzero(graph.adjacency[target_node])
    neighbors = neighbors[neighbors != target_node]
    if len(neighbors) >= k:
        chosen = neighbors[rng.choice(len(neighbors), size=k, replace=False)]
    else:
        pool = np.setdiff1d(np.arange(n), np.concatenate([[target_node], neighbors]))
        need = k - len(neighbors)
        if len(pool) < need:
            raise ValueError(f"graph too small to assemble {k} attacker nodes for node {target_node}")
        extra = pool[rng.choice(len(pool), size=need, replace=False)]
        chosen = np.concatenate([neighbors, extra])
    attacker = np.sort(chosen.astype(np.intp))
    b = np.zeros(n)
    b[attacker] = 1.0
    return InfluencerMask(b, attacker, np.array([target_node], dtype=np.intp))


def direct_mask(n_nodes: int, target_node: int) -> InfluencerMask:
    b = np.zeros(n_nodes)
    b[target_node] = 1.0
    idx = np.array([target_node], dtype=np.intp)
    return InfluencerMask(b, idx, idx)


# ---------------------------------------------------------------------------
# similarity and token metrics


def similarity(mode: str, x: Tensor, x_prime: Tensor) -> Tensor:
    """Perturbation magnitude: l2 distance or angular distance in [0, pi]."""
    if x.shape != x_prime.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x_prime.shape}")
    if mode == "l2":
        diff = T.sub(T.reshape(x_prime, (-1,)), T.reshape(x, (-1,)))
        return T.l2_norm(diff)
    if mode == "angular":
        na = float(np.linalg.norm(x.data))
        nb = float(np.linalg.norm(x_prime.data))
        if na == 0.0 or nb == 0.0:
            raise ValueError("angular similarity undefined for the zero vector")
        dot = T.matmul(T.reshape(x, (-1,)), T.reshape(x_prime, (-1,)))
        cos = T.div(T.div(dot, T.l2_norm(x)), T.l2_norm(x_prime))
        return T.arccos(cos)
    raise ValueError(f"unknown similarity mode {mode!r}")


def token_change_rate(original, perturbed) -> float:
    a = np.asarray(original)
    b = np.asarray(perturbed)
    if a.shape != b.shape:
        raise ValueError(f"sequence lengths differ: {a.shape} vs {b.shape}")
    return float(np.mean(a != b))


def enforce_token_cap(original_ids, candidate_ids, delta_norms, cap_fraction: float):
    """Keep at most floor(cap * T) changed positions, picked by largest
    perturbation norm; every other position reverts to the original token."""
    orig = np.asarray(original_ids)
    cand = np.asarray(candidate_ids)
    norms = np.asarray(delta_norms, dtype=np.float64)
    if not (orig.shape == cand.shape == norms.shape):
        raise ValueError("original ids, candidate ids, and norms must share a length")
    budget = int(np.floor(cap_fraction * len(orig)))
    out = orig.copy()
    changed = np.flatnonzero(cand != orig)
    if len(changed) > budget:
        keep = changed[np.argsort(-norms[changed], kind="stable")[:budget]]
    else:
        keep = changed
    out[keep] = cand[keep]
    return out
