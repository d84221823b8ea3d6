"""Latent-variable perturbation generator.

A probabilistic encoder maps an input to a Gaussian over latent codes, a
decoder maps sampled codes to perturbations in the bound domain's
perturbation space, and the two are trained end to end against a frozen
whitebox target with a hinge misclassification loss plus lambda-weighted
magnitude and KL penalties. Because the latent state is stochastic, failed
attacks can be retried by resampling fresh codes at no optimization cost.

The non-variational ablation (``variational=False``) uses the encoder mean
directly: sampling is the identity on mu and the KL term is omitted, so its
attacks are deterministic and resampling cannot help.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import layers as L
from . import tensor as T
from .data import Dataset, GraphDataset
from .domains import (
    DomainAdapter,
    Vocabulary,
    build_adapter,
    combine_additive,
    combine_masked,
    enforce_token_cap,
    hard_nn_project,
    select_influencer_set,
    similarity,
    soft_nn_mixture,
)
from .tensor import GradientTape, SeededRng, Tensor


@dataclass
class EncoderOutput:
    mu: Tensor
    sigma: Tensor  # strictly positive, same shape as mu


@dataclass
class GaalvConfig:
    """Attacker training and sampling knobs; the reproducibility contract."""

    lambda_: float = 0.1
    latent_dim: int = 8
    tau: float = 1.0
    lr: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    resample_budget: int = 0
    seed: int = 0
    variational: bool = True
    hidden: int = 64
    graph_attack: str = "direct"  # direct | influencer
    influencer_k: int = 5
    cap_fraction: float = 0.15

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ValueError(f"lambda must be nonnegative, got {self.lambda_}")
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.resample_budget < 0:
            raise ValueError(f"resample budget must be nonnegative, got {self.resample_budget}")
        if self.graph_attack not in ("direct", "influencer"):
            raise ValueError(f"unknown graph attack mode {self.graph_attack!r}")


@dataclass
class AdversarialRecord:
    """Outcome of attacking one example."""

    example_id: Optional[int]
    original: object
    perturbed: object
    label: int
    predicted: int
    success: bool
    delta: float
    samples_consumed: int
    extras: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# encoder backbones


class VectorBackbone:
    def __init__(self, in_dim, hidden, rng):
        self.body = L.LinearLayer(in_dim, hidden, rng)

    def forward(self, x, tape=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return T.relu(self.body.forward(x, tape))

    def parameters(self):
        return [(f"body.{n}", t) for n, t in self.body.parameters()]


class ImageBackbone:
    def __init__(self, channels, size, hidden, rng, conv_channels=8):
        self.conv = L.Conv2dLayer(channels, conv_channels, 3, rng, stride=1, padding=1)
        self.flat_dim = conv_channels * size * size
        self.body = L.LinearLayer(self.flat_dim, hidden, rng)

    def forward(self, x, tape=None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = T.relu(L.conv2d_forward(self.conv, x, tape))
        return T.relu(self.body.forward(T.reshape(h, (self.flat_dim,)), tape))

    def parameters(self):
        return [(f"conv.{n}", t) for n, t in self.conv.parameters()] + [
            (f"body.{n}", t) for n, t in self.body.parameters()
        ]


class TextBackbone:
    """LSTM over the (frozen) vocabulary embeddings of the input tokens."""

    def __init__(self, vocab: Vocabulary, hidden, rng):
        self.vocab = vocab
        self.cell = L.LstmCell(vocab.dim, hidden, rng)

    def forward(self, token_ids, tape=None):
        ids = np.asarray(token_ids, dtype=np.intp)
        steps = [Tensor(self.vocab.row(t)) for t in ids]
        _, final = L.lstm_forward(self.cell, steps, tape=tape)
        return final

    def parameters(self):
        return [(f"cell.{n}", t) for n, t in self.cell.parameters()]


class GraphBackbone:
    """One graph-convolution layer evaluated at a single node.

    The clean-feature aggregation A_hat X is constant during an attack, so it
    is precomputed; the per-node hidden state is relu((A_hat X)_node W + b).
    """

    def __init__(self, aggregated: np.ndarray, hidden, rng):
        self.aggregated = aggregated
        self.body = L.LinearLayer(aggregated.shape[1], hidden, rng)

    def forward(self, node, tape=None):
        return T.relu(self.body.forward(Tensor(self.aggregated[int(node)]), tape))

    def parameters(self):
        return [(f"body.{n}", t) for n, t in self.body.parameters()]


# ---------------------------------------------------------------------------
# decoders


class MlpDecoder:
    """Dense decoder emitting a fixed-shape perturbation (vector, image, or
    attacker-row block for graphs)."""

    def __init__(self, latent_dim, hidden, out_shape, rng):
        self.out_shape = tuple(out_shape)
        out_dim = int(np.prod(self.out_shape))
        self.body = L.LinearLayer(latent_dim, hidden, rng)
        self.head = L.LinearLayer(hidden, out_dim, rng)

    def forward(self, z, tape=None):
        h = T.relu(self.body.forward(z, tape))
        out = self.head.forward(h, tape)
        return T.reshape(out, self.out_shape) if len(self.out_shape) > 1 else out

    def parameters(self):
        return [(f"body.{n}", t) for n, t in self.body.parameters()] + [
            (f"head.{n}", t) for n, t in self.head.parameters()
        ]


class LstmDecoder:
    """Rolls a latent code out to a sequence of per-token perturbation vectors."""

    def __init__(self, latent_dim, hidden, emb_dim, rng):
        self.hidden = hidden
        self.init = L.LinearLayer(latent_dim, hidden, rng)
        self.cell = L.LstmCell(latent_dim, hidden, rng)
        self.head = L.LinearLayer(hidden, emb_dim, rng)

    def forward(self, z, length, tape=None):
        h = T.reshape(T.tanh(self.init.forward(z, tape)), (1, self.hidden))
        c = Tensor(np.zeros((1, self.hidden)))
        z_row = T.reshape(z, (1, -1))
        rows = []
        for _ in range(length):
            h, c = self.cell.step(z_row, h, c, tape=tape)
            rows.append(self.head.forward(T.reshape(h, (-1,)), tape))
        return T.stack_rows(rows)

    def parameters(self):
        out = [(f"init.{n}", t) for n, t in self.init.parameters()]
        out += [(f"cell.{n}", t) for n, t in self.cell.parameters()]
        out += [(f"head.{n}", t) for n, t in self.head.parameters()]
        return out


@dataclass
class GraphAttackContext:
    """Frozen per-run graph state shared by every attacked node."""

    graph: GraphDataset
    clean_scores: np.ndarray  # target logits on clean features
    masks: dict  # node -> InfluencerMask


class AttackGenerator:
    """Encoder + latent sampling + decoder, bound to a domain adapter."""

    def __init__(self, domain, backbone, mu_head, sigma_head, decoder, adapter,
                 latent_dim, variational=True, graph_ctx=None):
        self.domain = domain
        self.backbone = backbone
        self.mu_head = mu_head
        self.sigma_head = sigma_head
        self.decoder = decoder
        self.adapter = adapter
        self.latent_dim = latent_dim
        self.variational = variational
        self.graph_ctx = graph_ctx

    def parameters(self):
        out = [(f"encoder.{n}", t) for n, t in self.backbone.parameters()]
        out += [(f"mu_head.{n}", t) for n, t in self.mu_head.parameters()]
        out += [(f"sigma_head.{n}", t) for n, t in self.sigma_head.parameters()]
        out += [(f"decoder.{n}", t) for n, t in self.decoder.parameters()]
        return out

    def param_tensors(self):
        return [t for _, t in self.parameters()]


# ---------------------------------------------------------------------------
# core operations


def encode(generator: AttackGenerator, x, tape=None) -> EncoderOutput:
    """Deterministic encoder pass; sigma = softplus(raw head) is positive."""
    h = generator.backbone.forward(x, tape)
    mu = generator.mu_head.forward(h, tape)
    sigma = T.softplus(generator.sigma_head.forward(h, tape))
    return EncoderOutput(mu, sigma)


def reparameterize(out: EncoderOutput, rng: SeededRng, variational: bool = True) -> Tensor:
    """z = mu + sigma * eps with eps ~ N(0, I); gradients reach mu and sigma
    but not eps. Non-variational generators return mu itself."""
    if not variational:
        return out.mu
    eps = T.sample_standard_normal(out.mu.shape, rng)
    return T.add(out.mu, T.mul(out.sigma, eps))


def decode(generator: AttackGenerator, z: Tensor, length: int = None, tape=None) -> Tensor:
    if z.shape[-1] != generator.latent_dim:
        raise ValueError(f"latent code has extent {z.shape}, expected {generator.latent_dim}")
    if isinstance(generator.decoder, LstmDecoder):
        if length is None:
            raise ValueError("text decoding needs the output sequence length")
        return generator.decoder.forward(z, length, tape)
    return generator.decoder.forward(z, tape)


def kl_diag_gaussian(out: EncoderOutput) -> Tensor:
    """KL(N(mu, diag sigma^2) || N(0, I)) = 0.5 sum(mu^2 + sigma^2 - ln sigma^2 - 1)."""
    if np.any(out.sigma.data <= 0):
        raise ValueError("sigma must be strictly positive")
    mu2 = T.mul(out.mu, out.mu)
    s2 = T.mul(out.sigma, out.sigma)
    inner = T.sub(T.sub(T.add(mu2, s2), T.log(s2)), Tensor(1.0))
    return T.scale(T.reduce_sum(inner), 0.5)


def max_margin_loss(scores: Tensor, true_label: int) -> Tensor:
    """Hinge on the gap between the true-class score and the best wrong class;
    zero exactly when some wrong class scores at least as high."""
    c = scores.shape[0]
    if c < 2:
        raise ValueError("need at least two classes")
    y = int(true_label)
    if not 0 <= y < c:
        raise ValueError(f"label {y} outside [0, {c})")
    s_true = T.reduce_sum(T.gather_rows(scores, [y]))
    wrong = T.gather_rows(scores, [i for i in range(c) if i != y])
    margin = T.sub(s_true, T.reduce_max(wrong))
    return T.relu(margin)


@dataclass
class ForwardResult:
    scores: Tensor
    delta_value: Tensor  # similarity penalty on the differentiable path
    kl: Optional[Tensor]
    predicted: int
    perturbed: object
    extras: dict


def attack_forward(generator, target, adapter, x, y, rng, tape=None, evaluation=False) -> ForwardResult:
    """One full pass: encode, sample, decode, combine, classify.

    Training mode keeps everything differentiable (soft token mixture, no
    image clamp); evaluation mode applies the hard projections and clamps
    that make the output a valid domain element.
    """
    enc = encode(generator, x, tape)
    z = reparameterize(enc, rng, generator.variational)
    kl = kl_diag_gaussian(enc) if generator.variational else None

    if adapter.combination == "additive":
        xt = x if isinstance(x, Tensor) else Tensor(x)
        delta = decode(generator, z, tape=tape)
        x_prime = combine_additive(delta, xt, evaluation=evaluation, clamp=adapter.clamp)
        scores = target.scores(x_prime, tape)
        delta_value = similarity(adapter.similarity_mode, xt, x_prime)
        perturbed = x_prime.data.copy()
        extras = {}

    elif adapter.combination == "soft-nn":
        ids = np.asarray(x, dtype=np.intp)
        vocab = adapter.vocab
        clean_emb = Tensor(vocab.embeddings.data[ids])
        delta = decode(generator, z, length=len(ids), tape=tape)
        if evaluation:
            raw = clean_emb.data + delta.data
            candidates = np.array([hard_nn_project(raw[t], vocab) for t in range(len(ids))], dtype=np.intp)
            norms = np.linalg.norm(delta.data, axis=1)
            capped = (
                enforce_token_cap(ids, candidates, norms, adapter.cap_fraction)
                if adapter.cap_fraction is not None
                else candidates
            )
            x_prime = Tensor(vocab.embeddings.data[capped])
            scores = target.scores_tokens(capped)
            soft_rows = [soft_nn_mixture(Tensor(raw[t]), vocab, adapter.tau)[0] for t in range(len(ids))]
            soft_delta = similarity("l2", clean_emb, T.stack_rows(soft_rows)).item()
            delta_value = similarity(adapter.similarity_mode, clean_emb, x_prime)
            perturbed = capped
            extras = {
                "tokens": capped.tolist(),
                "token_change_rate": float(np.mean(capped != ids)),
                "delta_soft": soft_delta,
            }
        else:
            rows = []
            for t in range(len(ids)):
                perturbed_t = T.add(T.gather_rows(clean_emb, [t]), T.gather_rows(delta, [t]))
                mixed, _ = soft_nn_mixture(T.reshape(perturbed_t, (-1,)), vocab, adapter.tau)
                rows.append(mixed)
            x_prime = T.stack_rows(rows)
            scores = target.scores_embeddings(x_prime, tape)
            delta_value = similarity(adapter.similarity_mode, clean_emb, x_prime)
            perturbed = None
            extras = {}

    elif adapter.combination == "masked":
        node = int(x)
        ctx = generator.graph_ctx
        mask = adapter.mask
        if mask is None:
            raise ValueError("graph attack needs an influencer mask on the adapter")
        delta_rows = decode(generator, z, tape=tape)
        scores = target.node_scores_with_delta(
            ctx.clean_scores[node], delta_rows, mask.attacker_set, node, tape
        )
        # rows outside the attacker set are untouched, so the l2 similarity
        # over the full feature matrix reduces to the norm of the delta block
        delta_value = T.l2_norm(delta_rows)
        perturbed = {"attacker_set": mask.attacker_set.tolist(), "delta_rows": delta_rows.data.copy()}
        extras = {"attacker_set": mask.attacker_set.tolist()}

    else:
        raise ValueError(f"unknown combination mode {adapter.combination!r}")

    return ForwardResult(
        scores=scores,
        delta_value=delta_value,
        kl=kl,
        predicted=int(np.argmax(scores.data)),
        perturbed=perturbed,
        extras=extras,
    )


def hybrid_objective(batch, generator, target, adapter, lam, rng=None, tape=None):
    """Mean over the batch of hinge + lambda (delta + KL); the KL term is
    omitted exactly when the generator is non-variational.

    Batch items are (x, y) pairs, optionally (x, y, adapter_override) for
    per-example graph masks.
    """
    if not batch:
        raise ValueError("batch must be nonempty")
    if rng is None:
        rng = SeededRng(0)
    total = None
    for item in batch:
        x, y = item[0], item[1]
        item_adapter = item[2] if len(item) > 2 else adapter
        result = attack_forward(generator, target, item_adapter, x, y, rng, tape=tape, evaluation=False)
        loss = max_margin_loss(result.scores, y)
        penalty = result.delta_value
        if result.kl is not None:
            penalty = T.add(penalty, result.kl)
        loss = T.add(loss, T.scale(penalty, lam))
        total = loss if total is None else T.add(total, loss)
    return T.scale(total, 1.0 / len(batch))


# ---------------------------------------------------------------------------
# training


def _train_items(generator, dataset, config):
    """(x, y, adapter_override) triples for the train split only."""
    if isinstance(dataset, GraphDataset):
        nodes = np.flatnonzero(dataset.train_mask)
        ctx = generator.graph_ctx
        return [(int(n), int(dataset.labels[n]), generator.adapter.with_mask(ctx.masks[int(n)])) for n in nodes]
    idx = dataset.indices("train")
    if np.any(dataset.splits[idx] != "train"):
        raise AssertionError("attack training selected a non-train example")
    return [(dataset.inputs[i], int(dataset.labels[i]), None) for i in idx]


def train_attacker(generator: AttackGenerator, target, dataset, config: GaalvConfig):
    """Adam on the hybrid objective over the train split; the target is never
    written to. Returns (generator, per-epoch metrics)."""
    items = _train_items(generator, dataset, config)
    if not items:
        raise ValueError("cannot train an attacker on an empty dataset")
    rng = SeededRng(config.seed)
    params = generator.param_tensors()
    state = L.AdamState(params, lr=config.lr)
    metrics = {"success_rate": [], "mean_delta": [], "mean_kl": []}
    for _ in range(config.epochs):
        order = rng.permutation(len(items))
        successes, deltas, kls = [], [], []
        for start in range(0, len(items), config.batch_size):
            batch_items = [items[i] for i in order[start : start + config.batch_size]]
            tape = GradientTape()
            total = None
            for x, y, override in batch_items:
                adapter = override if override is not None else generator.adapter
                result = attack_forward(generator, target, adapter, x, y, rng, tape=tape, evaluation=False)
                loss = max_margin_loss(result.scores, y)
                penalty = result.delta_value
                if result.kl is not None:
                    penalty = T.add(penalty, result.kl)
                    kls.append(result.kl.item())
                else:
                    kls.append(0.0)
                successes.append(result.predicted != y)
                deltas.append(result.delta_value.item())
                loss = T.add(loss, T.scale(penalty, config.lambda_))
                total = loss if total is None else T.add(total, loss)
            grads = T.backward(T.scale(total, 1.0 / len(batch_items)))
            L.adam_step(state, params, [grads.get(tape.leaf_id(p)) for p in params])
        metrics["success_rate"].append(float(np.mean(successes)))
        metrics["mean_delta"].append(float(np.mean(deltas)))
        metrics["mean_kl"].append(float(np.mean(kls)))
    return generator, metrics


# ---------------------------------------------------------------------------
# generation and resampling


def generate(generator, target, adapter, x, y, rng, example_id=None) -> AdversarialRecord:
    """Single forward pass in evaluation mode; success means the perturbed
    prediction differs from the true label."""
    result = attack_forward(generator, target, adapter, x, y, rng, tape=None, evaluation=True)
    original = x.data.copy() if isinstance(x, Tensor) else (x.copy() if isinstance(x, np.ndarray) else x)
    return AdversarialRecord(
        example_id=example_id,
        original=original,
        perturbed=result.perturbed,
        label=int(y),
        predicted=result.predicted,
        success=result.predicted != int(y),
        delta=float(result.delta_value.item()),
        samples_consumed=1,
        extras=result.extras,
    )


def resample_attack(generator, target, adapter, x, y, budget: int, rng, example_id=None) -> AdversarialRecord:
    """Draw fresh latent codes up to budget+1 times, returning the first
    success (samples_consumed = attempts used) or the final failure with
    samples_consumed = budget+1.

    A non-variational generator is deterministic, so a single attempt settles
    the outcome for every budget.
    """
    if budget < 0:
        raise ValueError(f"resample budget must be nonnegative, got {budget}")
    if not generator.variational:
        return generate(generator, target, adapter, x, y, rng, example_id)
    record = None
    for attempt in range(1, budget + 2):
        record = generate(generator, target, adapter, x, y, rng, example_id)
        record.samples_consumed = attempt
        if record.success:
            return record
    return record


# ---------------------------------------------------------------------------
# construction and persistence


def influencer_masks(graph: GraphDataset, nodes, k: int, seed: int) -> dict:
    """Fixed per-run attacker sets, one independent stream per node."""
    root = SeededRng(seed)
    return {int(n): select_influencer_set(graph, int(n), k=k, rng=root.derive(int(n))) for n in nodes}


def direct_masks(graph: GraphDataset, nodes) -> dict:
    from .domains import direct_mask

    return {int(n): direct_mask(graph.n_nodes, int(n)) for n in nodes}


def vocabulary_from_target(target) -> Vocabulary:
    """Wrap a token classifier's frozen embedding table as the attack vocabulary."""
    tokens = [f"tok{i}" for i in range(target.vocab_size)]
    return Vocabulary(tokens, Tensor(target.embeddings.data.copy()))


def build_generator(domain: str, target, dataset, config: GaalvConfig, rng: SeededRng) -> AttackGenerator:
    """Construct a generator with the domain-appropriate backbone, decoder,
    and adapter, bound to the given frozen target."""
    latent, hidden = config.latent_dim, config.hidden
    if domain == "vector":
        in_dim = dataset.inputs.shape[1]
        backbone = VectorBackbone(in_dim, hidden, rng)
        decoder = MlpDecoder(latent, hidden, (in_dim,), rng)
        adapter = build_adapter("vector")
        ctx = None
    elif domain == "image":
        channels, size = dataset.inputs.shape[1], dataset.inputs.shape[2]
        backbone = ImageBackbone(channels, size, hidden, rng)
        decoder = MlpDecoder(latent, hidden, (channels, size, size), rng)
        adapter = build_adapter("image")
        ctx = None
    elif domain == "text":
        vocab = vocabulary_from_target(target)
        backbone = TextBackbone(vocab, hidden, rng)
        decoder = LstmDecoder(latent, hidden, vocab.dim, rng)
        adapter = build_adapter("text", vocab=vocab, tau=config.tau, cap_fraction=config.cap_fraction)
        ctx = None
    elif domain == "graph":
        a_hat = target.a_hat.data
        aggregated = a_hat @ dataset.features
        backbone = GraphBackbone(aggregated, hidden, rng)
        k = 1 if config.graph_attack == "direct" else config.influencer_k
        decoder = MlpDecoder(latent, hidden, (k, dataset.features.shape[1]), rng)
        adapter = build_adapter("graph")
        all_nodes = np.arange(dataset.n_nodes)
        if config.graph_attack == "direct":
            masks = direct_masks(dataset, all_nodes)
        else:
            masks = influencer_masks(dataset, all_nodes, k, config.seed)
        clean_scores = target.scores(Tensor(dataset.features)).data
        ctx = GraphAttackContext(graph=dataset, clean_scores=clean_scores, masks=masks)
    else:
        raise ValueError(f"unknown domain {domain!r}")

    mu_head = L.LinearLayer(hidden, latent, rng)
    sigma_head = L.LinearLayer(hidden, latent, rng)
    return AttackGenerator(
        domain, backbone, mu_head, sigma_head, decoder, adapter, latent,
        variational=config.variational, graph_ctx=ctx,
    )


def save_generator(base: str, generator: AttackGenerator, config: GaalvConfig) -> None:
    meta = {
        "domain": generator.domain,
        "latent_dim": generator.latent_dim,
        "variational": generator.variational,
        "config": {
            "lambda_": config.lambda_,
            "latent_dim": config.latent_dim,
            "tau": config.tau,
            "lr": config.lr,
            "epochs": config.epochs,
            "batch_size": config.batch_size,
            "resample_budget": config.resample_budget,
            "seed": config.seed,
            "variational": config.variational,
            "hidden": config.hidden,
            "graph_attack": config.graph_attack,
            "influencer_k": config.influencer_k,
            "cap_fraction": config.cap_fraction,
        },
    }
    L.save_checkpoint(base, generator.parameters(), meta)


def load_generator(base: str, target, dataset) -> AttackGenerator:
    """Rebuild a generator from its checkpoint against the same target and
    dataset it was trained for."""
    meta, arrays = L.load_checkpoint(base)
    config = GaalvConfig(**meta["config"])
    generator = build_generator(meta["domain"], target, dataset, config, SeededRng(0))
    for name, t in generator.parameters():
        if name not in arrays:
            raise ValueError(f"checkpoint missing parameter {name!r}")
        if arrays[name].shape != t.data.shape:
            raise ValueError(f"parameter {name!r} shape {arrays[name].shape} != {t.data.shape}")
        t.data[...] = arrays[name]
    return generator
