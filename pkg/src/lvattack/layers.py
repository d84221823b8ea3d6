"""Neural building blocks: dense, graph convolution, LSTM cell, small 2-D
convolution, Glorot initialization, Adam/SGD steps, and checkpointing.

Layers hold plain (untaped) parameter tensors. ``forward(x, tape)`` watches
the parameters on the given tape, so gradients flow when a tape is supplied
and the same code runs as a constant evaluation when it is not.
"""

import math

import numpy as np

from . import serial
from . import tensor as T
from .tensor import SeededRng, Tensor


def _p(tape, t: Tensor) -> Tensor:
    return tape.watch(t) if tape is not None else t


def _p_transposed(tape, t: Tensor) -> Tensor:
    # transposing a watched weight once per tape instead of once per step
    if tape is None:
        return T.transpose(t)
    key = ("T", id(t))
    got = tape.memo.get(key)
    if got is None:
        got = T.transpose(tape.watch(t))
        tape.memo[key] = got
    return got


def glorot_init(fan_in: int, fan_out: int, rng: SeededRng, shape=None) -> Tensor:
    """Uniform init on [-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    if fan_in <= 0 or fan_out <= 0:
        raise ValueError(f"fans must be positive, got ({fan_in}, {fan_out})")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return Tensor(rng.uniform(-bound, bound, tuple(shape)))


class LinearLayer:
    """Dense layer y = W x + b with W of shape [out, in]."""

    def __init__(self, in_dim: int, out_dim: int, rng: SeededRng):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = glorot_init(in_dim, out_dim, rng, shape=(out_dim, in_dim))
        self.bias = Tensor(np.zeros(out_dim))

    def forward(self, x: Tensor, tape=None) -> Tensor:
        if x.data.ndim == 1:
            return T.add(T.matmul(_p(tape, self.weight), x), _p(tape, self.bias))
        return T.add_bias(T.matmul(x, _p_transposed(tape, self.weight)), _p(tape, self.bias))

    def parameters(self):
        return [("weight", self.weight), ("bias", self.bias)]


class GraphConvLayer:
    """Graph convolution X -> A_hat X W for a precomputed normalized A_hat."""

    def __init__(self, in_dim: int, out_dim: int, rng: SeededRng):
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = glorot_init(in_dim, out_dim, rng)

    def parameters(self):
        return [("weight", self.weight)]


def gcn_normalize(adjacency: Tensor) -> Tensor:
    """Add self-loops and symmetrically normalize: D^-1/2 (A + I) D^-1/2."""
    a = adjacency.data
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    if np.max(np.abs(a - a.T)) != 0:
        raise ValueError("adjacency must be symmetric")
    a_tilde = a + np.eye(a.shape[0])
    d_inv_sqrt = 1.0 / np.sqrt(a_tilde.sum(axis=1))
    return Tensor(a_tilde * d_inv_sqrt[:, None] * d_inv_sqrt[None, :])


def gcn_forward(a_hat: Tensor, features: Tensor, layer: GraphConvLayer, tape=None) -> Tensor:
    if features.shape[1] != layer.in_dim:
        raise ValueError(f"feature width {features.shape} does not match layer input {layer.in_dim}")
    w = _p(tape, layer.weight)
    return T.matmul(a_hat, T.matmul(features, w))


class LstmCell:
    """Single LSTM cell; every gate block has weight [h, h+in] and bias [h]."""

    GATES = ("input", "forget", "output", "candidate")

    def __init__(self, in_dim: int, hidden: int, rng: SeededRng):
        self.in_dim = in_dim
        self.hidden = hidden
        self.weights = {}
        self.biases = {}
        for gate in self.GATES:
            self.weights[gate] = glorot_init(hidden + in_dim, hidden, rng, shape=(hidden, hidden + in_dim))
            bias = np.zeros(hidden)
            if gate == "forget":
                bias[:] = 1.0  # start with the forget gate open
            self.biases[gate] = Tensor(bias)

    def step(self, x: Tensor, h: Tensor, c: Tensor, tape=None):
        cat = T.concat([h, x], axis=1)
        acts = {}
        for gate in self.GATES:
            z = T.add_bias(T.matmul(cat, _p_transposed(tape, self.weights[gate])), _p(tape, self.biases[gate]))
            acts[gate] = T.tanh(z) if gate == "candidate" else T.sigmoid(z)
        c_next = T.add(T.mul(acts["forget"], c), T.mul(acts["input"], acts["candidate"]))
        h_next = T.mul(acts["output"], T.tanh(c_next))
        return h_next, c_next

    def parameters(self):
        out = []
        for gate in self.GATES:
            out.append((f"{gate}.weight", self.weights[gate]))
            out.append((f"{gate}.bias", self.biases[gate]))
        return out


def lstm_forward(cell: LstmCell, sequence, tape=None):
    """Run the cell across a sequence of equal-shaped steps.

    Steps may be [in] vectors or [N, in] matrices. Returns (hidden states per
    step, final hidden), squeezed back to vectors for vector input.
    """
    if not sequence:
        raise ValueError("lstm_forward needs a nonempty sequence")
    vector_input = sequence[0].data.ndim == 1
    n = 1 if vector_input else sequence[0].shape[0]
    for step in sequence:
        if step.shape != sequence[0].shape:
            raise ValueError(f"sequence steps disagree in shape: {step.shape} vs {sequence[0].shape}")
    h = Tensor(np.zeros((n, cell.hidden)))
    c = Tensor(np.zeros((n, cell.hidden)))
    hiddens = []
    for step in sequence:
        x = T.reshape(step, (1, -1)) if vector_input else step
        h, c = cell.step(x, h, c, tape=tape)
        hiddens.append(T.reshape(h, (-1,)) if vector_input else h)
    return hiddens, hiddens[-1]


class Conv2dLayer:
    """2-D cross-correlation with bias, stride, and symmetric zero padding."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: SeededRng,
                 stride: int = 1, padding: int = 0):
        kh = kw = kernel_size
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kh, self.kw = kh, kw
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kh * kw
        fan_out = out_channels * kh * kw
        self.kernel = glorot_init(fan_in, fan_out, rng, shape=(out_channels, in_channels, kh, kw))
        self.bias = Tensor(np.zeros(out_channels))

    def parameters(self):
        return [("kernel", self.kernel), ("bias", self.bias)]


def conv2d_forward(layer: Conv2dLayer, x: Tensor, tape=None) -> Tensor:
    """im2col + matmul convolution; accepts [C,H,W] or [N,C,H,W]."""
    single = x.data.ndim == 3
    x4 = x.data[None] if single else x.data
    if x4.ndim != 4 or x4.shape[1] != layer.in_channels:
        raise ValueError(f"conv2d input shape {x.shape} does not match {layer.in_channels} channels")
    n, c, h, w = x4.shape
    kh, kw, s, p = layer.kh, layer.kw, layer.stride, layer.padding
    out_h = (h + 2 * p - kh) // s + 1
    out_w = (w + 2 * p - kw) // s + 1
    if out_h <= 0 or out_w <= 0:
        raise ValueError(f"kernel {kh}x{kw} larger than padded input {h + 2 * p}x{w + 2 * p}")

    kernel = _p(tape, layer.kernel)
    bias = _p(tape, layer.bias)

    xp = np.pad(x4, ((0, 0), (0, 0), (p, p), (p, p)))
    sn, sc, sh, sw = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, (n, c, out_h, out_w, kh, kw), (sn, sc, s * sh, s * sw, sh, sw)
    )
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, out_h * out_w, c * kh * kw)
    kmat = kernel.data.reshape(layer.out_channels, c * kh * kw)
    out = cols @ kmat.T + bias.data
    out = out.transpose(0, 2, 1).reshape(n, layer.out_channels, out_h, out_w)

    def bwd(g):
        g4 = g.reshape(n, layer.out_channels, out_h, out_w)
        g2 = g4.transpose(0, 2, 3, 1).reshape(n, out_h * out_w, layer.out_channels)
        dk = np.einsum("npo,npk->ok", g2, cols).reshape(kernel.shape)
        db = g4.sum(axis=(0, 2, 3))
        dcols = (g2 @ kmat).reshape(n, out_h, out_w, c, kh, kw)
        dxp = np.zeros_like(xp)
        for a in range(kh):
            for b in range(kw):
                dxp[:, :, a : a + s * out_h : s, b : b + s * out_w : s] += dcols[:, :, :, :, a, b].transpose(
                    0, 3, 1, 2
                )
        dx = dxp[:, :, p : p + h, p : p + w] if p else dxp
        return (dx[0] if single else dx), dk, db

    return T.apply_op(out[0] if single else out, (x, kernel, bias), bwd)


class AdamState:
    """Per-parameter Adam moments with bias correction."""

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam update; parameters are updated in place."""
    if len(params) != len(state.params) or len(grads) != len(params):
        raise ValueError("params/grads do not match the optimizer state")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for i, (p, g) in enumerate(zip(params, grads)):
        if p is not state.params[i]:
            raise ValueError("parameter order differs from the optimizer state")
        gd = np.zeros_like(p.data) if g is None else (g.data if isinstance(g, Tensor) else np.asarray(g))
        if gd.shape != p.data.shape:
            raise ValueError(f"gradient shape {gd.shape} does not match parameter {p.data.shape}")
        state.m[i] = b1 * state.m[i] + (1 - b1) * gd
        state.v[i] = b2 * state.v[i] + (1 - b2) * gd * gd
        m_hat = state.m[i] / (1 - b1 ** state.t)
        v_hat = state.v[i] / (1 - b2 ** state.t)
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params


def sgd_step(params, grads, lr: float):
    for p, g in zip(params, grads):
        if g is None:
            continue
        gd = g.data if isinstance(g, Tensor) else np.asarray(g)
        p.data -= lr * gd
    return params


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-softmax of the true class, stabilized via max shift."""
    y = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects [N,C] logits, got {logits.shape}")
    n, c = logits.shape
    if y.shape != (n,):
        raise ValueError(f"labels shape {y.shape} does not match {n} rows")
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    row_max, _ = T.max_with_argmax(logits, axis=1)
    shifted = T.add_colvec(logits, T.neg(row_max))
    lse = T.add(row_max, T.log(T.reduce_sum(T.exp(shifted), axis=1)))
    flat = T.reshape(logits, (n * c,))
    true_logit = T.gather_rows(flat, np.arange(n) * c + y)
    return T.reduce_mean(T.sub(lse, true_logit))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(base: str, named_params, meta: dict) -> None:
    """Write named parameters as a manifest + float64 sidecar (bit-exact)."""
    serial.save_bundle(base, "checkpoint", meta, [(n, t.data) for n, t in named_params])


def load_checkpoint(base: str):
    """Read a checkpoint back as (meta, {name: ndarray})."""
    return serial.load_bundle(base, expect_kind="checkpoint")
