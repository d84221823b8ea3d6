"""Dense float64 tensors with reverse-mode automatic differentiation.

The tape is define-by-run: leaves are registered with ``GradientTape.watch``,
every operation whose inputs touch a tape appends a node, and ``backward``
walks the nodes in reverse to accumulate gradients. Tapes are rebuilt for
every forward pass; a tape and its tensors are a single-threaded unit.
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

__all__ = [
    "Tensor",
    "GradientTape",
    "SeededRng",
    "GradCheckReport",
    "matmul",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "relu",
    "tanh",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "arccos",
    "scale",
    "neg",
    "reduce",
    "reduce_sum",
    "reduce_mean",
    "reduce_max",
    "max_with_argmax",
    "softmax",
    "l2_norm",
    "add_bias",
    "add_colvec",
    "scale_rows",
    "mul_rowvec",
    "concat",
    "stack_rows",
    "gather_rows",
    "scatter_rows",
    "reshape",
    "transpose",
    "apply_op",
    "backward",
    "finite_diff_check",
    "sample_standard_normal",
    "read_tensor_file",
    "write_tensor_file",
]


class Tensor:
    """A dense float64 array, optionally linked to a gradient tape."""

    __slots__ = ("data", "tape", "tape_id")

    def __init__(self, values, tape=None, tape_id=None):
        self.data = np.asarray(values, dtype=np.float64)
        self.tape: Optional["GradientTape"] = tape
        self.tape_id: Optional[int] = tape_id

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

    # arithmetic sugar; semantics identical to the module-level ops
    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("parents", "backward_fn", "shape")

    def __init__(self, parents, backward_fn, shape):
        self.parents = parents
        self.backward_fn = backward_fn
        self.shape = shape


class GradientTape:
    """Append-only operation record; parents always precede their children."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.gradients: dict[int, Tensor] = {}
        self._watched: dict[int, Tensor] = {}
        self.memo: dict = {}  # scratch for per-pass caching (e.g. transposed weights)

    def watch(self, t: Tensor) -> Tensor:
        """Register ``t`` as a leaf and return its taped handle.

        The original tensor is left untouched so persistent parameters never
        point at dead tapes; watching the same tensor twice yields the same
        handle (shared data buffer, one leaf node).
        """
        if t.tape is self and t.tape_id is not None:
            return t
        got = self._watched.get(id(t))
        if got is not None:
            return got[1]
        handle = Tensor(t.data)
        handle.tape = self
        handle.tape_id = self._record((), None, t.data.shape)
        # keep the original alive so its id cannot be recycled mid-tape
        self._watched[id(t)] = (t, handle)
        return handle

    def leaf_id(self, t: Tensor) -> Optional[int]:
        """Tape id assigned to a watched tensor, or None if never watched."""
        if t.tape is self:
            return t.tape_id
        got = self._watched.get(id(t))
        return got[1].tape_id if got is not None else None

    def _record(self, parents, backward_fn, shape) -> int:
        self.nodes.append(_Node(parents, backward_fn, shape))
        return len(self.nodes) - 1


def apply_op(data: np.ndarray, parents: tuple, backward_fn: Callable) -> Tensor:
    """Create an op result, recording it if any parent sits on a tape.

    ``backward_fn(grad_out)`` must return one gradient array (or None) per
    parent. This is the extension point for composite ops such as conv2d.
    """
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and tape is not p.tape:
                raise ValueError("operands recorded on different tapes")
            tape = p.tape
    out = Tensor(data)
    if tape is not None:
        pids = tuple(p.tape_id if p.tape is tape else None for p in parents)
        out.tape = tape
        out.tape_id = tape._record(pids, backward_fn, out.data.shape)
    return out


# ---------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with 1-D operands promoted numpy-style."""
    am = a.data if a.data.ndim == 2 else a.data.reshape(1, -1)
    bm = b.data if b.data.ndim == 2 else b.data.reshape(-1, 1)
    if am.ndim != 2 or bm.ndim != 2 or a.data.ndim > 2 or b.data.ndim > 2:
        raise ValueError(f"matmul needs 1-D or 2-D operands, got {a.shape} and {b.shape}")
    if am.shape[1] != bm.shape[0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    out2 = am @ bm
    if a.data.ndim == 1 and b.data.ndim == 1:
        out = out2.reshape(())
    elif a.data.ndim == 1:
        out = out2.reshape(-1)
    elif b.data.ndim == 1:
        out = out2.reshape(-1)
    else:
        out = out2

    def bwd(g):
        g2 = g.reshape(am.shape[0], bm.shape[1])
        ga = (g2 @ bm.T).reshape(a.shape)
        gb = (am.T @ g2).reshape(b.shape)
        return ga, gb

    return apply_op(out, (a, b), bwd)


def _binary_shapes(a: Tensor, b: Tensor, opname: str):
    # equal shapes, or one side is a size-1 scalar
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ValueError(f"shape mismatch for {opname}: {a.shape} vs {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    # collapse a broadcast gradient back onto a size-1 operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "sub")
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    ad, bd = a.data, b.data
    return apply_op(
        ad * bd,
        (a, b),
        lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "div")
    ad, bd = a.data, b.data
    return apply_op(
        ad / bd,
        (a, b),
        lambda g: (_reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply_op(a.data * c, (a,), lambda g: (g * c,))


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return apply_op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return apply_op(t, (a,), lambda g: (g * (1.0 - t * t),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return apply_op(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log requires strictly positive input")
    ad = a.data
    return apply_op(np.log(ad), (a,), lambda g: (g / ad,))


def _logistic(x: np.ndarray) -> np.ndarray:
    # overflow-safe sigmoid via tanh
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return apply_op(np.logaddexp(0.0, ad), (a,), lambda g: (g * _logistic(ad),))


def sigmoid(a: Tensor) -> Tensor:
    s = _logistic(a.data)
    return apply_op(s, (a,), lambda g: (g * s * (1.0 - s),))


_ACOS_EPS = 1e-12


def arccos(a: Tensor) -> Tensor:
    """Elementwise arccos; input clipped inside (-1, 1) to keep the gradient finite."""
    x = np.clip(a.data, -1.0 + _ACOS_EPS, 1.0 - _ACOS_EPS)
    return apply_op(np.arccos(x), (a,), lambda g: (-g / np.sqrt(1.0 - x * x),))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": relu,
    "tanh": tanh,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "scale": scale,
}


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name; binary kinds require ``b``."""
    if kind not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    fn = _ELEMENTWISE[kind]
    if kind in ("add", "sub", "mul"):
        if b is None:
            raise ValueError(f"elementwise {kind!r} needs two operands")
        return fn(a, b)
    if kind == "scale":
        if b is None:
            raise ValueError("elementwise 'scale' needs a scalar factor")
        return fn(a, float(b))
    if b is not None:
        raise ValueError(f"elementwise {kind!r} takes a single operand")
    return fn(a)


# ---------------------------------------------------------------------------
# reductions


def _check_axis(a: Tensor, axis):
    if axis is not None and not (-a.data.ndim <= axis < a.data.ndim):
        raise ValueError(f"axis {axis} out of range for shape {a.shape}")


def reduce_sum(a: Tensor, axis=None) -> Tensor:
    _check_axis(a, axis)
    ashape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, ashape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), ashape).copy(),)

    return apply_op(np.sum(a.data, axis=axis), (a,), bwd)


def reduce_mean(a: Tensor, axis=None) -> Tensor:
    _check_axis(a, axis)
    ashape = a.shape
    count = a.size if axis is None else ashape[axis]

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / count, ashape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, ashape).copy(),)

    return apply_op(np.mean(a.data, axis=axis), (a,), bwd)


def max_with_argmax(a: Tensor, axis=None):
    """Max reduction; returns (tensor, argmax indices). Ties route to the first index."""
    _check_axis(a, axis)
    ad = a.data
    if axis is None:
        idx = int(np.argmax(ad))
        out = ad.reshape(-1)[idx]

        def bwd(g):
            z = np.zeros_like(ad)
            z.reshape(-1)[idx] = g
            return (z,)

        return apply_op(np.asarray(out), (a,), bwd), idx

    idx = np.argmax(ad, axis=axis)
    out = np.take_along_axis(ad, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def bwd(g):
        z = np.zeros_like(ad)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (z,)

    return apply_op(out, (a,), bwd), idx


def reduce_max(a: Tensor, axis=None) -> Tensor:
    out, _ = max_with_argmax(a, axis)
    return out


def reduce(kind: str, a: Tensor, axis=None) -> Tensor:
    if kind == "sum":
        return reduce_sum(a, axis)
    if kind == "mean":
        return reduce_mean(a, axis)
    if kind == "max":
        return reduce_max(a, axis)
    raise ValueError(f"unknown reduce kind {kind!r}")


def softmax(logits: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    """Temperature softmax along ``axis``, computed with max-subtraction."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    z = logits.data / temperature
    z = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def bwd(g):
        dot = np.sum(g * s, axis=axis, keepdims=True)
        return (s * (g - dot) / temperature,)

    return apply_op(s, (logits,), bwd)


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of the flattened tensor; gradient at the origin is zero."""
    n = math.sqrt(float(np.sum(a.data * a.data)))
    ad = a.data

    def bwd(g):
        if n == 0.0:
            return (np.zeros_like(ad),)
        return (float(g) * ad / n,)

    return apply_op(np.asarray(n), (a,), bwd)


# ---------------------------------------------------------------------------
# structural ops


def add_bias(m: Tensor, v: Tensor) -> Tensor:
    """Add a length-K vector to every row of an N-by-K matrix."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"add_bias expects [N,K] and [K], got {m.shape} and {v.shape}")
    return apply_op(m.data + v.data, (m, v), lambda g: (g, g.sum(axis=0)))


def add_colvec(m: Tensor, u: Tensor) -> Tensor:
    """Add u[i] to every entry of row i of an N-by-K matrix."""
    if m.data.ndim != 2 or u.data.ndim != 1 or m.shape[0] != u.shape[0]:
        raise ValueError(f"add_colvec expects [N,K] and [N], got {m.shape} and {u.shape}")
    return apply_op(m.data + u.data[:, None], (m, u), lambda g: (g, g.sum(axis=1)))


def scale_rows(m: Tensor, u: Tensor) -> Tensor:
    """Scale row i of an N-by-K matrix by u[i]."""
    if m.data.ndim != 2 or u.data.ndim != 1 or m.shape[0] != u.shape[0]:
        raise ValueError(f"scale_rows expects [N,K] and [N], got {m.shape} and {u.shape}")
    md, ud = m.data, u.data
    return apply_op(
        md * ud[:, None],
        (m, u),
        lambda g: (g * ud[:, None], np.sum(g * md, axis=1)),
    )


def mul_rowvec(m: Tensor, v: Tensor) -> Tensor:
    """Multiply every row of an N-by-K matrix elementwise by a length-K vector."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"mul_rowvec expects [N,K] and [K], got {m.shape} and {v.shape}")
    md, vd = m.data, v.data
    return apply_op(
        md * vd[None, :],
        (m, v),
        lambda g: (g * vd[None, :], np.sum(g * md, axis=0)),
    )


def concat(tensors: list, axis: int = 0) -> Tensor:
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return apply_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), bwd)


def stack_rows(vectors: list) -> Tensor:
    """Stack length-K vectors into an N-by-K matrix."""
    if not vectors:
        raise ValueError("stack_rows needs at least one vector")
    for v in vectors:
        if v.data.ndim != 1:
            raise ValueError(f"stack_rows expects vectors, got shape {v.shape}")

    def bwd(g):
        return tuple(g[i] for i in range(len(vectors)))

    return apply_op(np.stack([v.data for v in vectors]), tuple(vectors), bwd)


def gather_rows(a: Tensor, indices) -> Tensor:
    """Select rows (2-D) or elements (1-D) by index, with repeats allowed."""
    idx = np.asarray(indices, dtype=np.intp)
    ad = a.data

    def bwd(g):
        z = np.zeros_like(ad)
        np.add.at(z, idx, g)
        return (z,)

    return apply_op(ad[idx], (a,), bwd)


def scatter_rows(rows: Tensor, indices, n_rows: int) -> Tensor:
    """Place K rows into a zero matrix with ``n_rows`` rows at the given indices."""
    idx = np.asarray(indices, dtype=np.intp)
    if rows.data.ndim != 2 or idx.ndim != 1 or idx.shape[0] != rows.shape[0]:
        raise ValueError(f"scatter_rows expects [K,F] rows and K indices, got {rows.shape}")
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows indices must be distinct")
    out = np.zeros((n_rows, rows.shape[1]))
    out[idx] = rows.data
    return apply_op(out, (rows,), lambda g: (g[idx],))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return apply_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ValueError(f"transpose expects a matrix, got shape {a.shape}")
    return apply_op(a.data.T.copy(), (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# backward pass


class GradientMap(dict):
    """tape_id -> gradient Tensor; nodes unreachable from the loss read as
    zeros, materialized on access."""

    def __init__(self, tape):
        super().__init__()
        self._tape = tape

    def __missing__(self, key):
        value = Tensor(np.zeros(self._tape.nodes[key].shape))
        self[key] = value
        return value

    def get(self, key, default=None):
        if key is None:
            return default
        return self[key] if 0 <= key < len(self._tape.nodes) else default


def backward(loss: Tensor) -> GradientMap:
    """Accumulate gradients of a scalar ``loss`` for every node on its tape.

    Returns a map tape_id -> Tensor; nodes unreachable from the loss get
    zero gradients. Accumulation is out-of-place, so gradient arrays may
    alias forward caches but are never mutated.
    """
    if loss.tape is None or loss.tape_id is None:
        raise ValueError("loss is not recorded on a tape")
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    tape = loss.tape
    acc: list = [None] * (loss.tape_id + 1)
    acc[loss.tape_id] = np.ones_like(loss.data)
    for nid in range(loss.tape_id, -1, -1):
        g = acc[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.backward_fn is None:
            continue
        for pid, pg in zip(node.parents, node.backward_fn(g)):
            if pid is None or pg is None:
                continue
            acc[pid] = pg if acc[pid] is None else acc[pid] + pg
    grads = GradientMap(tape)
    for nid in range(loss.tape_id + 1):
        if acc[nid] is not None:
            grads[nid] = Tensor(acc[nid])
    tape.gradients = grads
    return grads


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    analytic: np.ndarray
    numeric: np.ndarray


def finite_diff_check(f, x, h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of scalar-valued ``f`` at ``x`` against
    central differences.

    Relative error per coordinate uses denominator max(|g|, |g~|, 1e-8);
    the check reports rather than raises.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = GradientTape()
    xt = tape.watch(Tensor(x0.copy()))
    grads = backward(f(xt))
    analytic = grads[xt.tape_id].data.copy()

    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        fp = float(f(Tensor((flat + bump).reshape(x0.shape))).data)
        fm = float(f(Tensor((flat - bump).reshape(x0.shape))).data)
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    return GradCheckReport(max_rel <= tol, max_rel, analytic, numeric)


# ---------------------------------------------------------------------------
# randomness


class SeededRng:
    """Deterministic random stream; equal seeds give bit-identical draws.

    ``derive`` builds an independent child stream from (seed, path), so
    per-example streams do not depend on evaluation order.
    """

    def __init__(self, seed: int, _sequence=None):
        self.seed = int(seed)
        seq = _sequence if _sequence is not None else np.random.SeedSequence(self.seed)
        self._gen = np.random.Generator(np.random.PCG64(seq))

    def derive(self, *path: int) -> "SeededRng":
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=tuple(int(p) for p in path))
        return SeededRng(self.seed, _sequence=seq)

    def standard_normal(self, shape=()) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float, high: float, shape=()) -> np.ndarray:
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n, size, replace=False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def sample_standard_normal(shape, rng: SeededRng) -> Tensor:
    """I.i.d. standard normal draws as an untaped (constant) tensor."""
    return Tensor(rng.standard_normal(tuple(shape)))


# ---------------------------------------------------------------------------
# fixture file format: "TNS v1 <rank> <extents...>" then row-major values


def write_tensor_file(path, t) -> None:
    arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype=np.float64)
    with open(path, "w") as fh:
        header = ["TNS", "v1", str(arr.ndim)] + [str(e) for e in arr.shape]
        fh.write(" ".join(header) + "\n")
        fh.write(" ".join(repr(float(v)) for v in arr.reshape(-1)) + "\n")


def read_tensor_file(path) -> Tensor:
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) < 3 or header[0] != "TNS":
            raise ValueError(f"{path}: not a TNS tensor file")
        if header[1] != "v1":
            raise ValueError(f"{path}: unsupported version {header[1]!r}, expected 'v1'")
        rank = int(header[2])
        if len(header) != 3 + rank:
            raise ValueError(f"{path}: header lists {len(header) - 3} extents for rank {rank}")
        shape = tuple(int(e) for e in header[3:])
        values = [float(v) for v in fh.read().split()]
    expected = int(np.prod(shape)) if shape else 1
    if len(values) != expected:
        raise ValueError(f"{path}: expected {expected} values, found {len(values)}")
    return Tensor(np.asarray(values).reshape(shape))
