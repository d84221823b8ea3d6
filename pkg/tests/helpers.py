"""Shared test utilities: oracles and gradient checks against real layer paths."""

import numpy as np

from lvattack import tensor as T
from lvattack.tensor import GradientTape


def check_param_gradient(build_loss, param, h=1e-5, tol=1e-4):
    """Finite-difference check of d(build_loss)/d(param).

    ``build_loss(tape)`` must rebuild the loss from scratch; with a tape it
    returns the taped scalar, with None it evaluates the same computation as
    constants. The parameter is perturbed in place for the numeric side.
    """
    tape = GradientTape()
    loss = build_loss(tape)
    grads = T.backward(loss)
    leaf = tape.leaf_id(param)
    analytic = grads[leaf].data.copy() if leaf is not None else np.zeros_like(param.data)

    numeric = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = build_loss(None).item()
        flat[i] = orig - h
        fm = build_loss(None).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    max_rel = float(np.max(np.abs(analytic - numeric) / denom)) if flat.size else 0.0
    assert max_rel <= tol, f"param gradient check failed: max rel err {max_rel}"
    return max_rel


def conv2d_oracle(x, kernel, bias, stride=1, padding=0):
    """Direct 6-loop cross-correlation for a single [C,H,W] image."""
    out_c, in_c, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    _, hp, wp = xp.shape
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    out = np.zeros((out_c, out_h, out_w))
    for oc in range(out_c):
        for i in range(out_h):
            for j in range(out_w):
                acc = 0.0
                for c in range(in_c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * stride + a, j * stride + b] * kernel[oc, c, a, b]
                out[oc, i, j] = acc + bias[oc]
    return out
