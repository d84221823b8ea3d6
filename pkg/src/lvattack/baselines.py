"""Constrained-optimization whitebox baselines: FGSM and l2 PGD.

Both maximize the target's cross-entropy via input gradients, run one
example at a time, and never write to target parameters. PGD projects the
perturbation onto the l2 ball of radius epsilon and back into the valid
input range after every step.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import cross_entropy
from .tensor import GradientTape, SeededRng, Tensor


@dataclass
class PgdConfig:
    epsilon: float
    step_size: float
    iterations: int
    random_start: bool = False

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.step_size <= 0:
            raise ValueError(f"step size must be positive, got {self.step_size}")
        if self.iterations < 1:
            raise ValueError(f"need at least one iteration, got {self.iterations}")


def input_gradient(target, x: np.ndarray, y: int) -> np.ndarray:
    """Gradient of the cross-entropy loss with respect to the input."""
    tape = GradientTape()
    xt = tape.watch(Tensor(x))
    logits = target.scores(xt, tape)
    loss = cross_entropy(T.reshape(logits, (1, -1)), [int(y)])
    grads = T.backward(loss)
    return grads[xt.tape_id].data.copy()


def _clamp(x: np.ndarray, clamp) -> np.ndarray:
    return np.clip(x, clamp[0], clamp[1]) if clamp is not None else x


def fgsm(target, x, y, epsilon: float, clamp=None) -> np.ndarray:
    """x' = clamp(x + epsilon sign(grad)); sign(0) is 0 by convention."""
    x = np.asarray(x, dtype=np.float64)
    grad = input_gradient(target, x, y)
    return _clamp(x + epsilon * np.sign(grad), clamp)


def project_l2(delta: np.ndarray, epsilon: float) -> np.ndarray:
    """Radially rescale delta onto the l2 ball of radius epsilon."""
    norm = float(np.linalg.norm(delta))
    if norm <= epsilon:
        return delta
    return delta * (epsilon / norm)


def pgd_l2(target, x, y, config: PgdConfig, clamp=None, rng: SeededRng = None) -> np.ndarray:
    """Iterated normalized-gradient ascent on the cross-entropy with l2-ball
    and valid-range projection after each step."""
    x = np.asarray(x, dtype=np.float64)
    if config.random_start:
        if rng is None:
            rng = SeededRng(0)
        direction = rng.standard_normal(x.shape)
        norm = np.linalg.norm(direction)
        scale = config.epsilon * float(rng.uniform(0.0, 1.0))
        delta = direction * (scale / norm) if norm > 0 else np.zeros_like(x)
        delta = _clamp(x + delta, clamp) - x
    else:
        delta = np.zeros_like(x)
    for _ in range(config.iterations):
        grad = input_gradient(target, x + delta, y)
        norm = float(np.linalg.norm(grad))
        if norm > 0:
            delta = delta + config.step_size * grad / norm
        delta = project_l2(delta, config.epsilon)
        delta = _clamp(x + delta, clamp) - x
    return x + delta
