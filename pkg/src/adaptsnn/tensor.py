"""Dense-array substrate: matmul, order-independent reductions, seeded RNG
streams, Kaiming init and SGD with momentum.

Tensors are plain float64 numpy arrays. Every public op rejects non-finite
values instead of propagating them.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    pass


class DegenerateStatisticsError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def check_finite(x: np.ndarray, where: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise NonFiniteError(f"non-finite value in {where} at index {tuple(int(i) for i in bad)}")
    return x


def matmul(a, b) -> np.ndarray:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def _sorted_sum(x: np.ndarray) -> np.ndarray:
    # summing in sorted order makes the result independent of element order
    return np.sort(x, axis=-1).sum(axis=-1)


def reduce_stats(x, axes=None) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation over ``axes`` (all if None).

    The result is bit-identical under any permutation of the reduced
    elements.
    """
    x = check_finite(as_tensor(x), "reduce_stats input")
    if axes is None:
        axes = tuple(range(x.ndim))
    elif isinstance(axes, int):
        axes = (axes,)
    axes = tuple(sorted(a % x.ndim for a in axes)) if x.ndim else ()
    if len(set(axes)) != len(axes):
        raise DimensionError(f"repeated axes {axes}")
    keep = [a for a in range(x.ndim) if a not in axes]
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if n < 2:
        raise DegenerateStatisticsError(f"need at least 2 reduced elements, got {n}")
    flat = np.transpose(x, keep + list(axes)).reshape([x.shape[a] for a in keep] + [n])
    mean = _sorted_sum(flat) / n
    dev = (flat - mean[..., None]) ** 2
    std = np.sqrt(_sorted_sum(dev) / n)
    return mean, std


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator for ``seed``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def split_rngs(seed: int, names) -> dict[str, np.random.Generator]:
    """Independent named streams derived from one run seed."""
    names = list(names)
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.Generator(np.random.Philox(c)) for n, c in zip(names, children)}


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


@dataclass
class SgdState:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    no_decay: frozenset = frozenset()

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: SgdState) -> None:
    """In-place SGD-with-momentum update.

    velocity <- momentum * velocity + grad + weight_decay * param
    param    <- param - lr * velocity
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = params[name]
        if g.shape != p.shape:
            raise DimensionError(f"{name}: grad shape {g.shape} != param shape {p.shape}")
        check_finite(g, f"gradient of {name}")
    for name, g in grads.items():
        p = params[name]
        v = state.velocity.get(name)
        if v is None or v.shape != p.shape:
            v = np.zeros_like(p)
        wd = 0.0 if name in state.no_decay else state.weight_decay
        v = state.momentum * v + g + wd * p
        state.velocity[name] = v
        p -= state.learning_rate * v


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """Cosine annealing from ``base_lr`` at epoch 0 to 0 at ``total_epochs``."""
    if total_epochs <= 0:
        return base_lr
    return base_lr * (1.0 + np.cos(np.pi * epoch / total_epochs)) / 2.0
