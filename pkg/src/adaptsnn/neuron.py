"""Single-timestep LIF mechanics, adaptive thresholds and threshold-driven
surrogate widths."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .tensor import as_tensor, check_finite, reduce_stats

TAU_MIN, TAU_MAX = 0.01, 0.99
# thresholds are kept strictly positive; a batch whose mean + std is <= 0
# would otherwise fire on every neuron
THRESHOLD_FLOOR = 1e-3


class ContractError(ValueError):
    pass


class ConfigError(ValueError):
    pass


class AtMode(str, Enum):
    OFF = "off"
    ESTIMATED = "estimated"
    TRUE = "true"


@dataclass
class LifParams:
    tau: float = 0.2
    v_th_init: float = 1.0
    tau_learnable: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.v_th_init <= 0:
            raise ConfigError("v_th_init must be positive")


@dataclass
class ThresholdState:
    """Per-layer adaptive-threshold configuration and per-timestep state."""

    mode: AtMode = AtMode.TRUE
    f_c: float = 1.0
    momentum_m: float = 0.1
    batch_thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))
    running_thresholds: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.mode = AtMode(self.mode)
        if self.f_c <= 0:
            raise ConfigError("f_c must be positive")
        if not 0.0 < self.momentum_m <= 1.0:
            raise ConfigError("momentum_m must lie in (0, 1]")

    @classmethod
    def for_timesteps(cls, T: int, v_th_init: float, **kw) -> "ThresholdState":
        st = cls(**kw)
        st.batch_thresholds = np.full(T, v_th_init)
        st.running_thresholds = np.full(T, v_th_init)
        return st


@dataclass
class SurrogateConfig:
    base_width_kappa: float = 1.0
    use_tgo: bool = True
    effective_widths: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.base_width_kappa <= 0:
            raise ConfigError("base_width_kappa must be positive")


def integrate(I_t, U_prev, S_prev, tau: float) -> np.ndarray:
    """U_t = tau * U_prev * (1 - S_prev) + I_t  (hard reset)."""
    I_t, U_prev, S_prev = as_tensor(I_t), as_tensor(U_prev), as_tensor(S_prev)
    if not (I_t.shape == U_prev.shape == S_prev.shape):
        raise ContractError(f"shape mismatch {I_t.shape}, {U_prev.shape}, {S_prev.shape}")
    if not np.all((S_prev == 0) | (S_prev == 1)):
        raise ContractError("S_prev must be binary")
    return check_finite(tau * U_prev * (1.0 - S_prev) + I_t, "membrane potential")


def fire(U_t, threshold: float) -> np.ndarray:
    """Heaviside firing; a potential equal to the threshold fires."""
    return (as_tensor(U_t) >= threshold).astype(np.float64)


def relaxed_fire(U_t, threshold: float, width_k: float) -> np.ndarray:
    """Hard-sigmoid ramp whose derivative is the rectangular surrogate a.e."""
    return np.clip((as_tensor(U_t) - threshold) / width_k + 0.5, 0.0, 1.0)


def surrogate_grad(U_t, threshold: float, width_k: float) -> np.ndarray:
    """Rectangular surrogate: 1/k inside |U - th| <= k/2, else 0."""
    if not width_k > 0:
        raise ConfigError(f"surrogate width must be positive, got {width_k}")
    inside = np.abs(as_tensor(U_t) - threshold) <= width_k / 2.0
    return inside / width_k


def adaptive_threshold_estimated(tau: float, v_th_init: float, f_c: float) -> float:
    return f_c * math.sqrt(1.0 + tau * tau) * v_th_init


def adaptive_threshold_true(U_t, f_c: float) -> float:
    """f_c * (mean + population std) of U pooled over batch and neurons."""
    mean, std = reduce_stats(U_t)
    return float(f_c * (mean + std))


def update_running_threshold(batch_th, running_th, m: float):
    if not 0.0 < m <= 1.0:
        raise ConfigError(f"momentum m must lie in (0, 1], got {m}")
    return m * batch_th + (1.0 - m) * running_th


def tgo_width(delta_v_th: float, v_th_init: float, base_k: float) -> float:
    """Surrogate width scaled by how far the adaptive threshold sits from
    the initial one: narrower below it, wider above it."""
    if delta_v_th < v_th_init:
        k = (1.0 - math.tanh(v_th_init - delta_v_th)) * base_k
    else:
        k = (1.0 + math.tanh(delta_v_th - v_th_init)) * base_k
    if not (math.isfinite(k) and k > 0):
        raise ContractError(
            f"non-positive surrogate width {k} (delta={delta_v_th}, v_th={v_th_init}, k={base_k})"
        )
    return k


def gaussian_tail_check(mu: float, sigma: float, n_samples: int, rng: np.random.Generator) -> float:
    """Monte Carlo estimate of P(U > mu + sigma) for U ~ N(mu, sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if n_samples < 100_000:
        raise ValueError("need at least 1e5 samples")
    u = rng.normal(mu, sigma, size=n_samples)
    return float(np.count_nonzero(u > mu + sigma) / n_samples)


def clamp_tau(tau: float) -> float:
    return min(max(tau, TAU_MIN), TAU_MAX)
