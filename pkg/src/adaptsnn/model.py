"""Network assembly, the T-step forward pass and the readout/loss."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import neuron
from .layers import Affine, Layer, parse_arch
from .neuron import AtMode, ConfigError, LifParams, SurrogateConfig, ThresholdState
from .tensor import NonFiniteError, as_tensor

PRESETS = {
    "mlp": "300FC-300FC-10FC",
    "mlp4": "256FC-256FC-256FC-10FC",
    "conv": "16C3-2AP-32C3-2AP-10FC",
}


@dataclass
class NeuronConfig:
    tau: float = 0.2
    v_th_init: float = 1.0
    tau_learnable: bool = False
    at_mode: str = "true"
    f_c: float = 1.0
    momentum_m: float = 0.1
    use_tgo: bool = True
    kappa: float = 1.0
    # Estimated mode: follow the layer's current tau, or freeze its initial value
    estimated_tracks_tau: bool = True

    def __post_init__(self):
        self.at_mode = AtMode(self.at_mode).value
        if self.use_tgo and self.at_mode == AtMode.OFF.value:
            raise ConfigError("TGO needs adaptive thresholds (at_mode != off)")
        LifParams(self.tau, self.v_th_init, self.tau_learnable)
        ThresholdState(self.at_mode, self.f_c, self.momentum_m)
        SurrogateConfig(self.kappa)


class LifPopulation:
    """LIF state attached to a weighted layer: tau, thresholds, SG widths."""

    def __init__(self, cfg: NeuronConfig, T: int):
        self.lif = LifParams(cfg.tau, cfg.v_th_init, cfg.tau_learnable)
        self.tau = np.array([cfg.tau])
        self.tau_initial = cfg.tau
        self.thresholds = ThresholdState.for_timesteps(
            T, cfg.v_th_init, mode=cfg.at_mode, f_c=cfg.f_c, momentum_m=cfg.momentum_m
        )
        self.surrogate = SurrogateConfig(cfg.kappa, cfg.use_tgo, np.full(T, cfg.kappa))
        self.estimated_tracks_tau = cfg.estimated_tracks_tau

    def batch_threshold(self, U: np.ndarray) -> float:
        st = self.thresholds
        if st.mode is AtMode.OFF:
            return self.lif.v_th_init
        if st.mode is AtMode.ESTIMATED:
            tau = float(self.tau[0]) if self.estimated_tracks_tau else self.tau_initial
            th = neuron.adaptive_threshold_estimated(tau, self.lif.v_th_init, st.f_c)
        else:
            th = neuron.adaptive_threshold_true(U, st.f_c)
        return max(th, neuron.THRESHOLD_FLOOR)

    def width(self, threshold: float) -> float:
        sg = self.surrogate
        if not sg.use_tgo:
            return sg.base_width_kappa
        return neuron.tgo_width(threshold, self.lif.v_th_init, sg.base_width_kappa)


class SpikingNetwork:
    def __init__(self, layers: list[Layer], input_shape, T: int, neuron_cfg: NeuronConfig | None = None):
        if T < 1:
            raise ConfigError("T must be >= 1")
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.T = T
        self.neuron_cfg = neuron_cfg or NeuronConfig()
        shape = self.input_shape
        for layer in layers:
            shape = layer.build(shape)
        weighted = [l for l in layers if l.weighted]
        if not weighted or weighted[-1].lif or any(not l.lif for l in weighted[:-1]):
            raise ConfigError("exactly the last weighted layer must be the non-spiking readout")
        self.pops: dict[int, LifPopulation] = {
            i: LifPopulation(self.neuron_cfg, T) for i, l in enumerate(layers) if l.lif
        }
        self.num_classes = weighted[-1].fan_out

    @classmethod
    def from_arch(cls, arch: str, input_shape, T: int, neuron_cfg=None, rng=None):
        net = cls(parse_arch(PRESETS.get(arch, arch)), input_shape, T, neuron_cfg)
        if rng is not None:
            net.init(rng)
        return net

    def init(self, rng):
        for layer in self.layers:
            if layer.weighted:
                layer.init(rng)

    def arch_string(self) -> str:
        return "-".join(l.spec() for l in self.layers if l.kind != "flatten")

    @property
    def lif_indices(self) -> list[int]:
        return sorted(self.pops)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            if layer.weighted:
                out[f"layer{i}.weight"] = layer.weight
            if i in self.pops and self.pops[i].lif.tau_learnable:
                out[f"layer{i}.tau"] = self.pops[i].tau
        return out

    def clamp_taus(self):
        for pop in self.pops.values():
            pop.tau[0] = neuron.clamp_tau(float(pop.tau[0]))

    def copy(self) -> "SpikingNetwork":
        return copy.deepcopy(self)

    def running_thresholds(self) -> dict[int, np.ndarray]:
        return {i: p.thresholds.running_thresholds for i, p in self.pops.items()}


@dataclass
class LifRecord:
    I: np.ndarray  # (T, B, ...)
    U: np.ndarray
    S: np.ndarray
    thresholds: np.ndarray  # (T,)
    widths: np.ndarray  # (T,)


@dataclass
class ForwardTrace:
    T: int
    mode: str
    # per layer index: layer input, time-major (T, B, ...) or static (B, ...)
    inputs: dict[int, np.ndarray] = field(default_factory=dict)
    static: dict[int, bool] = field(default_factory=dict)
    lif: dict[int, LifRecord] = field(default_factory=dict)
    readout_input: np.ndarray | None = None
    readout_static: bool = False
    logits: np.ndarray | None = None
    relaxed: bool = False


def _apply(layer: Layer, h: np.ndarray, static: bool, T: int) -> np.ndarray:
    if static:
        return layer.forward(h)
    b = h.shape[1]
    out = layer.forward(h.reshape((T * b,) + h.shape[2:]))
    return out.reshape((T, b) + out.shape[1:])


def _check(x: np.ndarray, layer: int, t: int | None = None):
    if not np.all(np.isfinite(x)):
        where = f"layer {layer}" + ("" if t is None else f", timestep {t + 1}")
        raise NonFiniteError(f"non-finite activation at {where}")


def forward_sequence(
    net: SpikingNetwork,
    x,
    mode: str = "train",
    *,
    relaxed: bool = False,
    frozen: ForwardTrace | None = None,
    reset_gates: ForwardTrace | None = None,
) -> ForwardTrace:
    """Run T timesteps of direct-encoded input through ``net``.

    ``mode="train"`` fires on batch thresholds and updates the running
    thresholds; ``mode="infer"`` fires on the stored running thresholds.

    ``relaxed``, ``frozen`` and ``reset_gates`` exist for gradient checking:
    spikes become the hard-sigmoid ramp, thresholds and widths are copied
    from ``frozen`` (no state update), and the reset gates 1 - S(t-1) are
    taken from ``reset_gates`` instead of the live spikes.
    """
    if mode not in ("train", "infer"):
        raise ValueError(f"mode must be 'train' or 'infer', got {mode!r}")
    T = net.T
    x = as_tensor(x)
    h = x.reshape((x.shape[0],) + net.input_shape)
    static = True
    trace = ForwardTrace(T=T, mode=mode, relaxed=relaxed)
    readout = len(net.layers) - 1 - [l.weighted for l in reversed(net.layers)].index(True)
    for i, layer in enumerate(net.layers):
        trace.inputs[i] = h
        trace.static[i] = static
        if i == readout:
            trace.readout_input = h
            trace.readout_static = static
            trace.logits = output_readout(trace, layer.weight)
            _check(trace.logits, i)
            break
        out = _apply(layer, h, static, T)
        if not layer.lif:
            h = out
            continue
        pop = net.pops[i]
        I = np.broadcast_to(out, (T,) + out.shape) if static else out
        b_shape = I.shape[1:]
        U = np.empty(I.shape)
        S = np.empty(I.shape)
        ths = np.empty(T)
        ks = np.empty(T)
        tau = float(pop.tau[0])
        u_prev = np.zeros(b_shape)
        gate = np.ones(b_shape)
        for t in range(T):
            if reset_gates is not None and t > 0:
                gate = 1.0 - reset_gates.lif[i].S[t - 1]
            u = tau * u_prev * gate + I[t]
            _check(u, i, t)
            if frozen is not None:
                th, k = frozen.lif[i].thresholds[t], frozen.lif[i].widths[t]
            elif mode == "train":
                th = pop.batch_threshold(u)
                st = pop.thresholds
                st.batch_thresholds[t] = th
                if st.mode is not AtMode.OFF:
                    st.running_thresholds[t] = neuron.update_running_threshold(
                        th, st.running_thresholds[t], st.momentum_m
                    )
                k = pop.width(th)
            else:
                th = (
                    pop.lif.v_th_init
                    if pop.thresholds.mode is AtMode.OFF
                    else float(pop.thresholds.running_thresholds[t])
                )
                k = pop.width(th)
            s = neuron.relaxed_fire(u, th, k) if relaxed else neuron.fire(u, th)
            U[t], S[t], ths[t], ks[t] = u, s, th, k
            u_prev = u
            if reset_gates is None:
                gate = 1.0 - s
        if frozen is None:
            pop.surrogate.effective_widths = ks.copy()
        trace.lif[i] = LifRecord(I=I, U=U, S=S, thresholds=ths, widths=ks)
        h = S
        static = False
    return trace


def output_readout(trace: ForwardTrace, output_weights: np.ndarray) -> np.ndarray:
    """Time-averaged weighted sum of the last spiking layer's output, with no
    leak and no firing at the output."""
    h = trace.readout_input
    if trace.readout_static:
        return h @ output_weights.T
    mean_in = h.sum(axis=0) / trace.T
    return mean_in @ output_weights.T


def cross_entropy_ls(logits, labels, smoothing: float = 0.1):
    """Mean softmax cross-entropy against label-smoothed targets.

    Returns (loss, dL/dlogits).
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must lie in [0, 1)")
    z = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    b, c = z.shape
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    target = np.full((b, c), smoothing / c)
    target[np.arange(b), labels] += 1.0 - smoothing
    loss = float(-(target * logp).sum() / b)
    grad = (np.exp(logp) - target) / b
    return loss, grad
