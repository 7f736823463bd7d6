"""Backpropagation through time for LIF networks, a finite-difference
checker on a relaxed (ramp) twin, and the epoch loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import neuron
from .model import ForwardTrace, SpikingNetwork, cross_entropy_ls, forward_sequence
from .neuron import ConfigError
from .tensor import NonFiniteError, SgdState, sgd_step

log = logging.getLogger(__name__)


@dataclass
class BpttOptions:
    detach_reset: bool = True
    use_tgo: bool = True
    use_at: bool = True
    grad_clip: float = 0.0  # max global L2 norm, 0 disables
    # negative-control hook: scales the temporal Jacobian so checks must fail
    corrupt_jacobian: bool = False

    def __post_init__(self):
        if self.use_tgo and not self.use_at:
            raise ConfigError("use_tgo requires use_at: widths are derived from adaptive thresholds")

    @classmethod
    def for_network(cls, net: SpikingNetwork, **kw) -> "BpttOptions":
        cfg = net.neuron_cfg
        return cls(use_tgo=cfg.use_tgo, use_at=cfg.at_mode != "off", **kw)


@dataclass
class GradientBundle:
    grads: dict[str, np.ndarray] = field(default_factory=dict)
    # dL/dU per LIF layer, shape (T, B, ...)
    dU: dict[int, np.ndarray] = field(default_factory=dict)

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float((g * g).sum()) for g in self.grads.values())))


def _layer_backward(layer, x, g, static: bool, T: int):
    """Backward through one layer; time-major inputs are folded into batch."""
    if static:
        if g.ndim == x.ndim + 1:  # time-major grad into a static input
            g = g.sum(axis=0)
        return layer.backward(x, g)
    b = x.shape[1]
    gw, gx = layer.backward(x.reshape((T * b,) + x.shape[2:]), g.reshape((T * b,) + g.shape[2:]))
    if gx is not None:
        gx = gx.reshape((T, b) + gx.shape[1:])
    return gw, gx


def _lif_backward(rec, dS_spatial, tau: float, kappa: float, opts: BpttOptions, layer: int):
    T = rec.U.shape[0]
    dU = np.empty_like(rec.U)
    dtau = 0.0
    jac = 1.5 if opts.corrupt_jacobian else 1.0
    dU_next = None
    for t in range(T - 1, -1, -1):
        k = rec.widths[t] if opts.use_tgo else kappa
        dS = dS_spatial[t]
        if dU_next is not None and not opts.detach_reset:
            # reset path: U(t+1) depends on S(t) through the (1 - S) gate
            dS = dS - dU_next * tau * rec.U[t]
        d = dS * neuron.surrogate_grad(rec.U[t], rec.thresholds[t], k)
        if dU_next is not None:
            d = d + jac * dU_next * tau * (1.0 - rec.S[t])
        if not np.all(np.isfinite(d)):
            raise NonFiniteError(f"non-finite gradient at layer {layer}, timestep {t + 1}")
        dU[t] = d
        if t > 0:
            dtau += float((d * rec.U[t - 1] * (1.0 - rec.S[t - 1])).sum())
        dU_next = d
    return dU, dtau


def backward(trace: ForwardTrace, dlogits: np.ndarray, net: SpikingNetwork, opts: BpttOptions | None = None) -> GradientBundle:
    """Gradients of the loss w.r.t. every weight (and learnable tau).

    Thresholds and surrogate widths are read from ``trace`` and treated as
    constants.
    """
    opts = opts or BpttOptions.for_network(net)
    T = trace.T
    bundle = GradientBundle()
    readout = max(i for i, l in enumerate(net.layers) if l.weighted)
    W = net.layers[readout].weight
    h = trace.readout_input
    if trace.readout_static:
        bundle.grads[f"layer{readout}.weight"] = dlogits.T @ h
        g = dlogits @ W
    else:
        bundle.grads[f"layer{readout}.weight"] = dlogits.T @ (h.sum(axis=0) / T)
        g = np.broadcast_to((dlogits @ W) / T, h.shape)
    for i in range(readout - 1, -1, -1):
        layer = net.layers[i]
        x = trace.inputs[i]
        if layer.lif:
            pop = net.pops[i]
            dU, dtau = _lif_backward(
                trace.lif[i], g, float(pop.tau[0]), pop.surrogate.base_width_kappa, opts, i
            )
            bundle.dU[i] = dU
            if pop.lif.tau_learnable:
                bundle.grads[f"layer{i}.tau"] = np.array([dtau])
            g = dU
        gw, g = _layer_backward(layer, x, g, trace.static[i], T)
        if layer.weighted:
            bundle.grads[f"layer{i}.weight"] = gw
    for name, gr in bundle.grads.items():
        if not np.all(np.isfinite(gr)):
            raise NonFiniteError(f"non-finite gradient for {name}")
    return bundle


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_excluded: int
    worst_param: str = ""


def _band_pattern(trace: ForwardTrace) -> list[np.ndarray]:
    out = []
    for rec in trace.lif.values():
        dev = np.abs(rec.U - rec.thresholds.reshape((-1,) + (1,) * (rec.U.ndim - 1)))
        out.append(dev < rec.widths.reshape(dev.shape[:1] + (1,) * (dev.ndim - 1)) / 2)
    return out


def relaxed_gradient_check(
    net: SpikingNetwork,
    x: np.ndarray,
    labels: np.ndarray,
    opts: BpttOptions | None = None,
    epsilon: float = 1e-6,
    smoothing: float = 0.1,
    abs_floor: float = 1e-6,
) -> GradCheckResult:
    """Compare ``backward`` against central differences on a relaxed twin.

    Spikes are replaced by clip((U - th)/k + 1/2, 0, 1), whose derivative is
    the rectangular surrogate almost everywhere. Thresholds and widths are
    frozen from one train-mode pass; with ``detach_reset`` the reset gates
    are frozen as well. Parameters whose +-10*epsilon perturbation moves
    any potential across a ramp kink are excluded and counted.

    Relative error is |a - n| / max(|a|, |n|, abs_floor).
    """
    opts = opts or BpttOptions.for_network(net)
    net = net.copy()
    base = forward_sequence(net.copy(), x, "train")
    relaxed = forward_sequence(net, x, "train", relaxed=True, frozen=base)
    gates = relaxed if opts.detach_reset else None

    def run():
        return forward_sequence(net, x, "train", relaxed=True, frozen=base, reset_gates=gates)

    def loss():
        return cross_entropy_ls(run().logits, labels, smoothing)[0]

    _, dlogits = cross_entropy_ls(relaxed.logits, labels, smoothing)
    analytic = backward(relaxed, dlogits, net, opts).grads
    pattern0 = _band_pattern(relaxed)
    worst, worst_name, checked, excluded = 0.0, "", 0, 0
    for name, p in net.params().items():
        a = analytic[name]
        for idx in np.ndindex(p.shape):
            orig = p[idx]
            kinked = False
            for step in (10 * epsilon, -10 * epsilon):
                p[idx] = orig + step
                if any((pa != pb).any() for pa, pb in zip(_band_pattern(run()), pattern0)):
                    kinked = True
                    break
            if kinked:
                p[idx] = orig
                excluded += 1
                continue
            p[idx] = orig + epsilon
            fp = loss()
            p[idx] = orig - epsilon
            fm = loss()
            p[idx] = orig
            num = (fp - fm) / (2 * epsilon)
            rel = abs(a[idx] - num) / max(abs(a[idx]), abs(num), abs_floor)
            checked += 1
            if rel > worst:
                worst, worst_name = rel, f"{name}{list(idx)}"
    return GradCheckResult(worst, checked, excluded, worst_name)


@dataclass
class EpochMetrics:
    loss: float
    accuracy: float
    n_samples: int
    hooks: dict = field(default_factory=dict)


def clip_gradients(bundle: GradientBundle, max_norm: float) -> None:
    norm = bundle.global_norm()
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in bundle.grads.values():
            g *= scale


def train_step(net, xb, yb, opts: BpttOptions, sgd: SgdState, smoothing: float):
    trace = forward_sequence(net, xb, "train")
    loss, dlogits = cross_entropy_ls(trace.logits, yb, smoothing)
    bundle = backward(trace, dlogits, net, opts)
    clip_gradients(bundle, opts.grad_clip)
    sgd_step(net.params(), bundle.grads, sgd)
    net.clamp_taus()
    return trace, loss


def train_epoch(
    net: SpikingNetwork,
    batches,
    opts: BpttOptions,
    sgd: SgdState,
    smoothing: float = 0.1,
    hooks: dict[str, Callable] | None = None,
) -> EpochMetrics:
    """One pass over ``batches`` (an iterable of (x, labels)).

    Each hook is called as hook(trace, labels) per batch; the list of its
    return values is reported under its name.
    """
    total_loss, correct, n = 0.0, 0, 0
    hook_out: dict[str, list] = {k: [] for k in (hooks or {})}
    for xb, yb in batches:
        trace, loss = train_step(net, xb, yb, opts, sgd, smoothing)
        b = len(yb)
        total_loss += loss * b
        correct += int((trace.logits.argmax(axis=1) == yb).sum())
        n += b
        for name, fn in (hooks or {}).items():
            hook_out[name].append(fn(trace, yb))
    if n == 0:
        raise ValueError("empty dataset")
    return EpochMetrics(total_loss / n, correct / n, n, hook_out)


def evaluate(net: SpikingNetwork, batches, on_trace: Callable | None = None) -> float:
    """Inference-mode accuracy; running thresholds are not touched."""
    correct, n = 0, 0
    for xb, yb in batches:
        trace = forward_sequence(net, xb, "infer")
        correct += int((trace.logits.argmax(axis=1) == yb).sum())
        n += len(yb)
        if on_trace is not None:
            on_trace(trace, yb)
    return correct / n if n else float("nan")
