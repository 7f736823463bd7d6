"""Firing rates, gradient-available proportions, AC/MAC energy estimates,
and their CSV export.

CSV schema (one row per layer/timestep/metric)::

    run_id,seed,layer,timestep,metric,value

``timestep`` is 1-based, or empty for values aggregated over time; ``layer``
is the layer index, or ``net`` for network-wide values. Values are written
with 17 significant digits so they parse back exactly.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ForwardTrace, SpikingNetwork

AC_JOULES = 0.9e-12
MAC_JOULES = 4.6e-12
CSV_HEADER = ("run_id", "seed", "layer", "timestep", "metric", "value")


@dataclass
class FiringReport:
    per_timestep: dict[int, np.ndarray] = field(default_factory=dict)
    layer_mean: dict[int, float] = field(default_factory=dict)
    network_mean: float = 0.0

    def rows(self):
        for l, rates in self.per_timestep.items():
            for t, r in enumerate(rates):
                yield l, t + 1, "firing_rate", float(r)
            yield l, "", "firing_rate_mean", self.layer_mean[l]
        yield "net", "", "firing_rate_mean", self.network_mean


@dataclass
class GradAvailableReport:
    per_timestep: dict[int, np.ndarray] = field(default_factory=dict)
    layer_mean: dict[int, float] = field(default_factory=dict)

    def rows(self):
        for l, p in self.per_timestep.items():
            for t, v in enumerate(p):
                yield l, t + 1, "grad_available", float(v)
            yield l, "", "grad_available_mean", self.layer_mean[l]


@dataclass
class EnergyReport:
    ac: dict[int, float] = field(default_factory=dict)
    mac: dict[int, float] = field(default_factory=dict)
    total_ac: float = 0.0
    total_mac: float = 0.0
    energy_j: float = 0.0

    def rows(self):
        for l in self.ac:
            yield l, "", "ac_ops", self.ac[l]
            yield l, "", "mac_ops", self.mac[l]
        yield "net", "", "ac_ops", self.total_ac
        yield "net", "", "mac_ops", self.total_mac
        yield "net", "", "energy_j", self.energy_j


def firing_rates(trace: ForwardTrace) -> FiringReport:
    rep = FiringReport()
    for l, rec in trace.lif.items():
        axes = tuple(range(1, rec.S.ndim))
        rates = rec.S.mean(axis=axes)
        rep.per_timestep[l] = rates
        rep.layer_mean[l] = float(rates.mean())
    if rep.layer_mean:
        rep.network_mean = float(np.mean(list(rep.layer_mean.values())))
    return rep


def grad_available(trace: ForwardTrace) -> GradAvailableReport:
    """Share of (neuron, t) whose potential lies within the surrogate band
    |U - th(t)| <= k(t)/2 of its own layer and timestep."""
    rep = GradAvailableReport()
    for l, rec in trace.lif.items():
        props = np.empty(trace.T)
        for t in range(trace.T):
            props[t] = np.mean(np.abs(rec.U[t] - rec.thresholds[t]) <= rec.widths[t] / 2.0)
        rep.per_timestep[l] = props
        rep.layer_mean[l] = float(props.mean())
    return rep


def layer_input_rates(net: SpikingNetwork, trace: ForwardTrace) -> dict[int, float]:
    """Firing rate of the spikes entering each weighted layer (nan for
    layers fed by the analog input)."""
    out = {}
    last_lif = None
    for i, layer in enumerate(net.layers):
        if layer.weighted:
            out[i] = float("nan") if last_lif is None else float(trace.lif[last_lif].S.mean())
        if layer.lif:
            last_lif = i
    return out


def energy_from_rates(net: SpikingNetwork, rates: dict[int, float], T: int) -> EnergyReport:
    """AC/MAC counts per sample.

    The encoding layer (analog input) and the readout layer cost T * ops
    MACs; every other weighted layer costs rate_in * T * ops ACs, ops being
    the iso-architecture ANN multiply-accumulate count.
    """
    rep = EnergyReport()
    weighted = [i for i, l in enumerate(net.layers) if l.weighted]
    first, readout = weighted[0], weighted[-1]
    for i in weighted:
        ops = net.layers[i].ops()
        if i in (first, readout):
            rep.ac[i], rep.mac[i] = 0.0, float(T * ops)
        else:
            rep.ac[i], rep.mac[i] = float(rates[i] * T * ops), 0.0
    rep.total_ac = float(sum(rep.ac.values()))
    rep.total_mac = float(sum(rep.mac.values()))
    rep.energy_j = AC_JOULES * rep.total_ac + MAC_JOULES * rep.total_mac
    return rep


def energy_estimate(trace: ForwardTrace, net: SpikingNetwork) -> EnergyReport:
    return energy_from_rates(net, layer_input_rates(net, trace), trace.T)


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def format_csv(reports, run_id: str = "", seed: int | str = "") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for rep in reports:
        for layer, t, metric, value in rep.rows():
            w.writerow([run_id, seed, layer, t, metric, _fmt(value)])
    return buf.getvalue()


def export_csv(reports, path, run_id: str = "", seed: int | str = "") -> Path:
    path = Path(path)
    text = format_csv(reports, run_id, seed)
    try:
        path.write_text(text)
    except OSError as e:
        raise OSError(f"cannot write metrics to {path}: {e}") from e
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    for r in rows:
        r["value"] = float(r["value"])
    return rows


class ReportAccumulator:
    """Averages firing and gradient-available reports over eval batches,
    weighting each batch by its size."""

    def __init__(self, net: SpikingNetwork):
        self.net = net
        self.n = 0
        self._fire: dict[int, np.ndarray] = {}
        self._grad: dict[int, np.ndarray] = {}
        self._rates: dict[int, float] = {}
        self.T = net.T

    def __call__(self, trace: ForwardTrace, labels=None):
        b = trace.logits.shape[0]
        fr, ga = firing_rates(trace), grad_available(trace)
        for l in fr.per_timestep:
            self._fire[l] = self._fire.get(l, 0) + b * fr.per_timestep[l]
            self._grad[l] = self._grad.get(l, 0) + b * ga.per_timestep[l]
        for i, r in layer_input_rates(self.net, trace).items():
            self._rates[i] = self._rates.get(i, 0.0) + b * r
        self.n += b

    def reports(self):
        fr, ga = FiringReport(), GradAvailableReport()
        for l in sorted(self._fire):
            fr.per_timestep[l] = self._fire[l] / self.n
            fr.layer_mean[l] = float(fr.per_timestep[l].mean())
            ga.per_timestep[l] = self._grad[l] / self.n
            ga.layer_mean[l] = float(ga.per_timestep[l].mean())
        if fr.layer_mean:
            fr.network_mean = float(np.mean(list(fr.layer_mean.values())))
        rates = {i: r / self.n for i, r in self._rates.items()}
        return fr, ga, energy_from_rates(self.net, rates, self.T)
