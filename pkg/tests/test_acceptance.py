"""Acceptance criteria, one test per criterion.

Each test prints a single ``criterion N: PASS|FAIL ...`` line (shown even
under output capture) before asserting. Run with
``pytest tests/test_acceptance.py -v``.
"""
import csv
import io
import math
import time

import numpy as np
import pytest

from adaptsnn.bptt import BpttOptions, backward
from adaptsnn.config import build_config
from adaptsnn.data import load_mnist
from adaptsnn.metrics import AC_JOULES, MAC_JOULES, energy_from_rates, read_csv
from adaptsnn.model import NeuronConfig, SpikingNetwork, cross_entropy_ls, forward_sequence
from adaptsnn.neuron import surrogate_grad, tgo_width, gaussian_tail_check, update_running_threshold
from adaptsnn.runner import run_analyze, run_gradcheck, run_train
from adaptsnn.tensor import make_rng
from oracles import naive_loss_and_grads, trapezoid

FIXED = NeuronConfig(at_mode="off", use_tgo=False)
SEEDS = (0, 1, 2)


@pytest.fixture
def verdict(capsys):
    def report(n: int, ok: bool, detail: str):
        with capsys.disabled():
            print(f"\ncriterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return report


_RUNS: dict = {}


def _mnist_run(mnist_dir, tmp_path_factory, **overrides):
    """Train (once per distinct override set) and return (result, test report rows)."""
    cfg = build_config(overrides={"dataset": "mnist", "data_dir": str(mnist_dir), "run_id": "run", **overrides}, env={})
    key = cfg.config_hash()
    if key not in _RUNS:
        cfg.metrics_dir = str(tmp_path_factory.mktemp("acc"))
        res = run_train(cfg)
        _RUNS[key] = (res, read_csv(res.run_dir / "report.csv"))
    return _RUNS[key]


def test_criterion_1_gaussian_tail(verdict):
    pairs = [(0.0, 1.0), (3.0, 0.5), (-2.0, 4.0), (10.0, 0.01)]
    start = time.perf_counter()
    probs = [gaussian_tail_check(mu, sigma, 1_000_000, make_rng(i)) for i, (mu, sigma) in enumerate(pairs)]
    elapsed = time.perf_counter() - start
    ok = all(abs(p - 0.1587) <= 0.005 for p in probs) and elapsed < 5.0
    verdict(1, ok, f"P(U > mu+sigma) = {[round(p, 4) for p in probs]} in {elapsed:.2f}s")


def test_criterion_2_gradcheck(verdict):
    cfg = build_config(env={})
    probe = SpikingNetwork.from_arch(
        cfg.gradcheck_arch, (cfg.gradcheck_inputs,), cfg.gradcheck_T, NeuronConfig(tau_learnable=True), make_rng(0)
    )
    n_params = sum(p.size for p in probe.params().values())
    start = time.perf_counter()
    results = run_gradcheck(cfg)
    elapsed = time.perf_counter() - start
    combos = {k: r.max_rel_error for k, r in results.items() if k != "linear"}
    ok = len(combos) == 4 and all(e < 1e-4 for e in combos.values()) and elapsed < 60
    assert cfg.gradcheck_T == 3 and n_params <= 1000
    assert all(r.n_checked > 0 for r in results.values())
    worst = ", ".join(f"{k}: {v:.1e}" for k, v in combos.items())
    verdict(2, ok, f"{worst}; {n_params} parameters, {elapsed:.1f}s")


def test_criterion_3_naive_oracle(verdict):
    worst, cases, nonzero = 0.0, 0, 0
    for seed in range(4):
        for detach in (True, False):
            net = SpikingNetwork.from_arch("5FC-4FC-2FC", (3,), 3, FIXED, make_rng(seed))
            assert sum(p.size for p in net.params().values()) <= 100
            x = make_rng(seed + 50).standard_normal((4, 3)) + 0.8
            labels = [0, 1, 1, 0]
            tr = forward_sequence(net, x, "train")
            loss, dz = cross_entropy_ls(tr.logits, labels, 0.1)
            b = backward(tr, dz, net, BpttOptions.for_network(net, detach_reset=detach))
            weights = [l.weight.tolist() for l in net.layers if l.weighted]
            ref_loss, ref = naive_loss_and_grads(weights, x.tolist(), labels, 3, 0.2, 1.0, 1.0, 0.1, detach)
            worst = max(worst, abs(loss - ref_loss))
            idx = [i for i, l in enumerate(net.layers) if l.weighted]
            for i, g in zip(idx, ref):
                worst = max(worst, float(np.max(np.abs(b.grads[f"layer{i}.weight"] - np.array(g)))))
            nonzero += any(b.grads[f"layer{i}.weight"].any() for i in idx[:-1])
            cases += 1
    ok = worst <= 1e-12 and nonzero > 0
    verdict(3, ok, f"max abs difference {worst:.2e} over {cases} cases ({nonzero} with hidden gradients)")


def _per_timestep_rates(detail_text: str):
    rates: dict = {}
    for row in csv.DictReader(io.StringIO(detail_text)):
        if row["metric"] == "firing_rate":
            regime = row["run_id"].rsplit("-s", 1)[0]
            rates.setdefault(regime, []).append(float(row["value"]))
    return rates


def test_criterion_4_firing_stability(verdict):
    sigmas = (0.25, 0.35, 0.5, 0.7, 1.0, 1.4, 2.0, 2.8, 4.0)
    cfg = build_config(overrides={"analyze_sigmas": sigmas, "analyze_regimes": ("fixed", "at"), "analyze_batch": 512}, env={})
    rates = _per_timestep_rates(run_analyze(cfg).detail_text)
    at, fixed = np.array(rates["at"]), np.array(rates["fixed"])
    assert at.size == len(sigmas) * 4 * cfg.T
    ok = at.min() >= 0.10 and at.max() <= 0.22 and fixed.min() <= 0.02 and fixed.max() >= 0.45
    verdict(
        4, ok,
        f"AT rates in [{at.min():.3f}, {at.max():.3f}]; fixed rates span [{fixed.min():.3f}, {fixed.max():.3f}]",
    )


def _grad_available_by_layer(rows):
    return {int(r["layer"]): r["value"] for r in rows if r["metric"] == "grad_available_mean"}


@pytest.mark.slow
def test_criterion_5_grad_availability(verdict, mnist_dir, tmp_path_factory):
    lines, ok = [], True
    for seed in SEEDS:
        _, at_rows = _mnist_run(mnist_dir, tmp_path_factory, arch="mlp4", epochs=5, seed=seed)
        _, fx_rows = _mnist_run(mnist_dir, tmp_path_factory, arch="mlp4", epochs=5, seed=seed, at_mode="off", tgo=False)
        at, fx = _grad_available_by_layer(at_rows), _grad_available_by_layer(fx_rows)
        assert at.keys() == fx.keys() and len(at) == 3
        ok &= all(at[l] > fx[l] for l in at)
        lines.append(f"seed {seed}: " + " ".join(f"L{l} {at[l]:.4f}/{fx[l]:.4f}" for l in sorted(at)))
    verdict(5, ok, "AT+TGO/fixed per layer; " + "; ".join(lines))


@pytest.mark.slow
def test_criterion_6_desk_scale_learning(verdict, mnist_dir, tmp_path_factory):
    at_acc, van_acc = [], []
    for seed in SEEDS:
        res, _ = _mnist_run(mnist_dir, tmp_path_factory, arch="mlp", T=4, epochs=10, seed=seed)
        at_acc.append(res.final["test_acc"])
        res, _ = _mnist_run(mnist_dir, tmp_path_factory, arch="mlp", T=4, epochs=10, seed=seed, at_mode="off", tgo=False)
        van_acc.append(res.final["test_acc"])
    n_train = len(load_mnist(mnist_dir, "train"))
    ok = min(at_acc) >= 0.97 and np.mean(at_acc) >= np.mean(van_acc) - 0.001
    verdict(
        6, ok,
        f"AT+TGO test acc {[round(a, 4) for a in at_acc]} (mean {np.mean(at_acc):.4f}), "
        f"vanilla mean {np.mean(van_acc):.4f}, gap {100 * (np.mean(at_acc) - np.mean(van_acc)):+.2f} pts, "
        f"{n_train} training digits",
    )


@pytest.mark.slow
def test_criterion_7_momentum_robustness(verdict, mnist_dir, tmp_path_factory):
    runs = {m: _mnist_run(mnist_dir, tmp_path_factory, arch="mlp", T=4, epochs=10, seed=0, momentum_m=m)[0] for m in (0.05, 0.1, 0.2)}
    th = np.array([np.concatenate([r.net.running_thresholds()[l] for l in sorted(r.net.pops)]) for r in runs.values()])
    spread = float(np.max((th.max(axis=0) - th.min(axis=0)) / np.abs(th).min(axis=0)))
    accs = [r.final["test_acc"] for r in runs.values()]
    acc_range = 100 * (max(accs) - min(accs))
    ok = spread <= 0.05 and acc_range < 0.3
    verdict(7, ok, f"max relative threshold spread {spread:.4f}, accuracy {accs} (range {acc_range:.2f} pts)")


def test_criterion_8_energy(verdict):
    T, fr = 2, 0.15
    # 784-100-10: encoding and readout are both MAC layers
    net = SpikingNetwork.from_arch("100FC-10FC", (784,), T, FIXED, make_rng(0))
    rep = energy_from_rates(net, {0: math.nan, 1: fr}, T)
    ledger_mac = T * 784 * 100 + T * 100 * 10
    exact = rep.ac == {0: 0.0, 1: 0.0} and rep.total_mac == ledger_mac and rep.energy_j == MAC_JOULES * ledger_mac
    # 784-100-100-10: the middle layer reads spikes and costs FR * T * ops ACs
    net3 = SpikingNetwork.from_arch("100FC-100FC-10FC", (784,), T, FIXED, make_rng(0))
    rep3 = energy_from_rates(net3, {0: math.nan, 1: fr, 2: 0.3}, T)
    ledger_ac = fr * T * 100 * 100
    exact &= rep3.total_ac == ledger_ac and rep3.total_mac == ledger_mac
    exact &= rep3.energy_j == AC_JOULES * ledger_ac + MAC_JOULES * ledger_mac
    rng = make_rng(3)
    monotone = True
    for _ in range(500):
        base = {0: math.nan, 1: rng.uniform(), 2: rng.uniform()}
        bumped = dict(base)
        layer = int(rng.integers(1, 3))
        bumped[layer] = min(1.0, bumped[layer] + rng.uniform(0, 0.5))
        monotone &= energy_from_rates(net3, bumped, T).energy_j >= energy_from_rates(net3, base, T).energy_j
    verdict(8, exact and monotone, f"ledger exact={exact} (MAC {rep.total_mac:.0f}, AC {rep3.total_ac:.0f}), monotone={monotone}")


def test_criterion_9_invariants(verdict, tmp_path):
    checks = {}
    checks["surrogate integral"] = all(
        abs(trapezoid(lambda u, k=k: float(surrogate_grad([u], 1.0, k)[0]), -4.0, 6.0, 100_000) - 1.0) <= 1e-3
        for k in (0.5, 1.0, 2.0)
    )
    deltas = np.linspace(0.01, 3.0, 1000)
    widths = np.array([tgo_width(d, 1.0, 1.0) for d in deltas])
    checks["tgo monotone"] = bool(np.all(np.diff(widths) >= 0))
    checks["tgo continuous"] = bool(np.max(np.abs(np.diff(widths))) < 2 * (deltas[1] - deltas[0])) and abs(
        tgo_width(1.0 - 1e-9, 1.0, 1.0) - tgo_width(1.0 + 1e-9, 1.0, 1.0)
    ) < 1e-8
    rng = make_rng(4)
    convex = True
    for _ in range(1000):
        b, r, m = rng.uniform(-100, 100), rng.uniform(-100, 100), rng.uniform(1e-3, 1)
        out = update_running_threshold(b, r, m)
        convex &= min(b, r) - 1e-12 <= out <= max(b, r) + 1e-12
    checks["EMA convex"] = convex
    checks["EMA fixed point"] = all(update_running_threshold(c, c, 0.1) == c for c in (0.5, 1.0, 3.0))
    losses = []
    for run in ("a", "b"):
        cfg = build_config(
            overrides={
                "dataset": "synthetic", "synth_dims": 4, "synth_n": 200, "synth_test_n": 0, "arch": "16FC-2FC",
                "T": 2, "epochs": 3, "batch_size": 20, "seed": 11, "metrics_dir": str(tmp_path), "run_id": run,
            },
            env={},
        )
        losses.append([row["train_loss"] for row in run_train(cfg).epochs])
    checks["determinism"] = losses[0] == losses[1]
    failed = [k for k, v in checks.items() if not v]
    verdict(9, not failed, "all invariants hold" if not failed else f"failed: {failed}")
