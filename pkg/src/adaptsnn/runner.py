"""Run orchestration behind the CLI: datasets, checkpoints, training runs,
evaluation, gradient checks and the drive-variance sweep."""
from __future__ import annotations

import csv
import json
import logging
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bptt import BpttOptions, evaluate, relaxed_gradient_check, train_epoch
from .config import RunConfig, build_config
from .data import Dataset, SyntheticGaussianSpec, batch_iter, load_cache, load_csv, load_mnist, synth_gaussian
from .layers import Conv2d, parse_arch
from .metrics import ReportAccumulator, export_csv, firing_rates, format_csv, grad_available
from .model import PRESETS, NeuronConfig, SpikingNetwork, forward_sequence
from .tensor import SgdState, cosine_lr, split_rngs
from .tensorio import read_blocks, write_blocks

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"
NETWORK_KEYS = ("arch", "T", "at_mode", "tgo", "f_c", "kappa", "v_th", "tau_learnable", "estimated_tracks_tau")
EPOCH_HEADER = ("epoch", "lr", "train_loss", "train_acc", "test_acc")


class ArchitectureMismatchError(ValueError):
    def __init__(self, field_name: str, expected, found):
        self.field_name, self.expected, self.found = field_name, expected, found
        super().__init__(f"checkpoint/config mismatch in {field_name}: checkpoint has {expected!r}, config has {found!r}")


def version_string() -> str:
    """``v<package version>``, plus ``git describe`` output when run from a checkout."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def neuron_config(cfg: RunConfig) -> NeuronConfig:
    return NeuronConfig(
        tau=cfg.tau,
        v_th_init=cfg.v_th,
        tau_learnable=cfg.tau_learnable,
        at_mode=cfg.at_mode,
        f_c=cfg.f_c,
        momentum_m=cfg.momentum_m,
        use_tgo=cfg.tgo,
        kappa=cfg.kappa,
        estimated_tracks_tau=cfg.estimated_tracks_tau,
    )


def input_shape_for(arch: str, ds: Dataset) -> tuple:
    layers = parse_arch(PRESETS.get(arch, arch))
    if any(isinstance(l, Conv2d) for l in layers):
        if len(ds.feature_shape) != 3:
            raise ValueError(f"convolutional architecture needs (C, H, W) samples, dataset has {ds.feature_shape}")
        return tuple(ds.feature_shape)
    return (int(np.prod(ds.feature_shape)),)


def load_datasets(cfg: RunConfig, seed_streams=None) -> tuple[Dataset, Dataset | None]:
    if cfg.dataset == "mnist":
        return load_mnist(cfg.data_dir, "train"), load_mnist(cfg.data_dir, "test")
    if cfg.dataset == "csv":
        test = load_csv(cfg.test_path) if cfg.test_path else None
        return load_csv(cfg.train_path), test
    if cfg.dataset == "cache":
        test = load_cache(cfg.test_path) if cfg.test_path else None
        return load_cache(cfg.train_path), test
    streams = seed_streams or split_rngs(cfg.seed, ["init", "shuffle", "data"])
    # one draw split in two, so both splits share the labelling hyperplane
    seed = int(streams["data"].integers(0, 2**62))
    n = cfg.synth_n
    ds = synth_gaussian(SyntheticGaussianSpec(cfg.synth_mu, cfg.synth_sigma, cfg.synth_dims, n + cfg.synth_test_n, seed))
    part = lambda sl: Dataset(ds.samples[sl], ds.labels[sl], ds.normalization, ds.feature_shape, ds.num_classes)
    return part(slice(0, n)), (part(slice(n, None)) if cfg.synth_test_n else None)


def build_network(cfg: RunConfig, input_shape, rng=None) -> SpikingNetwork:
    return SpikingNetwork.from_arch(cfg.arch, input_shape, cfg.T, neuron_config(cfg), rng)


# checkpoints


def save_checkpoint(path, net: SpikingNetwork, cfg: RunConfig) -> Path:
    blocks = {
        "config": np.frombuffer(json.dumps(cfg.to_dict(), sort_keys=True).encode(), dtype=np.uint8),
        "arch": np.frombuffer(net.arch_string().encode(), dtype=np.uint8),
        "input_shape": np.array(net.input_shape, dtype=np.int64),
    }
    for i, layer in enumerate(net.layers):
        if layer.weighted:
            blocks[f"layer{i}.weight"] = layer.weight
        if i in net.pops:
            pop = net.pops[i]
            blocks[f"layer{i}.tau"] = pop.tau
            blocks[f"layer{i}.running_thresholds"] = pop.thresholds.running_thresholds
    path = Path(path)
    write_blocks(path, CHECKPOINT_KIND, blocks)
    return path


def load_checkpoint(path, file_values: dict | None = None, overrides: dict | None = None) -> tuple[SpikingNetwork, RunConfig]:
    """Rebuild the network stored at ``path``.

    ``file_values`` and ``overrides`` are layered on top of the embedded
    config (for data paths, output dirs, batch size); network settings that
    disagree with the checkpoint raise ArchitectureMismatchError.
    """
    b = read_blocks(path, CHECKPOINT_KIND)
    stored_values = json.loads(bytes(b["config"]).decode())
    stored = build_config(stored_values, env={})
    cfg = build_config({**stored_values, **(file_values or {})}, overrides) if (file_values or overrides) else stored
    for key in NETWORK_KEYS:
        if getattr(cfg, key) != getattr(stored, key):
            raise ArchitectureMismatchError(key, getattr(stored, key), getattr(cfg, key))
    input_shape = tuple(int(v) for v in b["input_shape"])
    net = build_network(cfg, input_shape)
    arch = bytes(b["arch"]).decode()
    if net.arch_string() != arch:
        raise ArchitectureMismatchError("arch", arch, net.arch_string())
    for i, layer in enumerate(net.layers):
        if not layer.weighted:
            continue
        w = b.get(f"layer{i}.weight")
        if w is None:
            raise ArchitectureMismatchError(f"layer{i}.weight", "missing", layer.spec())
        expected = (layer.fan_out, layer.fan_in) if layer.kind == "affine" else None
        if expected is not None and w.shape != expected:
            raise ArchitectureMismatchError(f"layer{i}.weight", w.shape, expected)
        layer.weight = w.copy()
    for i, pop in net.pops.items():
        pop.tau[:] = b[f"layer{i}.tau"]
        rt = b[f"layer{i}.running_thresholds"]
        if rt.shape != (net.T,):
            raise ArchitectureMismatchError(f"layer{i}.running_thresholds", rt.shape, (net.T,))
        pop.thresholds.running_thresholds = rt.copy()
    return net, cfg


# train / eval


@dataclass
class TrainResult:
    run_dir: Path
    net: SpikingNetwork
    epochs: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)


def _write_epochs(path: Path, rows: list[dict]):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(EPOCH_HEADER)
        for r in rows:
            w.writerow([r["epoch"]] + [format(float(r[k]), ".17g") for k in EPOCH_HEADER[1:]])


def _reports(net, ds: Dataset, batch_size: int):
    acc_hook = ReportAccumulator(net)
    acc = evaluate(net, batch_iter(ds, batch_size), acc_hook)
    return acc, (acc_hook.reports() if acc_hook.n else ())


def run_train(cfg: RunConfig, epoch_hook=None) -> TrainResult:
    streams = split_rngs(cfg.seed, ["init", "shuffle", "data"])
    train_ds, test_ds = load_datasets(cfg, streams)
    if len(train_ds) == 0 and cfg.epochs > 0:
        raise ValueError("training set is empty")
    net = build_network(cfg, input_shape_for(cfg.arch, train_ds), streams["init"])
    run_dir = Path(cfg.metrics_dir) / cfg.effective_run_id()
    run_dir.mkdir(parents=True, exist_ok=True)
    opts = BpttOptions.for_network(net, detach_reset=cfg.detach_reset, grad_clip=cfg.grad_clip)
    sgd = SgdState(cfg.lr, cfg.momentum, cfg.weight_decay)
    result = TrainResult(run_dir, net)
    for epoch in range(cfg.epochs):
        sgd.learning_rate = cosine_lr(cfg.lr, epoch, cfg.epochs)
        m = train_epoch(net, batch_iter(train_ds, cfg.batch_size, True, streams["shuffle"]), opts, sgd, cfg.label_smoothing)
        test_acc = evaluate(net, batch_iter(test_ds, cfg.batch_size)) if test_ds is not None else float("nan")
        row = {"epoch": epoch + 1, "lr": sgd.learning_rate, "train_loss": m.loss, "train_acc": m.accuracy, "test_acc": test_acc}
        result.epochs.append(row)
        log.info("epoch %d lr %.4g loss %.4f train %.4f test %.4f", epoch + 1, sgd.learning_rate, m.loss, m.accuracy, test_acc)
        if epoch_hook is not None:
            epoch_hook(net, row)
    save_checkpoint(run_dir / "checkpoint.asnb", net, cfg)
    _write_epochs(run_dir / "epochs.csv", result.epochs)
    if result.epochs:
        last = result.epochs[-1]
        result.final = {k: last[k] for k in ("train_loss", "train_acc", "test_acc")}
        report_ds = test_ds if test_ds is not None else train_ds
        _, reps = _reports(net, report_ds, cfg.batch_size)
        export_csv(reps, run_dir / "report.csv", cfg.effective_run_id(), cfg.seed)
        if reps:
            result.final["firing_rate"] = reps[0].network_mean
            result.final["energy_j"] = reps[2].energy_j
    summary = {
        "run_id": cfg.effective_run_id(),
        "version": version_string(),
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "epochs_completed": len(result.epochs),
        "final": {k: (None if isinstance(v, float) and np.isnan(v) else v) for k, v in result.final.items()},
    }
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return result


@dataclass
class EvalResult:
    accuracy: float
    reports: tuple
    csv_path: Path | None = None


def run_eval(checkpoint, file_values=None, overrides=None, split: str = "test", out_dir=None) -> EvalResult:
    net, cfg = load_checkpoint(checkpoint, file_values, overrides)
    train_ds, test_ds = load_datasets(cfg)
    ds = train_ds if split == "train" else test_ds
    if ds is None:
        raise ValueError(f"configuration provides no {split} split")
    acc, reps = _reports(net, ds, cfg.batch_size)
    out_dir = Path(out_dir) if out_dir is not None else Path(checkpoint).parent
    path = export_csv(reps, out_dir / f"eval_{split}_report.csv", cfg.effective_run_id(), cfg.seed)
    return EvalResult(acc, reps, path)


# gradcheck


GRADCHECK_COMBOS = [(d, t) for d in (True, False) for t in (False, True)]


def run_gradcheck(cfg: RunConfig) -> dict[str, object]:
    """Relaxed finite-difference check of a pure linear net and of every
    {detach_reset x TGO} combination on ``gradcheck_arch``, tau included."""
    streams = split_rngs(cfg.seed, ["init", "inputs"])
    x = streams["inputs"].standard_normal((cfg.gradcheck_batch, cfg.gradcheck_inputs))
    results = {}
    at_mode = cfg.at_mode if cfg.at_mode != "off" else "true"
    lin_cfg = NeuronConfig(tau=cfg.tau, v_th_init=cfg.v_th, at_mode="off", use_tgo=False, kappa=cfg.kappa)
    lin = SpikingNetwork.from_arch("4FC", (cfg.gradcheck_inputs,), cfg.gradcheck_T, lin_cfg, split_rngs(cfg.seed, ["init"])["init"])
    labels_lin = np.arange(cfg.gradcheck_batch) % lin.num_classes
    results["linear"] = relaxed_gradient_check(lin, x, labels_lin, BpttOptions.for_network(lin), cfg.gradcheck_epsilon, cfg.label_smoothing)
    for detach, tgo in GRADCHECK_COMBOS:
        ncfg = neuron_config(cfg)
        ncfg.tau_learnable = True
        ncfg.at_mode = at_mode
        ncfg.use_tgo = tgo
        net = SpikingNetwork(parse_arch(PRESETS.get(cfg.gradcheck_arch, cfg.gradcheck_arch)), (cfg.gradcheck_inputs,), cfg.gradcheck_T, ncfg)
        net.init(split_rngs(cfg.seed, ["init"])["init"])
        labels = np.arange(cfg.gradcheck_batch) % net.num_classes
        opts = BpttOptions.for_network(net, detach_reset=detach, corrupt_jacobian=cfg.gradcheck_corrupt_jacobian)
        res = relaxed_gradient_check(net, x, labels, opts, cfg.gradcheck_epsilon, cfg.label_smoothing)
        results[f"detach_reset={str(detach).lower()},tgo={'on' if tgo else 'off'}"] = res
    return results


# analyze


REGIME_FLAGS = {"fixed": ("off", False), "at": ("true", False), "at_tgo": ("true", True)}
CURVE_HEADER = ("regime", "sigma", "layer", "metric", "value")


@dataclass
class AnalyzeResult:
    curves: list[tuple] = field(default_factory=list)
    detail_text: str = ""


def analysis_network(cfg: RunConfig, regime: str, rng) -> SpikingNetwork:
    """``analyze_arch`` with its first weight set to the identity, so the
    first hidden layer's input current is the drive itself."""
    at_mode, tgo = REGIME_FLAGS[regime]
    ncfg = neuron_config(cfg)
    ncfg.at_mode, ncfg.use_tgo = at_mode, tgo
    layers = parse_arch(cfg.analyze_arch)
    width = layers[0].fan_out
    net = SpikingNetwork(layers, (width,), cfg.T, ncfg)
    net.init(rng)
    net.layers[0].weight = np.eye(width)
    return net


def run_analyze(cfg: RunConfig) -> AnalyzeResult:
    """Sweep the drive std over ``analyze_sigmas`` for each regime.

    Every (regime, sigma) point uses a fresh network built from the same
    seed and one train-mode forward over N(analyze_mu, sigma^2) drive.
    """
    out = AnalyzeResult()
    detail = []
    for regime in cfg.analyze_regimes:
        for sigma in cfg.analyze_sigmas:
            streams = split_rngs(cfg.seed, ["init", "drive"])
            net = analysis_network(cfg, regime, streams["init"])
            x = streams["drive"].normal(cfg.analyze_mu, sigma, size=(cfg.analyze_batch,) + net.input_shape)
            trace = forward_sequence(net, x, "train")
            fr, ga = firing_rates(trace), grad_available(trace)
            for l in fr.layer_mean:
                out.curves.append((regime, sigma, l, "firing_rate", fr.layer_mean[l]))
                out.curves.append((regime, sigma, l, "grad_available", ga.layer_mean[l]))
            out.curves.append((regime, sigma, "net", "firing_rate", fr.network_mean))
            out.curves.append((regime, sigma, "net", "grad_available", float(np.mean(list(ga.layer_mean.values())))))
            text = format_csv([fr, ga], f"{regime}-s{sigma:g}", cfg.seed)
            detail.append(text if not detail else text.split("\n", 1)[1])
    out.detail_text = "".join(detail)
    return out


def write_analysis(result: AnalyzeResult, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves = out_dir / "curves.csv"
    with open(curves, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for regime, sigma, layer, metric, value in result.curves:
            w.writerow([regime, format(sigma, "g"), layer, metric, format(value, ".17g")])
    detail = out_dir / "detail.csv"
    detail.write_text(result.detail_text)
    return curves, detail
