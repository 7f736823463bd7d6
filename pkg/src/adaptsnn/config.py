"""Flat, typed run configuration.

Precedence, lowest to highest: field defaults, the config file (TOML, or
JSON such as a run's ``summary.json``), the ``ADAPTSNN_METRICS_DIR``
environment variable (``metrics_dir`` only), command-line flags.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

METRICS_DIR_ENV = "ADAPTSNN_METRICS_DIR"
AT_MODES = ("off", "estimated", "true")
REGIMES = ("fixed", "at", "at_tgo")


class ConfigValidationError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = errors
        super().__init__("invalid configuration:\n  " + "\n  ".join(errors))


def _f(default, doc, **kw):
    return field(default=default, metadata={"doc": doc, **kw})


@dataclass
class RunConfig:
    # data
    dataset: str = _f("mnist", "dataset preset: mnist | csv | synthetic | cache")
    data_dir: str = _f("data/mnist", "directory holding the four MNIST IDX files (.gz accepted)")
    train_path: str = _f("", "training file for csv/cache datasets")
    test_path: str = _f("", "test file for csv/cache datasets (optional)")
    synth_mu: float = _f(0.0, "synthetic dataset: feature mean")
    synth_sigma: float = _f(1.0, "synthetic dataset: feature std")
    synth_dims: int = _f(2, "synthetic dataset: feature count")
    synth_n: int = _f(1000, "synthetic dataset: training samples")
    synth_test_n: int = _f(1000, "synthetic dataset: test samples")
    # network
    arch: str = _f("mlp", "preset (mlp, mlp4, conv) or layer string such as 300FC-300FC-10FC")
    T: int = _f(4, "timesteps")
    tau: float = _f(0.2, "initial membrane decay constant")
    tau_learnable: bool = _f(False, "train tau per layer (clamped to [0.01, 0.99])")
    v_th: float = _f(1.0, "initial / fixed firing threshold")
    at_mode: str = _f("true", "adaptive threshold: off | estimated | true")
    f_c: float = _f(1.0, "firing-control factor scaling the adaptive threshold")
    momentum_m: float = _f(0.1, "moving-average momentum for inference thresholds")
    estimated_tracks_tau: bool = _f(True, "estimated mode follows the current tau (else the initial tau)")
    tgo: bool = _f(True, "threshold-driven surrogate width (needs at_mode != off)")
    kappa: float = _f(1.0, "base surrogate width")
    detach_reset: bool = _f(True, "treat the reset gate as constant in BPTT")
    # optimisation
    epochs: int = _f(10, "training epochs (cosine-annealed to 0)")
    batch_size: int = _f(100, "mini-batch size")
    lr: float = _f(0.1, "initial SGD learning rate")
    momentum: float = _f(0.9, "SGD momentum")
    weight_decay: float = _f(1e-4, "SGD weight decay")
    label_smoothing: float = _f(0.1, "cross-entropy label smoothing")
    grad_clip: float = _f(0.0, "max global gradient norm, 0 disables")
    seed: int = _f(0, "run seed; all random streams derive from it")
    # outputs
    metrics_dir: str = _f("runs", "output directory (env ADAPTSNN_METRICS_DIR overrides the file)")
    run_id: str = _f("", "run identifier, defaults to a prefix of the config hash")
    # gradcheck
    gradcheck_arch: str = _f("12FC-10FC-4FC", "gradcheck: small network")
    gradcheck_inputs: int = _f(8, "gradcheck: input features")
    gradcheck_batch: int = _f(4, "gradcheck: batch size")
    gradcheck_T: int = _f(3, "gradcheck: timesteps")
    gradcheck_epsilon: float = _f(1e-5, "gradcheck: central-difference step")
    gradcheck_tolerance: float = _f(1e-4, "gradcheck: max allowed relative error")
    gradcheck_corrupt_jacobian: bool = _f(False, "gradcheck negative control: corrupt the temporal Jacobian")
    # analyze
    analyze_sigmas: tuple = _f((0.25, 0.5, 1.0, 2.0, 4.0), "analyze: drive std grid")
    analyze_mu: float = _f(0.5, "analyze: drive mean")
    analyze_arch: str = _f("128FC-128FC-128FC-128FC-10FC", "analyze: network (first layer passes the drive through)")
    analyze_batch: int = _f(256, "analyze: samples per sigma")
    analyze_regimes: tuple = _f(REGIMES, "analyze: regimes among fixed, at, at_tgo")

    def validate(self) -> "RunConfig":
        errs = []
        if self.dataset not in ("mnist", "csv", "synthetic", "cache"):
            errs.append(f"dataset: unknown preset {self.dataset!r}")
        if self.dataset in ("csv", "cache") and not self.train_path:
            errs.append("train_path: required for csv/cache datasets")
        if self.at_mode not in AT_MODES:
            errs.append(f"at_mode: must be one of {AT_MODES}, got {self.at_mode!r}")
        if self.tgo and self.at_mode == "off":
            errs.append("tgo: cannot be enabled with at_mode = off (widths derive from adaptive thresholds)")
        for name in ("T", "batch_size", "synth_dims", "gradcheck_inputs", "gradcheck_batch", "gradcheck_T", "analyze_batch"):
            if getattr(self, name) < 1:
                errs.append(f"{name}: must be >= 1")
        for name in ("epochs", "synth_n", "synth_test_n"):
            if getattr(self, name) < 0:
                errs.append(f"{name}: must be >= 0")
        if not 0 < self.tau < 1:
            errs.append("tau: must lie in (0, 1)")
        for name in ("v_th", "f_c", "kappa", "synth_sigma", "gradcheck_epsilon", "gradcheck_tolerance"):
            if not getattr(self, name) > 0:
                errs.append(f"{name}: must be positive")
        if not 0 < self.momentum_m <= 1:
            errs.append("momentum_m: must lie in (0, 1]")
        if not 0 <= self.momentum < 1:
            errs.append("momentum: must lie in [0, 1)")
        if self.lr < 0 or self.weight_decay < 0 or self.grad_clip < 0:
            errs.append("lr, weight_decay, grad_clip: must be nonnegative")
        if not 0 <= self.label_smoothing < 1:
            errs.append("label_smoothing: must lie in [0, 1)")
        if not self.analyze_sigmas or any(s <= 0 for s in self.analyze_sigmas):
            errs.append("analyze_sigmas: need at least one positive value")
        bad = [r for r in self.analyze_regimes if r not in REGIMES]
        if bad or not self.analyze_regimes:
            errs.append(f"analyze_regimes: must be a non-empty subset of {REGIMES}")
        if errs:
            raise ConfigValidationError(errs)
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in ("metrics_dir", "run_id")}
        canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()

    def effective_run_id(self) -> str:
        return self.run_id or self.config_hash()[:12]


FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, value, errs: list[str]):
    f = FIELDS[name]
    default = f.default if f.default is not MISSING else None
    try:
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("true", "1", "yes", "on"):
                return True
            if s in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = value.split(",") if isinstance(value, str) else list(value)
            items = [i.strip() if isinstance(i, str) else i for i in items if i != ""]
            if default and isinstance(default[0], float):
                return tuple(float(i) for i in items)
            return tuple(str(i) for i in items)
        return str(value)
    except (TypeError, ValueError):
        errs.append(f"{name}: cannot interpret {value!r} as {type(default).__name__}")
        return default


def read_config_file(path) -> dict:
    path = Path(path)
    if path.suffix == ".json":
        data = json.loads(path.read_text())
        if isinstance(data, dict) and isinstance(data.get("config"), dict):
            data = data["config"]
    else:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    if not isinstance(data, dict):
        raise ConfigValidationError([f"{path}: top level must be a key/value table"])
    return data


def build_config(file_values: dict | None = None, overrides: dict | None = None, env=None) -> RunConfig:
    """Merge file values, environment and flag overrides onto the defaults.

    Unknown keys and type errors are collected and raised together.
    """
    env = os.environ if env is None else env
    errs: list[str] = []
    merged: dict = {}
    for k, v in (file_values or {}).items():
        if k not in FIELDS:
            errs.append(f"{k}: unknown configuration key")
            continue
        merged[k] = _coerce(k, v, errs)
    if env.get(METRICS_DIR_ENV):
        merged["metrics_dir"] = env[METRICS_DIR_ENV]
    for k, v in (overrides or {}).items():
        if v is None:
            continue
        if k not in FIELDS:
            errs.append(f"{k}: unknown configuration key")
            continue
        merged[k] = _coerce(k, v, errs)
    if errs:
        raise ConfigValidationError(errs)
    cfg = RunConfig(**merged)
    return cfg.validate()


def describe_keys() -> str:
    lines = []
    for f in fields(RunConfig):
        default = f.default
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        lines.append(f"  {f.name:<28} {f.metadata['doc']} (default: {default})")
    return "\n".join(lines)
