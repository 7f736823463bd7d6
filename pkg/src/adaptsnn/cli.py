"""``adaptsnn`` command line: train, eval, gradcheck, analyze.

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure,
3 gradient check above tolerance.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import __version__
from .config import METRICS_DIR_ENV, ConfigValidationError, RunConfig, build_config, describe_keys, read_config_file
from .neuron import ConfigError
from .runner import ArchitectureMismatchError, run_analyze, run_eval, run_gradcheck, run_train, write_analysis
from .tensor import NonFiniteError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3

log = logging.getLogger("adaptsnn")


class _Parser(argparse.ArgumentParser):
    # unknown flags are configuration errors, not argparse's usual exit 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", metavar="FILE", help="TOML or JSON config file")
    g = p.add_argument_group("configuration keys (override the file)")
    for f in fields(RunConfig):
        g.add_argument(f"--{f.name}", dest=f"key_{f.name}", metavar="VALUE", default=None, help=f.metadata["doc"])


def _parser() -> argparse.ArgumentParser:
    epilog = (
        "configuration keys:\n"
        + describe_keys()
        + f"\n\nprecedence: defaults < --config file < ${METRICS_DIR_ENV} (metrics_dir) < --<key> flags"
        + "\nexit codes: 0 ok, 1 invalid configuration, 2 runtime failure, 3 gradcheck above tolerance"
    )
    fmt = argparse.RawDescriptionHelpFormatter
    ap = _Parser(prog="adaptsnn", description="Spiking network training with adaptive thresholds.", epilog=epilog, formatter_class=fmt)
    ap.add_argument("--version", action="version", version=f"adaptsnn {__version__}")
    ap.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = ap.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train a network; writes checkpoint, epochs.csv, report.csv, summary.json",
        "eval": "inference-mode accuracy and reports for a checkpoint",
        "gradcheck": "finite-difference check of the BPTT gradients",
        "analyze": "firing-rate / grad-available curves under Gaussian drive",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text, epilog=epilog, formatter_class=fmt)
        _add_config_flags(p)
        if name == "eval":
            p.add_argument("--checkpoint", required=True, metavar="FILE")
            p.add_argument("--split", choices=("train", "test"), default="test")
    return ap


def _sources(args) -> tuple[dict, dict]:
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("key_") and v is not None}
    return file_values, overrides


def _train(cfg: RunConfig) -> int:
    res = run_train(cfg, lambda net, row: print(
        f"epoch {row['epoch']}: lr {row['lr']:.5g} loss {row['train_loss']:.5f} "
        f"train_acc {row['train_acc']:.4f} test_acc {row['test_acc']:.4f}", flush=True
    ))
    print(f"run {cfg.effective_run_id()} -> {res.run_dir}")
    return EXIT_OK


def _eval(args, file_values: dict, overrides: dict) -> int:
    # the checkpoint's embedded config is the base layer here
    res = run_eval(args.checkpoint, file_values, overrides, args.split)
    print(f"accuracy {res.accuracy:.6f}")
    if res.reports:
        fr, _, energy = res.reports
        print(f"firing_rate {fr.network_mean:.6f} energy_j {energy.energy_j:.6g}")
    print(f"report -> {res.csv_path}")
    return EXIT_OK


def _gradcheck(cfg: RunConfig) -> int:
    worst = 0.0
    for name, r in run_gradcheck(cfg).items():
        status = "ok" if r.max_rel_error <= cfg.gradcheck_tolerance else "FAIL"
        print(f"{name}: max_rel_error {r.max_rel_error:.3e} checked {r.n_checked} excluded {r.n_excluded} {status}")
        worst = max(worst, r.max_rel_error)
    return EXIT_OK if worst <= cfg.gradcheck_tolerance else EXIT_GRADCHECK


def _analyze(cfg: RunConfig) -> int:
    res = run_analyze(cfg)
    curves, detail = write_analysis(res, Path(cfg.metrics_dir) / cfg.effective_run_id())
    for regime, sigma, layer, metric, value in res.curves:
        if layer == "net":
            print(f"{regime} sigma={sigma:g} {metric} {value:.4f}")
    print(f"curves -> {curves}\ndetail -> {detail}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        file_values, overrides = _sources(args)
        cfg = None if args.command == "eval" else build_config(file_values, overrides)
    except ValueError as e:  # includes ConfigValidationError and JSON decode errors
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as e:
        print(f"error: cannot read config: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        if args.command == "train":
            return _train(cfg)
        if args.command == "eval":
            return _eval(args, file_values, overrides)
        if args.command == "gradcheck":
            return _gradcheck(cfg)
        return _analyze(cfg)
    except (ConfigValidationError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ArchitectureMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (NonFiniteError, OSError, ArithmeticError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
