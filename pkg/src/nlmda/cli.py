"""Command-line entry point: ``nlmda <command> [options]``.

Exit codes: 0 success, 2 invalid input (flags, paths, config, file format),
3 numerical failure.

Precedence: built-in defaults < config file < command-line flags
(``--set section.key=value`` or the dedicated flags).
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checks
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, effective_lines, load_config
from .epochfile import EpochFileError, read_epochs, write_epochs
from .model import ModelConfig, init_params, layer_param_table, param_count
from .pipeline import RawRecording, SEED_VIG_CHANNELS, preprocess_recording, stratified_split, synth_generate
from .train import (
    CURVE_COLUMNS,
    NLMDAClassifier,
    config_entries,
    cross_validate,
    curve_rows,
    evaluate,
    fit,
    run_metrics_entries,
    write_metrics,
)

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    pass


def _echo(lines) -> None:
    for line in lines:
        print(line)


def _require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"file not found: {p}")
    return p


def _require_out(path) -> Path:
    p = Path(path)
    if not p.parent.exists():
        raise UsageError(f"output directory does not exist: {p.parent}")
    return p


def _run_config(args) -> RunConfig:
    run = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    apply_overrides(run, getattr(args, "set", None))
    if getattr(args, "data", None):
        run.data["path"] = args.data
    if getattr(args, "out_dir", None):
        run.output["dir"] = args.out_dir
    if getattr(args, "epochs", None) is not None:
        run.train["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        run.train["seed"] = args.seed
    return run


def _load_data(run: RunConfig):
    if run.data_path is None:
        raise UsageError("no data path given (data.path or --data)")
    return read_epochs(_require_file(run.data_path))


def _model_config(run: RunConfig, data, n_train: int) -> ModelConfig:
    derived = {"C": data.C, "T": data.T, "f": data.fs, "N_t": n_train}
    return run.model_config(**derived)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    out = _require_out(args.out)
    _echo([f"synth.n_per_class={args.n_per_class}", f"synth.seed={args.seed}",
           f"synth.C={args.channels}", f"synth.T={args.samples}", f"synth.out={out}"])
    data = synth_generate(args.n_per_class, C=args.channels, T=args.samples, fs=args.fs, seed=args.seed)
    write_epochs(data, out)
    print(f"wrote {len(data)} epochs to {out}")
    return EXIT_OK


def _read_perclos(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.replace(",", " ").split()
        if len(parts) != 2:
            raise UsageError(f"PERCLOS lines need 'timestamp value', got {line!r}")
        rows.append((float(parts[0]), float(parts[1])))
    if not rows:
        raise UsageError("PERCLOS file is empty")
    return np.array(rows)


def cmd_preprocess(args) -> int:
    raw_path = _require_file(args.input)
    perclos_path = _require_file(args.perclos)
    out = _require_out(args.out)
    names = args.channel_names.split(",") if args.channel_names else list(SEED_VIG_CHANNELS)
    _echo([f"preprocess.in={raw_path}", f"preprocess.fs={args.fs}", f"preprocess.channels={len(names)}",
           f"preprocess.perclos={perclos_path}", f"preprocess.target_fs={args.target_fs}",
           f"preprocess.out={out}"])
    flat = np.fromfile(raw_path, dtype="<f4")
    if flat.size % len(names):
        raise UsageError(f"{flat.size} samples do not split into {len(names)} channels")
    rec = RawRecording(args.fs, names, flat.reshape(len(names), -1).astype(np.float64),
                       _read_perclos(perclos_path))
    data = preprocess_recording(rec, args.target_fs)
    data.provenance["source"] = str(raw_path)
    write_epochs(data, out)
    counts = data.class_counts()
    print(f"wrote {len(data)} epochs ({counts[0]} awake, {counts[1]} drowsy) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    run = _run_config(args)
    data = _load_data(run)
    out_dir = run.out_dir
    if not out_dir.is_dir():
        raise UsageError(f"output directory does not exist: {out_dir}")
    tcfg = run.train_config()
    split_seed = run.data.get("split_seed", tcfg.seed)
    split = stratified_split(data, seed=split_seed)
    mcfg = _model_config(run, data, len(split.train))
    _echo(effective_lines(run, mcfg, tcfg))
    model = NLMDAClassifier(init_params(mcfg))
    history = fit(model, data.subset(split.train), data.subset(split.val), tcfg)
    test_acc = evaluate(model, data.subset(split.test))
    ckpt = out_dir / run.output.get("checkpoint", "model.nlmd")
    metrics = out_dir / run.output.get("metrics", "train_metrics.txt")
    save_checkpoint(model.params, ckpt)
    entries = {"command": "train", "data": str(run.data_path), "split_seed": split_seed,
               "n_train": len(split.train), "n_val": len(split.val), "n_test": len(split.test),
               **config_entries("model", mcfg), **config_entries("train", tcfg),
               "best_epoch": history.best_epoch, "best_val_accuracy": history.best_val_accuracy,
               "test_accuracy": test_acc}
    rows = [(0, ep, l, a) for ep, (l, a) in
            enumerate(zip(history.train_loss, history.val_accuracy), start=1)]
    write_metrics(metrics, entries, rows, CURVE_COLUMNS)
    print(f"best epoch {history.best_epoch}: val accuracy {history.best_val_accuracy:.4f}")
    print(f"test accuracy {test_acc:.4f}")
    print(f"checkpoint {ckpt}\nmetrics {metrics}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_checkpoint(_require_file(args.checkpoint))
    data = read_epochs(_require_file(args.data))
    metrics = _require_out(args.metrics) if args.metrics else None
    cfg = params.config
    _echo([f"eval.checkpoint={args.checkpoint}", f"eval.data={args.data}"]
          + [f"{k}={v}" for k, v in config_entries("model", cfg).items()])
    if (data.C, data.T) != (cfg.C, cfg.T):
        raise UsageError(f"data is C={data.C}, T={data.T}; checkpoint expects C={cfg.C}, T={cfg.T}")
    acc = evaluate(NLMDAClassifier(params), data)
    print(f"accuracy={acc!r}")
    if metrics:
        write_metrics(metrics, {"command": "eval", "checkpoint": args.checkpoint, "data": args.data,
                                "n": len(data), "accuracy": acc})
    return EXIT_OK


def cmd_cv(args) -> int:
    run = _run_config(args)
    data = _load_data(run)
    out_dir = run.out_dir
    if not out_dir.is_dir():
        raise UsageError(f"output directory does not exist: {out_dir}")
    k = args.k if args.k is not None else run.data.get("k", 5)
    tcfg = run.train_config()
    split_seed = run.data.get("split_seed", tcfg.seed)
    # N_t is re-derived per fold from the actual training-set size unless pinned.
    n_fold_train = len(data) - len(data) // k
    mcfg = _model_config(run, data, n_fold_train)
    _echo(effective_lines(run, mcfg, tcfg) + [f"cv.k={k}", f"cv.jobs={args.jobs}"])
    derive = "N_t" not in run.model
    started = time.process_time()
    metrics = cross_validate(data, mcfg, tcfg, k=k, jobs=args.jobs, split_seed=split_seed,
                             derive_n_t=derive)
    entries = {"command": "cv", "data": str(run.data_path), "k": k, "split_seed": split_seed,
               **config_entries("model", mcfg), **config_entries("train", tcfg),
               **run_metrics_entries(metrics)}
    if args.baseline:
        base = cross_validate(data, mcfg, tcfg, k=k, kind="logistic", split_seed=split_seed)
        entries.update(run_metrics_entries(base, prefix="baseline."))
    path = out_dir / run.output.get("metrics", "cv_metrics.txt")
    write_metrics(path, entries, curve_rows(metrics), CURVE_COLUMNS)
    for i, a in enumerate(metrics.fold_accuracies):
        print(f"fold {i}: accuracy {a:.4f}")
    print(f"mean accuracy {metrics.mean:.4f} +/- {metrics.ci95_halfwidth:.4f} (95% CI)")
    if args.baseline:
        print(f"logistic baseline {base.mean:.4f} +/- {base.ci95_halfwidth:.4f}")
    print(f"cpu seconds {time.process_time() - started:.1f}")
    print(f"metrics {path}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    print(f"gradcheck.tolerance={checks.GRADCHECK_TOL}", f"gradcheck.seed={args.seed}", sep="\n")
    if not args.tiny:
        print("gradcheck: only the tiny geometry is supported; running it")
    results = checks.run_gradchecks(args.seed)
    failed = False
    for name, err in results.items():
        ok = err < checks.GRADCHECK_TOL
        failed |= not ok
        print(f"{name:24s} {err:.3e} {'ok' if ok else 'FAIL'}")
    print(f"max {max(results.values()):.3e}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_paramcount(args) -> int:
    run = _run_config(args)
    mcfg = run.model_config()
    _echo([f"{k}={v}" for k, v in config_entries("model", mcfg).items()])
    width = max(len(n) for n, _ in layer_param_table(mcfg))
    for name, n in layer_param_table(mcfg):
        print(f"{name:<{width}}  {n:>8d}")
    print(f"{'total':<{width}}  {param_count(mcfg):>8d}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nlmda", description="EEG fatigue detection with NLMDA-Net.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic two-class epoch file")
    s.add_argument("--out", required=True, help="epoch file to write")
    s.add_argument("--n-per-class", type=int, default=1000, help="epochs per class (default 1000)")
    s.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    s.add_argument("--channels", type=int, default=17, help="channel count (default 17)")
    s.add_argument("--samples", type=int, default=200, help="samples per epoch (default 200)")
    s.add_argument("--fs", type=int, default=200, help="sampling rate in Hz (default 200)")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("preprocess", help="filter, decimate, epoch and label a raw recording")
    s.add_argument("--in", dest="input", required=True,
                   help="raw samples: little-endian float32, channel-major [C, n]")
    s.add_argument("--fs", type=float, required=True, help="raw sampling rate in Hz")
    s.add_argument("--perclos", required=True, help="text file of 'timestamp_s value' lines")
    s.add_argument("--out", required=True, help="epoch file to write")
    s.add_argument("--channel-names", default=None,
                   help="comma-separated labels (default: the 17 SEED-VIG electrodes)")
    s.add_argument("--target-fs", type=int, default=200, help="output sampling rate (default 200)")
    s.set_defaults(func=cmd_preprocess)

    def run_flags(s):
        s.add_argument("--config", default=None, help="run configuration file")
        s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value (repeatable)")
        s.add_argument("--data", default=None, help="epoch file (overrides data.path)")
        s.add_argument("--out-dir", default=None, help="output directory (overrides output.dir)")
        s.add_argument("--epochs", type=int, default=None, help="overrides train.epochs")
        s.add_argument("--seed", type=int, default=None, help="overrides train.seed")

    s = sub.add_parser("train", help="train on a 70:15:15 split; write checkpoint and metrics")
    run_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="accuracy of a checkpoint on an epoch file")
    s.add_argument("--checkpoint", required=True, help="checkpoint file")
    s.add_argument("--data", required=True, help="epoch file")
    s.add_argument("--metrics", default=None, help="optional metrics file to write")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("cv", help="stratified k-fold cross-validation")
    run_flags(s)
    s.add_argument("--k", type=int, default=None, help="fold count (default data.k or 5)")
    s.add_argument("--jobs", type=int, default=1, help="folds trained in parallel (default 1)")
    s.add_argument("--baseline", action="store_true", help="also cross-validate the logistic baseline")
    s.set_defaults(func=cmd_cv)

    s = sub.add_parser("gradcheck", help="finite-difference check of every primitive and the model")
    s.add_argument("--tiny", action="store_true", help="use the tiny model geometry (the only mode)")
    s.add_argument("--seed", type=int, default=0, help="seed for the random probes (default 0)")
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("paramcount", help="per-layer and total trainable parameters")
    s.add_argument("--config", default=None, help="run configuration file ([model] section used)")
    s.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    s.set_defaults(func=cmd_paramcount)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, EpochFileError, CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
