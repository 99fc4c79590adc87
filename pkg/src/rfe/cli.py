"""Command-line experiment driver.

Exit codes: 0 ok, 2 configuration error, 3 training divergence, 4 I/O or
file-format error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .config import ExperimentConfig
from .engine import LossRecord
from .errors import ConfigError, DivergenceError, MissingStateError, ParseError
from .exemplars import RESERVOIR_ALL_TASKS, SUBSET_PREV_TASK
from .experiment import (ExperimentResult, build_model, build_stream, pca_groups, record_row, run_experiment,
                         settings_of)
from .inference import evaluate
from .metrics import AccuracyMatrix, RmseMatrix
from .model import ContinualModel
from .tensor_core import Tensor, weights

logger = logging.getLogger("rfe")

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

# what each strategy keeps at task t: previous extractor, subset of task t-1, buffer over tasks 1..t
STORAGE_MATRIX = {
    "rfe": (True, False, False),
    "rfe_p": (True, True, False),
    "rfe_b": (True, False, True),
    "finetune": (False, False, False),
    "oracle": (False, False, False),
}


def threads_from_env() -> int:
    raw = os.environ.get("RFE_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RFE_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"RFE_THREADS must be a positive integer, got {raw!r}")
    return n


def load_config(args) -> ExperimentConfig:
    text = Path(args.config).read_text() if args.config else ""
    return ExperimentConfig.from_text(text, args.override or (), args.seed)


def out_dir(args, cfg: ExperimentConfig) -> Path:
    path = Path(args.out) if args.out else Path(cfg["experiment"]["out"])
    path.mkdir(parents=True, exist_ok=True)
    return path


# ---------------------------------------------------------------- writers

def write_records(path: Path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["setting", "eval_task", "sample_index", "true_label", "predicted_label"])
        for r in records:
            w.writerow([r.setting, r.task, r.sample_index, r.true_label, r.predicted_label])


def write_cil_probs(path: Path, cil_probs: dict, n_classes: int) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["eval_task", "sample_index"] + [f"p{c}" for c in range(n_classes)])
        for t in sorted(cil_probs):
            for i, row in enumerate(cil_probs[t]):
                w.writerow([t, i] + [metrics.fmt(v) for v in row])


def write_checkpoint(path: Path, model: ContinualModel) -> None:
    weights.save(path, model.state_dict())


def manifest(cfg: ExperimentConfig, model: ContinualModel, stream, extra=None) -> dict:
    out = {
        "config": cfg.canonical(),
        "config_sha256": cfg.digest(),
        "seed": cfg.seed,
        "strategy": cfg.kind,
        "n_tasks": stream.n_tasks,
        "input_shape": list(stream.input_shape),
        "task_classes": [list(c) for c in stream.task_classes()],
        "parameter_counts": model.parameter_counts(),
    }
    out.update(extra or {})
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_result(result: ExperimentResult, out: Path) -> None:
    cfg = result.config
    metrics.write_accuracy_csv(out / "accuracy.csv", result.accuracy.values())
    write_records(out / "records.csv", result.records)
    if result.cil_probs:
        write_cil_probs(out / "cil_probabilities.csv", result.cil_probs, result.stream.n_classes)
    if result.rmse:
        metrics.write_rmse_csv(out / "rmse.csv", result.rmse)
    if result.pca is not None:
        metrics.write_pca_csv(out / "pca.csv", result.pca)
    if result.states:
        snap = out / "snapshots"
        snap.mkdir(exist_ok=True)
        for t, state in sorted(result.states.items()):
            weights.save(snap / f"f_task{t}.rfew", {k: p.data for k, p in state.extractor.named_parameters("f.")})
    write_checkpoint(out / "checkpoint.rfew", result.model)
    summary = {s: metrics.fmt(result.average(s)) for s in result.accuracy}
    write_json(out / "manifest.json", manifest(cfg, result.model, result.stream, {"average_accuracy": summary}))


# ---------------------------------------------------------------- loading

def load_model(cfg: ExperimentConfig, stream, checkpoint) -> ContinualModel:
    state = weights.load(checkpoint)
    try:
        return ContinualModel.from_state(cfg.model_config(stream.input_shape), stream.task_classes(), state)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"checkpoint does not match the configured model and stream: {exc}") from exc


def load_snapshots(cfg: ExperimentConfig, stream, directory: Path, tasks) -> dict:
    """Rebuild f_t for each requested task from ``f_task{t}.rfew`` files."""
    out = {}
    for t in tasks:
        path = directory / f"f_task{t}.rfew"
        if not path.exists():
            raise MissingStateError(f"no extractor snapshot {path}")
        fresh = build_model(cfg, stream).extractor
        state = weights.load(path)
        params = dict(fresh.named_parameters("f."))
        if set(params) != set(state):
            raise ConfigError(f"snapshot {path} does not match the configured extractor")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ConfigError(f"snapshot {path}: parameter {name} has shape {state[name].shape}")
            p.data = state[name].copy()
        fresh.freeze()
        out[t] = fresh
    return out


# ---------------------------------------------------------------- commands

def cmd_run(args) -> int:
    cfg = load_config(args)
    out = out_dir(args, cfg)
    with open(out / "train_log.jsonl", "w") as log:
        def on_record(rec: LossRecord):
            log.write(json.dumps({"task": rec.task, "stage": rec.stage, "epoch": rec.epoch,
                                  "loss": metrics.fmt(rec.loss), "val_loss": metrics.fmt(rec.val_loss),
                                  "lr": metrics.fmt(rec.lr)}) + "\n")

        result = run_experiment(cfg, on_record=on_record, workers=threads_from_env())
    write_result(result, out)
    for s in result.accuracy:
        print(f"{s} average accuracy after task {result.stream.n_tasks}: {result.average(s):.4f}")
    print(f"artifacts written to {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    stream = build_stream(cfg)
    model = load_model(cfg, stream, args.checkpoint)
    out = out_dir(args, cfg)
    settings = tuple(args.setting) if args.setting else settings_of(cfg)
    n = stream.n_tasks
    rectify = cfg["evaluation"]["rectify"] and not cfg.oracle
    a, records, cil_probs = evaluate(model, stream, settings, rectify=rectify, workers=threads_from_env())
    acc = {s: AccuracyMatrix(n, setting=s) for s in settings}
    record_row(acc, a, n)
    metrics.write_accuracy_csv(out / "accuracy.csv", acc.values())
    write_records(out / "records.csv", records)
    if cil_probs:
        write_cil_probs(out / "cil_probabilities.csv", cil_probs, stream.n_classes)
    if args.snapshots:
        originals = load_snapshots(cfg, stream, Path(args.snapshots), range(1, n + 1))
        mats = []
        for rect in (False, True):
            m = RmseMatrix(n, representation="rectified" if rect else "drifted")
            for j in range(1, n + 1):
                x = stream[j].x_test
                ref = originals[j](Tensor(x)).data
                m[n, j] = metrics.rmse(metrics.representation(model, x, j, rect), ref)
            mats.append(m)
        metrics.write_rmse_csv(out / "rmse.csv", mats)
    for s in settings:
        print(f"{s} average accuracy: {metrics.average_accuracy(acc[s], n):.4f}")
    return EXIT_OK


def cmd_export_pca(args) -> int:
    cfg = load_config(args)
    stream = build_stream(cfg)
    model = load_model(cfg, stream, args.checkpoint)
    task = args.task if args.task is not None else cfg["evaluation"]["pca_task"]
    if not 1 <= task <= stream.n_tasks:
        raise ConfigError(f"--task must lie in 1..{stream.n_tasks}")
    original = load_snapshots(cfg, stream, Path(args.snapshots), [task])[task]
    result = metrics.pca_export(pca_groups(model, original, stream[task].x_test, task), k=2, seed=cfg.seed)
    out = out_dir(args, cfg)
    metrics.write_pca_csv(out / "pca.csv", result)
    ratios = ", ".join(f"{r:.4f}" for r in result.explained_ratio)
    print(f"explained variance ratios: {ratios}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    cfg = load_config(args)
    st = cfg["stream"]
    if st["source"] == "blob":
        shape = (st["dim"],)
    else:
        from .data import read_labeled_file
        shape = read_labeled_file(st["path"])[3]
    model = ContinualModel(cfg.model_config(shape), seed=cfg.seed)
    counts = model.parameter_counts()
    keeps = STORAGE_MATRIX[cfg.kind]
    store = cfg.strategy_config().new_store()
    policy = None if store is None else store.policy
    expected = {"rfe_p": SUBSET_PREV_TASK, "rfe_b": RESERVOIR_ALL_TASKS}.get(cfg.kind)
    report = {
        "config_sha256": cfg.digest(),
        "strategy": cfg.kind,
        "keeps_previous_extractor": keeps[0],
        "keeps_previous_task_subset": keeps[1],
        "keeps_buffer_all_tasks": keeps[2],
        "store_policy": policy,
        "storage_conforms": policy == expected,
        "parameter_counts": counts,
    }
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["storage_conforms"] else EXIT_CONFIG


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfe", description="Retrospective feature estimation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file (INI sections)")
        p.add_argument("--seed", type=int, help="overrides experiment.seed")
        p.add_argument("--out", help="output directory (overrides experiment.out)")
        p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE",
                       help="override one config value; repeatable")

    p = sub.add_parser("run", help="train over the stream and write metrics and checkpoint")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="re-evaluate a checkpoint without training")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--setting", action="append", choices=("TIL", "CIL"))
    p.add_argument("--snapshots", help="directory of f_task<t>.rfew files; enables the RMSE row")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-pca", help="PCA of original, drifted and rectified features")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--snapshots", required=True)
    p.add_argument("--task", type=int)
    p.set_defaults(func=cmd_export_pca)

    p = sub.add_parser("inspect", help="print parameter counts and storage conformance")
    common(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, ParseError, MissingStateError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except np.linalg.LinAlgError as exc:  # pragma: no cover
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
