"""Experiment runner: generate data, train, evaluate, diagnose, score masks.

Every command is deterministic given config + seed; the only
non-deterministic output byte is an optional leading timestamp comment in
CSV files, disabled with --no-timestamp. Exit codes: 0 success, 2 config
error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .autodiff import Graph, Tensor
from .config import ConfigError, ExperimentConfig, load_config
from .diagnostics import concentration_experiment, consecutive_trace, pairwise_matrix
from .metrics import (MaskError, accuracy, connected_components,
                      instances_from_class_map, panoptic_quality, rolling_mean)
from .model import ParamStore, build_encoder, forward_task
from .tasks import (KIND_CLASSIFICATION, TaskDataset, _task_seed,
                    default_suite, gen_classification_task, gen_segmentation_task,
                    load_dataset, load_mask, save_dataset)
from .tensorio import FileFormatError
from .trainer import (SamplerConfig, TrainConfig, apply_checkpoint, build_decoders,
                      init_adam_states, load_checkpoint, load_trace, save_checkpoint,
                      save_trace, train)


class DataError(RuntimeError):
    pass


EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _csv_writer(path: Path, header: list[str], rows, timestamp: bool):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if timestamp:
            fh.write(f"# generated: {datetime.now(timezone.utc).isoformat()}\n")
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow(row)


def _fmt(v: float) -> str:
    return repr(float(v))


# ---------------------------------------------------------------------------
# suite construction

def build_suite(cfg: ExperimentConfig) -> list[TaskDataset]:
    suite = cfg.suite
    if "tasks" not in suite:
        return default_suite(cfg.seed, n_train=int(suite.get("n_train", 128)),
                             n_eval=int(suite.get("n_eval", 64)))
    tasks = []
    for i, entry in enumerate(suite["tasks"]):
        seed = _task_seed(cfg.seed, i)
        n_train = int(entry.get("n_train", 128))
        n_eval = int(entry.get("n_eval", 64))
        if entry["kind"] == KIND_CLASSIFICATION:
            tasks.append(gen_classification_task(
                int(entry["num_classes"]), tuple(entry.get("input_shape", (3, 32, 32))),
                n_train, n_eval, float(entry.get("difficulty", 0.35)), seed,
                task_id=i, name=entry.get("name")))
        else:
            tasks.append(gen_segmentation_task(
                entry["kind"], int(entry.get("image_size", 32)),
                int(entry.get("max_instances", 3)), int(entry.get("num_classes", 1)),
                n_train, n_eval, seed, task_id=i, name=entry.get("name")))
    return tasks


def _load_manifest_tasks(cfg: ExperimentConfig) -> list[TaskDataset]:
    if not cfg.manifest_path.exists():
        raise DataError(f"no dataset manifest at {cfg.manifest_path}; "
                        f"run 'mtlab generate' first")
    with open(cfg.manifest_path) as fh:
        manifest = json.load(fh)
    tasks = []
    for entry in manifest["tasks"]:
        path = cfg.data_dir / entry["path"]
        if not path.exists():
            raise DataError(f"dataset file {path} listed in manifest is missing")
        tasks.append(load_dataset(path))
    shapes = {ds.spec.input_shape for ds in tasks}
    if len(shapes) > 1:
        raise DataError(f"tasks have mixed input shapes {sorted(shapes)}; "
                        f"one shared encoder cannot serve them")
    return tasks


def _build_models(cfg: ExperimentConfig, tasks: list[TaskDataset]):
    store = ParamStore()
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(0,)))
    encoder = build_encoder(cfg.encoder, tasks[0].spec.input_shape, store, rng)
    decoders = build_decoders(tasks, encoder, store, rng)
    states = init_adam_states(store, **cfg.adam)
    return store, encoder, decoders, states


def _sampler(cfg: ExperimentConfig, k: int) -> SamplerConfig:
    if cfg.alpha == "uniform":
        return SamplerConfig.uniform(k)
    if len(cfg.alpha) != k:
        raise ConfigError(f"alpha has {len(cfg.alpha)} entries but the suite "
                          f"defines {k} tasks")
    return SamplerConfig(np.asarray(cfg.alpha, dtype=np.float64))


# ---------------------------------------------------------------------------
# evaluation

def evaluate_task(encoder, decoder, ds: TaskDataset) -> tuple[str, float]:
    """Eval-split metric for one task: accuracy or mean panoptic quality."""
    idx = ds.indices("eval")
    x = Tensor(ds.inputs[idx])
    pred = forward_task(encoder, decoder, x, Graph()).data
    if ds.spec.kind == KIND_CLASSIFICATION:
        return "accuracy", accuracy(pred.argmax(axis=1), ds.targets[idx])
    pqs = []
    for row, i in enumerate(idx):
        if decoder.nonlinearity == "sigmoid":
            inst = connected_components(pred[row, 0] >= 0.5)
            pqs.append(panoptic_quality(inst, ds.gt_mask(i)).pq)
        else:
            inst = instances_from_class_map(pred[row].argmax(axis=0))
            pqs.append(panoptic_quality(inst, ds.gt_mask(i), class_aware=True).pq)
    return "PQ", float(np.mean(pqs))


# ---------------------------------------------------------------------------
# commands

def cmd_generate(cfg: ExperimentConfig, timestamp: bool) -> int:
    tasks = build_suite(cfg)
    cfg.data_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in tasks:
        fname = f"task_{ds.spec.task_id:02d}_{ds.spec.name}.mtld"
        save_dataset(cfg.data_dir / fname, ds)
        entries.append({
            "path": fname,
            "task_id": ds.spec.task_id,
            "name": ds.spec.name,
            "kind": ds.spec.kind,
            "num_classes": ds.spec.num_classes,
            "input_shape": list(ds.spec.input_shape),
            "seed": ds.seed,
            "n_train": int(len(ds.indices("train"))),
            "n_eval": int(len(ds.indices("eval"))),
        })
    manifest = {"seed": cfg.seed, "tasks": entries}
    with open(cfg.manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(tasks)} dataset files and manifest to {cfg.data_dir}")
    return EXIT_OK


def cmd_train(cfg: ExperimentConfig, timestamp: bool, resume: bool) -> int:
    tasks = _load_manifest_tasks(cfg)
    sampler = _sampler(cfg, len(tasks))
    store, encoder, decoders, states = _build_models(cfg, tasks)

    start_t = 0
    latest = cfg.out_dir / "checkpoint_latest.mtlc"
    if resume:
        if not latest.exists():
            raise DataError(f"cannot resume: {latest} does not exist")
        ck = load_checkpoint(latest)
        if ck.seed != cfg.seed:
            raise DataError(f"checkpoint seed {ck.seed} does not match config "
                            f"seed {cfg.seed}")
        apply_checkpoint(ck, store, states)
        start_t = ck.t

    tcfg = TrainConfig(iterations=cfg.iterations, batch_size=cfg.batch_size,
                       seed=cfg.seed, checkpoint_every=cfg.checkpoint_every,
                       diagnostics=cfg.diagnostics)
    log = train(tasks, encoder, decoders, store, states, sampler, tcfg,
                start_t=start_t, checkpoint_path=latest)

    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    rows = [(r.t, r.task, _fmt(r.loss)) for r in log.records
            if r.t % cfg.log_every == 0]
    _csv_writer(cfg.out_dir / "train_log.csv", ["t", "task_id", "loss"], rows, timestamp)
    save_checkpoint(cfg.out_dir / "checkpoint_final.mtlc", store, states,
                    cfg.seed, cfg.iterations)
    if log.trace is not None:
        save_trace(cfg.out_dir / "grad_trace.mtlg", log.trace)
    with open(cfg.out_dir / "config_used.json", "w") as fh:
        json.dump(cfg.raw, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"trained {len(log.records)} iterations; outputs in {cfg.out_dir}")
    return EXIT_OK


def cmd_eval(cfg: ExperimentConfig, timestamp: bool, checkpoint: Path | None) -> int:
    tasks = _load_manifest_tasks(cfg)
    store, encoder, decoders, states = _build_models(cfg, tasks)
    ck_path = checkpoint or cfg.out_dir / "checkpoint_final.mtlc"
    if not ck_path.exists():
        raise DataError(f"checkpoint {ck_path} does not exist")
    try:
        apply_checkpoint(load_checkpoint(ck_path), store, states)
    except ValueError as exc:
        raise DataError(f"checkpoint does not match the configured models: {exc}")

    rows = []
    for ds, dec in zip(tasks, decoders):
        metric, value = evaluate_task(encoder, dec, ds)
        rows.append((ds.spec.task_id, ds.spec.name, metric, _fmt(value)))
        print(f"task {ds.spec.task_id:2d} {ds.spec.name:24s} {metric}={value:.4f}")
    _csv_writer(cfg.out_dir / "results.csv", ["task_id", "name", "metric", "value"],
                rows, timestamp)
    return EXIT_OK


def _read_train_log(path: Path):
    if not path.exists():
        raise DataError(f"train log {path} does not exist; run 'mtlab train' first")
    ts, tasks, losses = [], [], []
    with open(path) as fh:
        for row in csv.reader(line for line in fh if not line.startswith("#")):
            if row and row[0] == "t":
                continue
            ts.append(int(row[0]))
            tasks.append(int(row[1]))
            losses.append(float(row[2]))
    return np.array(ts), np.array(tasks), np.array(losses)


def cmd_diagnose(cfg: ExperimentConfig, timestamp: bool, window: int) -> int:
    trace_path = cfg.out_dir / "grad_trace.mtlg"
    if not trace_path.exists():
        raise DataError(
            f"no gradient trace at {trace_path}: the run had diagnostics "
            f"disabled (config diagnostics='off')")
    trace = load_trace(trace_path)
    ts, task_ids, losses = _read_train_log(cfg.out_dir / "train_log.csv")

    out = cfg.out_dir / "diagnostics"
    smoothed = rolling_mean(losses, window)
    _csv_writer(out / "loss_smoothed.csv", ["t", "task_id", "loss", "loss_smoothed"],
                [(int(t), int(i), _fmt(l), _fmt(s))
                 for t, i, l, s in zip(ts, task_ids, losses, smoothed)],
                timestamp)

    pairs, skipped = consecutive_trace(trace)
    _csv_writer(out / "consecutive_cosine.csv",
                ["t", "task_prev", "task_curr", "cos_similarity", "cos_distance"],
                [(p.t, p.task_prev, p.task_curr, _fmt(p.similarity), _fmt(p.distance))
                 for p in pairs],
                timestamp)

    matrix = pairwise_matrix(trace, window=window)
    k = trace.num_tasks
    rows = []
    for i in range(k):
        for j in range(k):
            absent = matrix.counts[i, j] == 0
            rows.append((i, j, "" if absent else _fmt(matrix.values[i, j]),
                         int(matrix.counts[i, j])))
    _csv_writer(out / "pairwise_matrix.csv",
                ["task_prev", "task_curr", "mean_cos_distance", "samples"],
                rows, timestamp)
    print(f"diagnostics written to {out} ({len(pairs)} consecutive pairs, "
          f"{len(skipped)} skipped)")
    return EXIT_OK


def cmd_pq(pred_path: Path, gt_path: Path, class_aware: bool,
           out: Path | None, timestamp: bool) -> int:
    pred = load_mask(pred_path)
    gt = load_mask(gt_path)
    rep = panoptic_quality(pred, gt, class_aware=class_aware)
    print(f"PQ {rep.pq!r}")
    print(f"SQ {rep.sq!r}")
    print(f"RQ {rep.rq!r}")
    print(f"TP {len(rep.matches)}")
    print(f"FP {len(rep.fp)}")
    print(f"FN {len(rep.fn)}")
    if rep.per_class is not None:
        for cls, (sq, rq, pq) in sorted(rep.per_class.items()):
            print(f"class {cls}: PQ {pq!r} SQ {sq!r} RQ {rq!r}")
    if out is not None:
        _csv_writer(out / "pq_report.csv",
                    ["pq", "sq", "rq", "tp", "fp", "fn"],
                    [(_fmt(rep.pq), _fmt(rep.sq), _fmt(rep.rq),
                      len(rep.matches), len(rep.fp), len(rep.fn))],
                    timestamp)
    return EXIT_OK


def cmd_concentration(cfg: ExperimentConfig, timestamp: bool, dims: list[int],
                      pairs: int) -> int:
    # SFC64: the experiment draws billions of normals at large dims
    rng = np.random.Generator(np.random.SFC64(cfg.seed))
    stats = concentration_experiment(dims, pairs, rng)
    rows = [(s.dim, _fmt(s.mean), _fmt(s.std), _fmt(s.p05), _fmt(s.p95))
            for s in stats]
    _csv_writer(cfg.out_dir / "concentration.csv",
                ["dim", "mean", "std", "p05", "p95"], rows, timestamp)
    for s in stats:
        print(f"dim {s.dim:6d}: mean {s.mean:+.5f} std {s.std:.5f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing and dispatch

def _add_common(sp):
    sp.add_argument("--config", type=Path, default=None, help="JSON experiment config")
    sp.add_argument("--seed", type=int, default=None, help="override the config seed")
    sp.add_argument("--out", type=Path, default=None, help="override the output dir")
    sp.add_argument("--no-timestamp", action="store_true",
                    help="omit the timestamp comment from CSV outputs")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mtlab",
                                description="desk-scale multi-task learning lab")
    sub = p.add_subparsers(dest="command", required=True)

    for name, help_ in [("generate", "generate the synthetic task suite"),
                        ("train", "run the sampled-task training loop"),
                        ("eval", "score a checkpoint on every task's eval split"),
                        ("diagnose", "emit loss/cosine diagnostics CSVs"),
                        ("concentration", "cosine concentration vs dimensionality")]:
        sp = sub.add_parser(name, help=help_)
        _add_common(sp)
        if name == "train":
            sp.add_argument("--resume", action="store_true",
                            help="continue from checkpoint_latest.mtlc")
        if name == "eval":
            sp.add_argument("--checkpoint", type=Path, default=None)
        if name == "diagnose":
            sp.add_argument("--window", type=int, default=10)
        if name == "concentration":
            sp.add_argument("--dims", default="4,16,100,1024,10000")
            sp.add_argument("--pairs", type=int, default=20_000)

    sp = sub.add_parser("pq", help="panoptic quality of one mask file vs another")
    sp.add_argument("pred", type=Path)
    sp.add_argument("gt", type=Path)
    sp.add_argument("--class-aware", action="store_true")
    sp.add_argument("--out", type=Path, default=None)
    sp.add_argument("--no-timestamp", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    timestamp = not args.no_timestamp
    try:
        if args.command == "pq":
            return cmd_pq(args.pred, args.gt, args.class_aware, args.out, timestamp)
        cfg = load_config(args.config, seed_override=args.seed, out_override=args.out)
        if args.command == "generate":
            return cmd_generate(cfg, timestamp)
        if args.command == "train":
            return cmd_train(cfg, timestamp, resume=args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, timestamp, args.checkpoint)
        if args.command == "diagnose":
            return cmd_diagnose(cfg, timestamp, args.window)
        if args.command == "concentration":
            dims = [int(d) for d in str(args.dims).split(",") if d]
            if not dims:
                raise ConfigError("--dims must list at least one dimension")
            return cmd_concentration(cfg, timestamp, dims, args.pairs)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileFormatError, MaskError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # anything else is a runtime failure
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
