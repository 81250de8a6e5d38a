"""Command-line entry point: ``ttt4rec {ingest,train,eval,grid,synth}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import (
    ConfigError,
    GridSpec,
    RunConfig,
    dump_yaml,
    load_grid_spec,
    load_run_config,
)
from .data import DEFAULT_MAX_SEQ_LEN, PARSERS, ParseError, build_sequences, load_dataset, save_dataset, split_leave_one_out
from .evaluation import METRIC_COLUMNS, MetricsReport, evaluate
from .plots import plot_grid_heatmap, plot_training_curves
from .synthetic import planted_pattern_log, write_movielens
from .training import CSV_COLUMNS, TrainingError, train

log = logging.getLogger("ttt4rec")

GRID_COLUMNS = ("initializer_range", "mini_batch_size") + METRIC_COLUMNS + ("status", "error")


# -- commands ------------------------------------------------------------------

def cmd_ingest(fmt: str, input_path, output_path, min_interactions: int = 5, max_seq_len: int | None = None) -> dict:
    if fmt not in PARSERS:
        raise ValueError(f"unknown format {fmt!r}; choose from {sorted(PARSERS)}")
    if not Path(input_path).exists():
        raise FileNotFoundError(f"input file not found: {input_path}")
    interactions = PARSERS[fmt](input_path)
    dataset = build_sequences(interactions, min_interactions, max_seq_len or DEFAULT_MAX_SEQ_LEN[fmt])
    save_dataset(dataset, output_path)
    return dataset.summary()


def cmd_train(cfg: RunConfig, run_dir=None) -> Path:
    """Train per ``cfg``; the run directory ends up holding the resolved config,
    metrics CSV/JSONL, checkpoints, final report and figures."""
    if not cfg.dataset:
        raise ConfigError("no dataset given (config key 'dataset' or --dataset)")
    run_dir = Path(run_dir or cfg.out or "runs/default")
    dataset = load_dataset(cfg.dataset)
    model_config = cfg.model.resolve(dataset.vocab_size, dataset.max_seq_len)
    train_config = cfg.train.resolve(cfg.seed)
    split = split_leave_one_out(dataset, train_config.train_targets)

    run_dir.mkdir(parents=True, exist_ok=True)
    resolved = cfg.to_dict()
    resolved["out"] = str(run_dir)
    resolved["dataset"] = str(Path(cfg.dataset).resolve())
    resolved["model"]["max_seq_len"] = model_config.max_seq_len
    resolved["model"]["mlp_hidden"] = model_config.mlp_hidden
    dump_yaml(resolved, run_dir / "config.yaml")

    result = train(train_config, model_config, split, out_dir=run_dir)
    final = result.stats[-1]
    report = {"epoch": final.epoch, "train_loss": final.train_loss, "seed": cfg.seed,
              **(final.metrics.to_dict() if final.metrics else {})}
    (run_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    plot_training_curves([s.row() for s in result.stats], run_dir / "figures" / "curves.png")
    return run_dir


def cmd_eval(checkpoint, dataset_path, seed: int = 0, out_dir=None) -> MetricsReport:
    params, model_config, extra = load_checkpoint(checkpoint)
    dataset = load_dataset(dataset_path)
    if params.vocab_size != dataset.vocab_size:
        raise ValueError(
            f"vocab size mismatch: checkpoint has {params.vocab_size} items, dataset has {dataset.vocab_size}"
        )
    split = split_leave_one_out(dataset)
    report = evaluate(params, model_config, split, seed)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(
            json.dumps({**report.to_dict(), "seed": seed, "checkpoint": str(checkpoint)}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8")
        with (out / "eval.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            w.writerow([extra.get("epoch", ""), ""] + [repr(x) for x in report.row()] + [""])
    return report


def _cell_dir(root: Path, sigma: float, b: int) -> Path:
    return root / "cells" / f"sigma={sigma:g}_b={b}"


def _run_cell(base: RunConfig, sigma: float, b: int, cell_dir: str) -> dict:
    cfg = replace(base, model=replace(base.model, initializer_range=sigma, mini_batch_size=b))
    row = {"initializer_range": sigma, "mini_batch_size": b}
    try:
        cmd_train(cfg, cell_dir)
        report = json.loads((Path(cell_dir) / "report.json").read_text(encoding="utf-8"))
        row.update({k: report[k] for k in METRIC_COLUMNS}, status="ok", error="")
    except Exception as exc:  # a failed cell must not stop the grid
        log.error("grid cell sigma=%g b=%d failed: %s", sigma, b, exc)
        Path(cell_dir).mkdir(parents=True, exist_ok=True)
        (Path(cell_dir) / "error.txt").write_text(traceback.format_exc(), encoding="utf-8")
        row.update({k: "" for k in METRIC_COLUMNS}, status="failed", error=f"{type(exc).__name__}: {exc}")
    return row


def cmd_grid(spec: GridSpec, out_dir=None, jobs: int = 1) -> Path:
    """One train+eval per (initializer_range, mini_batch_size) cell.

    Cells with a ``report.json`` from an earlier run are reused, so an
    interrupted grid resumes where it stopped.
    """
    root = Path(out_dir or spec.out or "runs/grid")
    root.mkdir(parents=True, exist_ok=True)
    dump_yaml({"base": spec.base.to_dict(), "initializer_range": spec.initializer_range,
               "mini_batch_size": spec.mini_batch_size}, root / "grid.yaml")
    rows: dict[tuple[float, int], dict] = {}
    todo = []
    for sigma, b in spec.cells():
        report_path = _cell_dir(root, sigma, b) / "report.json"
        if report_path.exists():
            report = json.loads(report_path.read_text(encoding="utf-8"))
            rows[(sigma, b)] = {"initializer_range": sigma, "mini_batch_size": b,
                                **{k: report[k] for k in METRIC_COLUMNS}, "status": "ok", "error": ""}
            log.info("cell sigma=%g b=%d already complete, skipping", sigma, b)
        else:
            todo.append((sigma, b))
    args = [(spec.base, s, b, str(_cell_dir(root, s, b))) for s, b in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            done = list(pool.map(_run_cell, *zip(*args)))
    else:
        done = [_run_cell(*a) for a in args]
    for (sigma, b), row in zip(todo, done):
        rows[(sigma, b)] = row

    ordered = [rows[c] for c in spec.cells()]
    path = root / "grid.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=GRID_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in ordered:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    for metric in ("ndcg5", "hr10"):
        plot_grid_heatmap(ordered, metric, root / "figures" / f"grid_{metric}.png")
    return path


# -- argument parsing ------------------------------------------------------------

def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--dataset", help="dataset cache produced by `ingest`")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float, help="outer (Adam) learning rate")
    p.add_argument("--inner-lr", type=float, help="TTT inner-loop step size")
    p.add_argument("--mini-batch-size", type=int)
    p.add_argument("--initializer-range", type=float)
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--max-seq-len", type=int)
    p.add_argument("--out", help="output directory")


def resolve_run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    for attr, target in (("dataset", cfg), ("seed", cfg), ("out", cfg)):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(target, attr, value)
    for flag, field_name in (("epochs", "epochs"), ("lr", "lr")):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg.train, field_name, value)
    for flag in ("inner_lr", "mini_batch_size", "initializer_range", "embed_dim", "max_seq_len"):
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg.model, flag, value)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ttt4rec", description="TTT-Linear sequential recommender")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse a ratings file into a dataset cache")
    p.add_argument("input")
    p.add_argument("--format", choices=sorted(PARSERS), required=True)
    p.add_argument("--out", required=True, help="cache file to write")
    p.add_argument("--min-interactions", type=int, default=5)
    p.add_argument("--max-seq-len", type=int, help="default: 50 (amazon), 200 (movielens)")

    p = sub.add_parser("train", help="train a model and write a run directory")
    _add_overrides(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint (1:99 sampled ranking)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for eval.json / eval.csv")

    p = sub.add_parser("grid", help="initializer_range x mini_batch_size grid search")
    p.add_argument("--config", required=True, help="YAML grid spec")
    p.add_argument("--out")
    p.add_argument("--jobs", type=int, default=1, help="cells run in parallel processes")

    p = sub.add_parser("synth", help="write a planted-pattern log in MovieLens format")
    p.add_argument("--out", required=True)
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--min-len", type=int, default=5)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "ingest":
            summary = cmd_ingest(args.format, args.input, args.out, args.min_interactions, args.max_seq_len)
            print(f"users {summary['users']}  items {summary['items']}  "
                  f"interactions {summary['interactions']}  density {summary['density']:.6f}")
        elif args.command == "train":
            run_dir = cmd_train(resolve_run_config(args))
            print(run_dir)
        elif args.command == "eval":
            r = cmd_eval(args.checkpoint, args.dataset, args.seed, args.out)
            print(f"NDCG@5 {r.ndcg5:.4f}  NDCG@10 {r.ndcg10:.4f}  HR@5 {r.hr5:.4f}  HR@10 {r.hr10:.4f}  (n={r.count})")
        elif args.command == "grid":
            spec = load_grid_spec(args.config)
            path = cmd_grid(spec, args.out, args.jobs)
            print(path)
            with path.open(encoding="utf-8") as fh:
                failed = [r for r in csv.DictReader(fh) if r["status"] != "ok"]
            if failed:
                log.error("%d grid cell(s) failed", len(failed))
                return 1
        elif args.command == "synth":
            write_movielens(planted_pattern_log(args.items, args.users, args.min_len, args.max_len, args.seed), args.out)
            print(args.out)
    except (ConfigError, ParseError, CheckpointError, TrainingError, ValueError, OSError, KeyError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
