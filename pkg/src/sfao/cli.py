"""Command-line entry point: run / sweep / report.

Configuration is a single JSON document; any field can be overridden
from the command line with --set dotted.path=json-value. Exit codes:
0 ok, 1 config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bench
from .bench import RunConfig, StreamConfig, load_idx, make_stream, run_continual
from .buffer import memory_mb
from .errors import BadConfig, SfaoError
from .mlp import save_checkpoint

FLOAT_FMT = "%.17g"

STREAM_KEYS = {"kind", "tasks", "classes_per_task", "n_train", "n_test",
               "input_dim", "separation", "scale", "seed"}
RUN_KEYS = {"method", "lambda_proj", "lambda_accept", "k", "capacity",
            "tau_add", "tau_drop", "lr", "momentum", "weight_decay",
            "epochs", "batch_size", "hidden", "admit_every", "global_buffer"}
TOP_KEYS = {"dataset", "stream", "seeds", "out_dir", "workers",
            "sweep_thresholds"} | RUN_KEYS


def _fmt(x: float) -> str:
    return FLOAT_FMT % x


def load_config(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise BadConfig(f"config file not found: {path}")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise BadConfig(f"config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise BadConfig("config root must be a JSON object")
    unknown = set(cfg) - TOP_KEYS
    if unknown:
        raise BadConfig(f"unknown config keys: {sorted(unknown)}")
    if "stream" in cfg:
        bad = set(cfg["stream"]) - STREAM_KEYS
        if bad:
            raise BadConfig(f"unknown stream keys: {sorted(bad)}")
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise BadConfig(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise BadConfig(f"override path {key!r} crosses a non-object")
        node[parts[-1]] = value
    return cfg


def build_stream_config(cfg: dict) -> StreamConfig:
    sc = StreamConfig(**cfg.get("stream", {}))
    dataset = cfg.get("dataset", "synthetic")
    if dataset != "synthetic":
        if not isinstance(dataset, dict):
            raise BadConfig("dataset must be 'synthetic' or an object of IDX paths")
        needed = {"train_images", "train_labels", "test_images", "test_labels"}
        if set(dataset) != needed:
            raise BadConfig(f"dataset object must have keys {sorted(needed)}")
        sc.data = (load_idx(dataset["train_images"]),
                   load_idx(dataset["train_labels"]),
                   load_idx(dataset["test_images"]),
                   load_idx(dataset["test_labels"]))
    return sc


def build_run_config(cfg: dict) -> RunConfig:
    return RunConfig(**{k: cfg[k] for k in RUN_KEYS if k in cfg})


def out_root(cfg: dict) -> Path:
    env = os.environ.get("SFAO_OUT")
    return Path(env) if env else Path(cfg.get("out_dir", "out"))


def write_matrix_csv(matrix: np.ndarray, path: Path) -> None:
    lines = [",".join(_fmt(v) for v in row) for row in matrix]
    path.write_text("\n".join(lines) + "\n")


def read_matrix_csv(path: Path) -> np.ndarray:
    rows = [[float(v) for v in line.split(",")]
            for line in path.read_text().strip().splitlines()]
    return np.array(rows, dtype=np.float64)


def write_decisions_csv(decisions, path: Path) -> None:
    lines = ["step,layer,score,decision,u_norm,buffer_size"]
    for step, layer, score, decision, u_norm, bufsize in decisions:
        lines.append(f"{step},{layer},{_fmt(score)},{decision},"
                     f"{_fmt(u_norm)},{bufsize}")
    path.write_text("\n".join(lines) + "\n")


def _run_one_seed(stream_cfg: StreamConfig, run_cfg: RunConfig, seed: int,
                  run_dir: Path) -> dict:
    stream = make_stream(stream_cfg)
    report = run_continual(stream, run_cfg, seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(report.matrix, run_dir / "matrix.csv")
    write_decisions_csv(report.decisions, run_dir / "decisions.csv")
    (run_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2) + "\n")
    save_checkpoint(report.final_params, run_dir / "params.ckpt")
    for li, buf in enumerate(report.buffers):
        if len(buf):
            buf.save(run_dir / f"buffer-{li}.bin")
    return report.to_dict()


def cmd_run(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    if args.seed is not None:
        cfg["seeds"] = [args.seed]
    seeds = cfg.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds:
        raise BadConfig("seeds must be a non-empty list")
    stream_cfg = build_stream_config(cfg)
    run_cfg = build_run_config(cfg)
    root = out_root(cfg)
    workers = int(cfg.get("workers", 1))

    jobs = [(stream_cfg, run_cfg, int(s), root / f"run-{s}") for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one_seed, *zip(*jobs)))
    else:
        results = [_run_one_seed(*job) for job in jobs]

    finals = np.array([[row[-1] for row in r["matrix"]] for r in results])
    aggregate = {
        "seeds": [int(s) for s in seeds],
        "per_task_final_accuracy_mean": finals.mean(axis=0).tolist(),
        "per_task_final_accuracy_std": finals.std(axis=0).tolist(),
        "avg_forgetting_mean": float(np.mean([r["avg_forgetting"] for r in results])),
        "avg_forgetting_std": float(np.std([r["avg_forgetting"] for r in results])),
        "psm_mean": float(np.mean([r["psm"] for r in results])),
        "psm_std": float(np.std([r["psm"] for r in results])),
        "bwt_mean": float(np.mean([r["bwt"] for r in results])),
        "bwt_std": float(np.std([r["bwt"] for r in results])),
    }
    root.mkdir(parents=True, exist_ok=True)
    (root / "aggregate.json").write_text(json.dumps(aggregate, indent=2) + "\n")
    return 0


def _run_sweep_point(stream_cfg, run_cfg, seeds, point_dir):
    reports = []
    for s in seeds:
        reports.append(_run_one_seed(stream_cfg, run_cfg, int(s),
                                     point_dir / f"run-{s}"))
    return reports


def cmd_sweep(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    grid = cfg.get("sweep_thresholds")
    if not grid:
        raise BadConfig("sweep requires a non-empty sweep_thresholds grid")
    seeds = cfg.get("seeds", [0])
    stream_cfg = build_stream_config(cfg)
    root = out_root(cfg)
    root.mkdir(parents=True, exist_ok=True)

    rows = []
    for point in grid:
        if not (isinstance(point, list) and len(point) == 2):
            raise BadConfig(f"sweep point {point!r} must be [proj, accept]")
        proj, accept = float(point[0]), float(point[1])
        run_cfg = build_run_config(cfg)
        run_cfg.lambda_proj = proj
        run_cfg.lambda_accept = accept
        tag = f"th_{proj:g}_{accept:g}"
        reports = _run_sweep_point(stream_cfg, run_cfg, seeds, root / tag)
        finals = np.array([[row[-1] for row in r["matrix"]] for r in reports])
        rows.append((
            f"{proj:g}:{accept:g}",
            float(finals.mean()),
            float(np.mean([r["avg_forgetting"] for r in reports])),
            float(np.mean([r["psm"] for r in reports])),
            float(np.mean([r["memory_mb"] for r in reports])),
        ))

    lines = ["threshold,avg_accuracy,avg_forgetting,psm,memory_mb"]
    for tag, acc, forg, p, mem in rows:
        lines.append(f"{tag},{_fmt(acc)},{_fmt(forg)},{_fmt(p)},{_fmt(mem)}")
    (root / "sweep.csv").write_text("\n".join(lines) + "\n")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    matrices = sorted(run_dir.rglob("matrix.csv"))
    if not matrices:
        print(f"no matrix.csv found under {run_dir}", file=sys.stderr)
        return 1
    header = f"{'run':<28} {'avg_forgetting':>14} {'bwt':>10} {'psm':>10}"
    print(header)
    curve_lines = ["run,after_task,avg_forgetting"]
    for mpath in matrices:
        m = read_matrix_csv(mpath)
        T = m.shape[0]
        tri = m[np.triu_indices(T)]
        if ((tri < 0) | (tri > 1)).any():
            print(f"{mpath}: accuracy outside [0, 1]", file=sys.stderr)
            return 2
        _, avg_f = bench.forgetting(m)
        name = str(mpath.parent.relative_to(run_dir)) or "."
        print(f"{name:<28} {avg_f:>14.6f} {bench.bwt(m):>10.6f} "
              f"{bench.psm(m):>10.6f}")
        # forgetting averaged across previously seen tasks after each task
        for t in range(1, T):
            drops = [float(np.nanmax(m[i, :t + 1]) - m[i, t]) for i in range(t)]
            curve_lines.append(f"{name},{t + 1},{_fmt(float(np.mean(drops)))}")
    (run_dir / "curve.csv").write_text("\n".join(curve_lines) + "\n")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sfao", description="Similarity-gated continual-learning benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a configured experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None,
                       help="run a single seed instead of the config list")
    p_run.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field (dotted path, JSON value)")
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a threshold grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--set", action="append", metavar="KEY=VALUE")
    p_sweep.set_defaults(func=cmd_sweep)

    p_report = sub.add_parser("report", help="recompute metrics from matrices")
    p_report.add_argument("run_dir")
    p_report.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BadConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SfaoError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
