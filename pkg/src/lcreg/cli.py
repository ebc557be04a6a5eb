"""Command line driver.

Subcommands:
    build-dataset   synthesize a task's train/test splits into the cache
    train           one training run, or the component grid with --ablate
    eval            score a saved checkpoint on a task's balanced test split
    gradcheck       run the kernel battery plus an end-to-end derivative check
    report          format results files; optionally export latent usage

Configuration is a flat key=value file with ``task.`` and ``train.``
prefixes; ``--set key=value`` overrides individual entries. Unknown keys are
rejected rather than ignored. Exit codes: 0 success, 1 failed check or
missing artifact, 2 bad usage or bad configuration.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from .augment import init_stats, update_stats
from .data import dataset_cache_dir, load_dataset, save_dataset
from .diffcore import Tape, standard_kernel_checks
from .latent import similarity_maps
from .model import (
    ModelConfig,
    encode,
    end_to_end_grad_check,
    image_encoder,
    init_model,
    load_model,
    save_model,
)
from .trainer import (
    TaskSpec,
    TrainConfig,
    config_dict,
    config_hash,
    evaluate,
    make_run_record,
    make_task_data,
    model_config,
    run_ablation,
    run_training,
)

DEFAULT_ABLATION_SEEDS = (0, 1, 2, 3, 4)


class ConfigError(Exception):
    pass


# -- flat key=value configuration -----------------------------------------


def _coerce(key: str, raw: str, default):
    """Parse ``raw`` to the type of the field's default value."""
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}")
    if isinstance(default, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {raw!r}")
    if isinstance(default, tuple):
        if raw == "":
            return ()
        elem = float if (default and isinstance(default[0], float)) else int
        try:
            return tuple(elem(part) for part in raw.split(","))
        except ValueError:
            raise ConfigError(f"{key}: expected comma-separated values, got {raw!r}")
    return raw


def _parse_pairs(lines, source: str) -> dict:
    out = {}
    for ln, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{ln}: expected key=value, got {text!r}")
        key, raw = text.split("=", 1)
        out[key.strip()] = raw
    return out


def load_settings(config_path, set_pairs, seed=None) -> tuple[TaskSpec, TrainConfig]:
    """Defaults overridden by the config file, then by --set pairs."""
    entries: dict = {}
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        entries.update(_parse_pairs(path.read_text().splitlines(), str(path)))
    entries.update(_parse_pairs(set_pairs or [], "--set"))

    task_fields = {f.name for f in fields(TaskSpec)}
    train_fields = {f.name for f in fields(TrainConfig)}
    task_kw: dict = {}
    train_kw: dict = {}
    task_defaults = TaskSpec()
    train_defaults = TrainConfig()
    for key, raw in entries.items():
        if key.startswith("task."):
            name = key[len("task."):]
            if name not in task_fields:
                raise ConfigError(f"unknown key {key!r}")
            task_kw[name] = _coerce(key, raw, getattr(task_defaults, name))
        elif key.startswith("train."):
            name = key[len("train."):]
            if name not in train_fields:
                raise ConfigError(f"unknown key {key!r}")
            train_kw[name] = _coerce(key, raw, getattr(train_defaults, name))
        else:
            raise ConfigError(f"unknown key {key!r} (use task. or train. prefixes)")
    try:
        task = TaskSpec(**task_kw)
        cfg = TrainConfig(**train_kw)
    except ValueError as e:
        raise ConfigError(str(e))
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    return task, cfg


def _dataset_params(task: TaskSpec, seed: int) -> dict:
    return {"task": asdict(task), "seed": int(seed)}


# -- subcommands -----------------------------------------------------------


def cmd_build_dataset(args) -> int:
    task, cfg = load_settings(args.config, args.set, args.seed)
    out = Path(args.out) if args.out else dataset_cache_dir(_dataset_params(task, cfg.seed))
    train, test = make_task_data(task, cfg.seed)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    (out / "task.json").write_text(
        json.dumps(_dataset_params(task, cfg.seed), indent=2, sort_keys=True) + "\n"
    )
    print(out)
    return 0


def _load_cached_data(task: TaskSpec, seed: int):
    root = dataset_cache_dir(_dataset_params(task, seed))
    marker = root / "train" / "meta.json"
    if not marker.exists():
        print(f"dataset cache miss: expected {marker}\n"
              f"run `lcreg build-dataset` with the same config first", file=sys.stderr)
        return None
    return load_dataset(root / "train"), load_dataset(root / "test")


def cmd_train(args) -> int:
    task, cfg = load_settings(args.config, args.set, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.ablate:
        return _train_ablation(args, task, cfg, out)

    results_path = out / "results.json"
    want_hash = config_hash(cfg, task)
    if results_path.exists():
        existing = json.loads(results_path.read_text())
        if existing.get("config_hash") == want_hash and not existing.get("diverged"):
            print(f"results up to date for config {want_hash}; skipping")
            return 0

    datasets = None
    if args.from_cache:
        datasets = _load_cached_data(task, cfg.seed)
        if datasets is None:
            return 1
    result = run_training(cfg, task, datasets=datasets)
    record = make_run_record(cfg, task, result)
    results_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    with open(out / "history.jsonl", "w") as fh:
        for i, it in enumerate(result.history["iters"]):
            fh.write(json.dumps({
                "stage": 1, "iter": it,
                "total": result.history["total"][i],
                "cls": result.history["cls"][i],
                "recon": result.history["recon"][i],
                "latent_aug": result.history["latent_aug"][i],
            }) + "\n")
        for i, it in enumerate(result.history["stage2_iters"]):
            fh.write(json.dumps({
                "stage": 2, "iter": it,
                "cls": result.history["stage2_cls"][i],
            }) + "\n")
    if result.diverged:
        print(f"training diverged at iteration {result.diverged_at}; "
              f"record written to {results_path}", file=sys.stderr)
        return 1
    save_model(out / "model.lct", result.params, result.stats,
               iteration=cfg.t1_iters + cfg.t2_iters)
    print(json.dumps(result.report.to_dict(), indent=2, sort_keys=True))
    return 0


def _ablation_hash(cfg: TrainConfig, task: TaskSpec, seeds) -> str:
    canon = json.dumps(
        {"config": config_dict(cfg, task), "seeds": list(seeds)},
        sort_keys=True, separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _train_ablation(args, task: TaskSpec, cfg: TrainConfig, out: Path) -> int:
    try:
        seeds = [int(s) for s in str(args.seeds).split(",") if s.strip() != ""]
    except ValueError:
        print(f"bad --seeds value: {args.seeds!r}", file=sys.stderr)
        return 2
    if not seeds:
        print("--seeds must name at least one seed", file=sys.stderr)
        return 2
    path = out / "ablation.json"
    want = _ablation_hash(cfg, task, seeds)
    if path.exists():
        existing = json.loads(path.read_text())
        if existing.get("ablation_hash") == want:
            print(f"ablation up to date for config {want}; skipping")
            return 0
    grid = run_ablation(cfg, task, seeds)
    payload = {
        "ablation_hash": want,
        "config": config_dict(cfg, task),
        "seeds": seeds,
        "rows": grid["rows"],
        "summary": grid["summary"],
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(grid["summary"], indent=2, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    task, cfg = load_settings(args.config, args.set, args.seed)
    model_path = Path(args.model)
    if not model_path.exists():
        print(f"checkpoint not found: {model_path}", file=sys.stderr)
        return 1
    params, _, _ = load_model(model_path, model_config(cfg, task))
    train, test = make_task_data(task, cfg.seed)
    report = evaluate(params, test, train.counts)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    failed = False
    for report in standard_kernel_checks(instances=args.instances):
        mark = "ok" if report.passed else "FAIL"
        print(f"{report.op:<24} max_rel={report.max_rel_err:.3e} "
              f"tol={report.tolerance:.0e} {mark}")
        failed = failed or not report.passed

    enc = image_encoder(1, 6, 6, (3,), 4)
    params = init_model(ModelConfig(enc, num_classes=3, num_latents=3), seed=0)
    rng = np.random.default_rng(0)
    xb = rng.standard_normal((3, 1, 6, 6))
    labels = np.arange(3)
    stats = update_stats(init_stats(3, 4), rng.standard_normal((24, 4)),
                         np.repeat(np.arange(3), 8))
    report = end_to_end_grad_check(params, xb, labels, stats, lam=0.5,
                                   tolerance=1e-4)
    mark = "ok" if report.passed else "FAIL"
    print(f"{report.op:<24} max_rel={report.max_rel_err:.3e} "
          f"tol={report.tolerance:.0e} {mark}")
    failed = failed or not report.passed
    return 1 if failed else 0


def _format_table(headers, rows) -> str:
    widths = [len(h) for h in headers]
    for row in rows:
        for i, cell in enumerate(row):
            widths[i] = max(widths[i], len(cell))
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)).rstrip(),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(row)).rstrip())
    return "\n".join(lines)


def _report_single(record: dict) -> str:
    metrics = record.get("metrics")
    if metrics is None:
        return "run diverged; no metrics"
    rows = [[label, f"{metrics[label]:.4f}"]
            for label in ("overall", "many", "medium", "few")]
    return _format_table(["label", "accuracy"], rows)


def _report_ablation(payload: dict) -> str:
    labels = ("overall", "many", "medium", "few")
    rows = []
    for name, cell in payload["rows"].items():
        clean = [m for m in cell["seeds"].values() if "error" not in m]
        row = [name]
        for label in labels:
            if clean:
                vals = np.array([m[label] for m in clean])
                row.append(f"{vals.mean():.4f} ± {vals.std():.4f}")
            else:
                row.append("diverged")
        row.append(f"{len(clean)}/{len(cell['seeds'])}")
        rows.append(row)
    return _format_table(["variant", *labels, "clean"], rows)


def _latent_usage_csv(args, task: TaskSpec, cfg: TrainConfig, path: Path) -> int:
    params, _, _ = load_model(Path(args.model), model_config(cfg, task))
    if not params.config.latent_on:
        print("checkpoint has no latent branch; nothing to export", file=sys.stderr)
        return 1
    _, test = make_task_data(task, cfg.seed)
    m = params.config.num_latents
    sums = np.zeros((task.num_classes, m))
    counts = np.zeros(task.num_classes)
    chunk = 256
    for start in range(0, len(test.labels), chunk):
        xb = test.samples[start:start + chunk]
        yb = test.labels[start:start + chunk]
        tape = Tape()
        f, p = encode(tape, params, xb)
        sims = similarity_maps(tape, params.pool, f)
        per_sample = tape.mean_pool_segments(sims.normalized, p).data  # [M, B]
        np.add.at(sums, yb, per_sample.T)
        np.add.at(counts, yb, 1.0)
    usage = sums / counts[:, None]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", *[f"latent_{j}" for j in range(m)]])
        for c in range(task.num_classes):
            writer.writerow([c, *[f"{v:.10f}" for v in usage[c]]])
    print(path)
    return 0


def cmd_report(args) -> int:
    if args.histogram_csv:
        if not args.model:
            print("--histogram-csv needs --model", file=sys.stderr)
            return 2
        task, cfg = load_settings(args.config, args.set, args.seed)
        return _latent_usage_csv(args, task, cfg, Path(args.histogram_csv))
    if not args.results:
        print("report needs --results or --histogram-csv", file=sys.stderr)
        return 2
    path = Path(args.results)
    if not path.exists():
        print(f"results file not found: {path}", file=sys.stderr)
        return 1
    payload = json.loads(path.read_text())
    if "rows" in payload:
        print(_report_ablation(payload))
    else:
        print(_report_single(payload))
    return 0


# -- entry -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcreg", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat key=value configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one configuration entry")
        p.add_argument("--seed", type=int, help="override train.seed")

    p = sub.add_parser("build-dataset", help="synthesize and cache a task's splits")
    common(p)
    p.add_argument("--out", help="directory override (default: content-addressed cache)")
    p.set_defaults(func=cmd_build_dataset)

    p = sub.add_parser("train", help="run training and write results + checkpoint")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--ablate", action="store_true", help="run the component grid")
    p.add_argument("--seeds", default=",".join(str(s) for s in DEFAULT_ABLATION_SEEDS),
                   help="comma-separated seeds for --ablate")
    p.add_argument("--from-cache", action="store_true",
                   help="load datasets from the cache instead of synthesizing")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the balanced test split")
    common(p)
    p.add_argument("--model", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="kernel battery plus end-to-end check")
    p.add_argument("--instances", type=int, default=10,
                   help="random instances per kernel")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("report", help="format results; export latent usage")
    common(p)
    p.add_argument("--results", help="results.json or ablation.json to format")
    p.add_argument("--model", help="checkpoint for --histogram-csv")
    p.add_argument("--histogram-csv", help="write per-class latent usage CSV here")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2


def entrypoint():
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
