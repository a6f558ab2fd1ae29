"""``genint`` command line: synth, split, train, eval, predict, attn, bench.

Exit codes: 0 success, 2 usage/config, 3 I/O, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .atlas import HeatmapStyle, diagonality_table, export_atlas, layer_trend, render_grid
from .binio import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import (
    DATASET_MAGIC, default_task_spec, generate_synthetic, load_dataset, one_hot_encode,
    parse_task_spec, read_sequences, save_dataset, split_dataset,
)
from .errors import ConfigError, FormatError, GenIntError
from .metrics import evaluate, predict, report_from_predictions
from .model import InterpreterConfig, InterpreterParams, build, count_madds, forward, make_config
from .swin import Swin1dConfig
from .train import LOG_HEADER, DivergenceError, train_loop

logger = logging.getLogger("genint")


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_echo(path: Path, command: str, args: argparse.Namespace, extra: dict | None = None) -> None:
    """Provenance record of the invocation next to its outputs."""
    echo = {"command": command, "args": {k: v for k, v in vars(args).items() if k != "func"}}
    echo["args"] = {k: (str(v) if isinstance(v, Path) else v) for k, v in echo["args"].items()}
    if extra:
        echo.update(extra)
    _dump_json(path, echo)


def save_model(path, config: InterpreterConfig, params: InterpreterParams, extra: dict | None = None) -> None:
    meta = {"model": config.to_dict()}
    meta.update(extra or {})
    save_checkpoint(path, meta, {k: v.data for k, v in params.flat().items()})


def load_model(path) -> tuple[InterpreterConfig, InterpreterParams]:
    meta, tensors = load_checkpoint(path)
    config = InterpreterConfig.from_dict(meta["model"])
    config.validate()
    flat = {k: ad.Tensor(v, requires_grad=True) for k, v in tensors.items()}
    return config, InterpreterParams.from_flat(config, flat)


def _write_log(path: Path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOG_HEADER)
        for step, lr, loss, val in rows:
            w.writerow([step, repr(lr), repr(loss), "" if val is None else repr(val)])


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    if args.spec is None:
        spec = default_task_spec()
    else:
        if not Path(args.spec).is_file():
            raise ConfigError(f"spec file not found: {args.spec}")
        spec = parse_task_spec(Path(args.spec).read_text())
    ds = generate_synthetic(spec, args.count, args.seed)
    out = Path(args.out)
    save_dataset(ds, out)
    Path(f"{out}.spec.ini").write_text(spec.to_ini())
    write_echo(Path(f"{out}.echo.json"), "synth", args)
    print(f"wrote {ds.count} records to {out}")
    return 0


def cmd_split(args) -> int:
    ds = load_dataset(args.data)
    fractions = [float(x) for x in args.fractions.split(",")]
    parts = split_dataset(ds, fractions, args.seed)
    for name, part in zip(("train", "val", "test"), parts):
        save_dataset(part, Path(f"{args.out_prefix}.{name}.gds"))
        print(f"{name}: {part.count} records")
    write_echo(Path(f"{args.out_prefix}.split.echo.json"), "split", args)
    return 0


def cmd_train(args) -> int:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.steps is not None:
        overrides.append(f"train.steps={args.steps}")
    run = RunConfig.load(args.config, overrides) if args.config else RunConfig.parse("", overrides)
    ds = load_dataset(args.data)
    config = run.interpreter_config(ds.n, ds.m, ds.tracks, ds.track_groups)
    val = load_dataset(args.val) if args.val else None
    if val is not None and (val.n, val.m, val.tracks) != (ds.n, ds.m, ds.tracks):
        raise ConfigError("validation data shape differs from training data")
    hyper = run.hyper()
    seed = run.train["seed"]
    dtype = np.float32 if run.train["dtype"] == "float32" else np.float64
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(run.to_ini())
    write_echo(out / "echo.json", "train", args, {"model": config.to_dict()})
    params = build(config, seed, dtype=dtype)
    extra = {"train": {k: v for k, v in run.train.items()}}
    try:
        result = train_loop(config, ds, val, hyper, seed=seed, params=params)
    except DivergenceError as exc:
        _write_log(out / "train_log.csv", exc.log)
        if exc.last_good is not None:
            save_model(out / "model.ckpt", config, exc.last_good, extra)
        print(f"training diverged: {exc}", file=sys.stderr)
        return 4
    _write_log(out / "train_log.csv", result.log)
    save_model(out / "model.ckpt", config, result.params, extra)
    if val is not None:
        save_model(out / "best.ckpt", config, result.best_params, extra)
    metrics = {"steps": hyper.steps}
    if result.log:
        metrics["final_train_loss"] = result.log[-1][2]
    if ds.count:
        metrics["train"] = evaluate(result.params, config, ds).to_dict()
    if val is not None and val.count:
        metrics["val"] = evaluate(result.params, config, val).to_dict()
        metrics["best_val_overall"] = result.best_val
    _dump_json(out / "metrics.json", metrics)
    print(f"trained {hyper.steps} steps; checkpoint at {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    config, params = load_model(args.checkpoint)
    ds = load_dataset(args.data)
    if (ds.n, ds.m, ds.tracks) != (config.n, config.m, config.tracks):
        raise ConfigError(f"data (n={ds.n}, m={ds.m}, T={ds.tracks}) does not fit the checkpoint")
    pred = predict(params, config, ds.onehot)
    report = report_from_predictions(pred, ds.targets, ds.track_groups)
    out = Path(args.out)
    _dump_json(out, report.to_dict())
    with open(out.with_suffix(".tracks.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["track", "group", "pearson", "mean_prediction", "mean_target"])
        for t, (r, g) in enumerate(zip(report.per_track, report.track_groups)):
            w.writerow([t, g, "" if r is None else repr(r), repr(float(pred[..., t].mean())), repr(float(ds.targets[..., t].mean()))])
    write_echo(Path(f"{out}.echo.json"), "eval", args)
    print(f"overall pearson: {report.overall}")
    return 0


def _load_input(path, index: int) -> tuple[str, np.ndarray]:
    with open(path, "rb") as f:
        head = f.read(len(DATASET_MAGIC))
    if head == DATASET_MAGIC.encode():
        ds = load_dataset(path)
        if not 0 <= index < ds.count:
            raise ConfigError(f"record index {index} out of range for {ds.count} records")
        return ds.ids[index], ds.onehot[index]
    records = read_sequences(path)
    if not 0 <= index < len(records):
        raise ConfigError(f"record index {index} out of range for {len(records)} records")
    rid, seq = records[index]
    return rid, one_hot_encode(seq)


def cmd_predict(args) -> int:
    config, params = load_model(args.checkpoint)
    records = read_sequences(args.input)
    onehot = np.stack([one_hot_encode(s) for _, s in records])
    if onehot.shape[1] != config.n:
        raise ConfigError(f"sequences have {onehot.shape[1]} bp; the model expects {config.n}")
    pred = predict(params, config, onehot)
    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["record_id", "track", "bin", "value"])
        for (rid, _), p in zip(records, pred):
            for b in range(config.m):
                for t in range(config.tracks):
                    w.writerow([rid, t, b, repr(float(p[b, t]))])
    write_echo(Path(f"{args.out}.echo.json"), "predict", args)
    return 0


def cmd_attn(args) -> int:
    config, params = load_model(args.checkpoint)
    if args.layer is not None and not 1 <= args.layer <= config.depth:
        raise ConfigError(f"--layer must lie in 1..{config.depth}, got {args.layer}")
    rid, x = _load_input(args.input, args.index)
    if x.shape != (config.n, config.d_in):
        raise ConfigError(f"record {rid} has shape {x.shape}; the model expects ({config.n}, {config.d_in})")
    _, atlas = forward(x, params, config, capture=True)
    out = Path(args.out)
    export_atlas(atlas, out)
    with open(out / "diagonality.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["layer", "slot", "window", "head", "diagonality"])
        for row in diagonality_table(atlas):
            w.writerow(list(row[:4]) + [repr(row[4])])
    trend = layer_trend(atlas)
    for layer, value in trend.items():
        print(f"layer {layer}: mean diagonality {value:.4f}")
    if args.render:
        style = HeatmapStyle(normalization=args.normalization)
        for i, info in enumerate(atlas.layers, 1):
            render_grid(
                atlas.layer_records(i), style, out / f"layer_{i}" / "grid.svg",
                span_bp=info.span, window_size=info.window,
                title=f"layer {i}: {info.tokens} tokens of {info.span} bp, window {info.window}",
            )
        layer = args.layer or config.depth
        info = atlas.layers[layer - 1]
        for h in range(info.heads):
            render_grid(
                atlas.layer_records(layer), style, out / f"layer_{layer}" / f"head{h + 1}.svg",
                span_bp=info.span, window_size=info.window, heads=[h],
                title=f"layer {layer} head {h + 1}",
            )
    write_echo(out / "echo.json", "attn", args, {"record_id": rid, "diagonality_by_layer": trend})
    return 0


def _bench_config(run: RunConfig, n: int, dense: bool) -> InterpreterConfig:
    mc, bc = run.model, run.bench
    depth = bc["depth"]
    if n >> depth < max(bc["m"], 1) or n < 2 ** depth:
        raise ConfigError(f"length {n} too short for {depth} blocks")
    cfg = make_config(
        n, max(bc["m"], 1), bc["tracks"], d_model=mc["d_model"], window=mc["window"],
        shift=mc["shift"], heads=mc["heads"], width_cap=mc["width_cap"], depth=depth,
        ff=mc["ff"], rel_bias=mc["rel_bias"],
    )
    if dense:
        tokens = cfg.token_counts()
        cfg.layers = [
            Swin1dConfig(tokens[i], 0, c.alpha, c.heads, c.ff, c.rel_bias) for i, c in enumerate(cfg.layers)
        ]
    return cfg


def _slope(xs, ys) -> float:
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def cmd_bench(args) -> int:
    run = RunConfig.load(args.config, args.set) if args.config else RunConfig.parse("", args.set)
    try:
        lengths = [int(x) for x in args.lengths.split(",")]
    except ValueError:
        raise ConfigError(f"bad --lengths {args.lengths!r}") from None
    if not lengths or min(lengths) < 2:
        raise ConfigError("lengths must be integers >= 2")
    repeats = max(args.repeats or run.bench["repeats"], 1)
    dtype = np.float32 if run.bench["dtype"] == "float32" else np.float64
    rows, mismatch = [], False
    for mode in ("windowed", "dense"):
        for n in lengths:
            cfg = _bench_config(run, n, mode == "dense")
            params = build(cfg, 0, dtype=dtype)
            x = ad.Tensor(one_hot_encode("ACGT" * (n // 4) + "ACGT"[: n % 4]).astype(dtype))
            with ad.Tape() as tape:
                forward(x, params, cfg)
            analytic = count_madds(cfg)
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                forward(x, params, cfg)
                times.append(time.perf_counter() - t0)
            ok = dict(analytic) == dict(tape.madds)
            mismatch |= not ok
            rows.append({
                "mode": mode, "n": n, "k": cfg.layers[0].window,
                "analytic_madds": sum(analytic.values()), "measured_madds": tape.madd_counter,
                "analytic_score": analytic["swin.score"], "measured_score": tape.madds["swin.score"],
                "wall_median_s": statistics.median(times), "exact": ok,
            })
    with open(args.out, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for mode in ("windowed", "dense"):
        sel = [r for r in rows if r["mode"] == mode]
        if len(sel) > 1:
            ns = [r["n"] for r in sel]
            print(
                f"{mode}: score-term exponent {_slope(ns, [r['measured_score'] for r in sel]):.3f}, "
                f"total-madd exponent {_slope(ns, [r['measured_madds'] for r in sel]):.3f}, "
                f"wall-clock exponent {_slope(ns, [r['wall_median_s'] for r in sel]):.3f}"
            )
    write_echo(Path(f"{args.out}.echo.json"), "bench", args, {"config": run.to_ini()})
    if mismatch:
        print("analytic and measured multiply-add counts disagree", file=sys.stderr)
        return 4
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="genint", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--spec", help="task spec file (default: built-in desk task)")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="split a dataset into train/val/test containers")
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default="0.8,0.1,0.1")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-track Pearson report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict tracks for sequences")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="id<TAB>sequence lines")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("attn", help="export (and render) the attention atlas of one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="sequence file or dataset container")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--render", action="store_true")
    p.add_argument("--layer", type=int)
    p.add_argument("--normalization", choices=("row", "global"), default="row")
    p.set_defaults(func=cmd_attn)

    p = sub.add_parser("bench", help="multiply-add and wall-clock scaling")
    p.add_argument("--config")
    p.add_argument("--lengths", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except GenIntError as exc:
        kind = f" [{exc.code}]" if isinstance(exc, FormatError) else ""
        print(f"error{kind}: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", 2)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
