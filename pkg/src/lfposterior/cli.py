"""Command-line driver: ``lfpost gen|train|eval|dump-posterior|replay-gt``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import re
import sys
import zipfile
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import metrics, network, scenegen
from ._binio import FormatError
from .lightfield import read_lightfield
from .posterior import BinGrid, DEFAULT_GRID, discretize_ground_truth_map, load_posterior_dump, save_posterior_dump

log = logging.getLogger("lfpost")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# flag parsing helpers


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"expected a non-negative integer, got {text}")
    return v


def _size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)[xX](\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def _layers(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)\.\.(\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"layers must look like MIN..MAX, got {text!r}")
    lo, hi = int(m.group(1)), int(m.group(2))
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError(f"invalid layer range {text!r}")
    return lo, hi


def _grid(text: str) -> BinGrid:
    try:
        k, lo, hi = text.split(",")
        return BinGrid(float(lo), float(hi), int(k))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"grid must look like K,MIN,MAX: {exc}") from None


def _pixel(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+),(\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"pixel must look like X,Y, got {text!r}")
    return int(m.group(1)), int(m.group(2))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lfpost", description="Light-field disparity posterior toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic layered-scene dataset")
    g.add_argument("--scenes", type=_positive_int, required=True)
    g.add_argument("--views", type=_positive_int, default=9)
    g.add_argument("--size", type=_size, default=(64, 64))
    g.add_argument("--layers", type=_layers, default=(2, 4))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", choices=("train", "val"), default="train")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="train one network head")
    t.add_argument("--method", choices=network.METHODS, required=True)
    t.add_argument("--multimodal", action="store_true")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--steps", type=_nonneg_int, default=200)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--config", type=Path, help="JSON with optional 'net' and 'train' sections")
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--log", type=Path, help="loss CSV (default: <out>.loss.csv)")
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint or posterior dump on a dataset")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt", type=Path)
    src.add_argument("--posteriors", type=Path, help="posterior dump (.npz) instead of a checkpoint")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--grid", type=_grid, default=DEFAULT_GRID)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--curves", type=Path)
    e.add_argument("--ese-steps", type=_positive_int)
    e.add_argument("--ese-delta", type=float)
    e.add_argument("--per-pixel-kld", action="store_true", help="normalize KLD by 1/N instead of 1/(N K)")
    e.add_argument("--force", action="store_true")

    d = sub.add_parser("dump-posterior", help="write one pixel's predicted and GT histograms")
    d.add_argument("--ckpt", type=Path, required=True)
    d.add_argument("--scene", type=Path, required=True, help="scene .lf file; GT is read from the sibling .gt")
    d.add_argument("--pixel", type=_pixel, required=True)
    d.add_argument("--grid", type=_grid, default=DEFAULT_GRID)
    d.add_argument("--out", type=Path, required=True)
    d.add_argument("--force", action="store_true")

    r = sub.add_parser("replay-gt", help="write a posterior dump equal to the discretized ground truth")
    r.add_argument("--data", type=Path, required=True)
    r.add_argument("--grid", type=_grid, default=DEFAULT_GRID)
    r.add_argument("--out", type=Path, required=True)
    r.add_argument("--force", action="store_true")
    return p


def run_echo(args: argparse.Namespace) -> dict:
    """Flags as parsed, minus output locations, so reruns elsewhere stay byte-identical."""
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in ("out", "log", "curves", "force", "verbose"):
            continue
        if isinstance(v, Path):
            v = str(v)
        elif isinstance(v, BinGrid):
            v = v.to_list()
        elif isinstance(v, tuple):
            v = list(v)
        out[k] = v
    return out


def _check_output(path: Path, force: bool, directory: bool = False) -> None:
    if directory:
        if path.exists() and (not path.is_dir() or any(path.iterdir())) and not force:
            raise UsageError(f"{path} exists and is not empty (use --force)")
    elif path.exists() and not force:
        raise UsageError(f"{path} exists (use --force)")


def _write_echo(path: Path, args: argparse.Namespace) -> None:
    path.with_name(path.name + ".run.json").write_text(json.dumps(run_echo(args), indent=2, sort_keys=True) + "\n")


def _read_data(path: Path) -> scenegen.Dataset:
    if not path.is_dir():
        raise UsageError(f"data directory {path} not found")
    return scenegen.read_dataset(path)


def _load_model(path: Path) -> network.Model:
    if not path.is_file() or not network.sidecar_path(path).is_file():
        raise UsageError(f"checkpoint {path} or its JSON sidecar not found")
    return network.load_model(path)


# --------------------------------------------------------------------------
# commands


def cmd_gen(args) -> int:
    _check_output(args.out, args.force, directory=True)
    h, w = args.size
    try:
        config = scenegen.SceneConfig(num_layers=args.layers, height=h, width=w, views=args.views, seed=args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    dataset = scenegen.generate_dataset(config, args.scenes, args.seed, args.split)
    dataset.manifest["run"] = run_echo(args)
    if args.out.exists() and args.force:
        for old in args.out.glob("scene_*.*"):
            old.unlink()
    scenegen.write_dataset(dataset, args.out)
    print(f"wrote {args.scenes} scenes to {args.out}")
    return EXIT_OK


def _train_configs(args) -> tuple[network.NetConfig, network.TrainConfig]:
    net_kw: dict = {}
    train_kw: dict = {}
    if args.config is not None:
        try:
            cfg = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        unknown = set(cfg) - {"net", "train"}
        if unknown:
            raise UsageError(f"unknown config sections {sorted(unknown)}")
        net_kw = dict(cfg.get("net", {}))
        train_kw = dict(cfg.get("train", {}))
        for kw, cls in ((net_kw, network.NetConfig), (train_kw, network.TrainConfig)):
            bad = set(kw) - {f.name for f in fields(cls)}
            if bad:
                raise UsageError(f"unknown {cls.__name__} keys {sorted(bad)}")
    if net_kw.get("method", args.method) != args.method:
        raise UsageError("config method conflicts with --method")
    net_kw["method"] = args.method
    train_kw.update(steps=args.steps, seed=args.seed, multimodal=args.multimodal)
    try:
        return network.NetConfig(**net_kw), network.TrainConfig(**train_kw)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def cmd_train(args) -> int:
    net_cfg, train_cfg = _train_configs(args)
    dataset = _read_data(args.data)
    if len(dataset) == 0:
        raise UsageError(f"dataset {args.data} is empty")
    _check_output(args.out, args.force)
    log_path = args.log or args.out.with_name(args.out.name + ".loss.csv")
    model = network.build(args.method, net_cfg, seed=args.seed)

    def progress(step, value):
        if step == 1 or step % 20 == 0 or step == train_cfg.steps:
            log.info("step %d loss %.5f", step, value)

    result = network.train(model, dataset, train_cfg, on_step=progress)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    info = {"seed": args.seed, "steps": train_cfg.steps, "run": run_echo(args), "train": vars(train_cfg)}
    network.save_model(model, args.out, info)
    log_path.write_text(result.to_csv())
    if result.losses:
        print(f"trained {args.method} for {train_cfg.steps} steps: loss {result.losses[0]:.4f} -> {result.losses[-1]:.4f}")
    else:
        print(f"saved untrained {args.method} model")
    return EXIT_OK


def _posterior_source(args, model: network.Model | None, dump: dict | None):
    if dump is not None:
        def source(rec):
            if rec.name not in dump:
                raise FormatError(f"posterior dump has no entry for {rec.name}")
            return dump[rec.name]
        return source
    cfg = model.config
    if cfg.method == "dpp" and not cfg.grid.same_as(args.grid):
        raise UsageError(f"--grid {args.grid.to_list()} does not match the checkpoint grid {cfg.grid.to_list()}")
    if cfg.method == "ese":
        delta = args.ese_delta if args.ese_delta is not None else cfg.delta_y
        steps = args.ese_steps if args.ese_steps is not None else cfg.ensemble_size
        return lambda rec: network.ese_infer(model, rec.lightfield, delta, steps)
    return lambda rec: network.infer_posterior(model, rec.lightfield)


def cmd_eval(args) -> int:
    _check_output(args.out, args.force)
    if args.curves is not None:
        _check_output(args.curves, args.force)
    dataset = _read_data(args.data)
    if len(dataset) == 0:
        raise UsageError(f"dataset {args.data} is empty")
    model = dump = None
    if args.ckpt is not None:
        model = _load_model(args.ckpt)
    else:
        if not args.posteriors.is_file():
            raise UsageError(f"posterior dump {args.posteriors} not found")
        dump = load_posterior_dump(args.posteriors)
    source = _posterior_source(args, model, dump)
    try:
        report = metrics.evaluate(source, dataset.records, args.grid, per_pixel_kld=args.per_pixel_kld)
    except ValueError as exc:
        if "grid" in str(exc):
            raise UsageError(str(exc)) from None
        raise
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(report.to_json())
    _write_echo(args.out, args)
    if args.curves is not None:
        args.curves.write_text(report.curve.to_csv())
    for line in report.summary_lines():
        print(line)
    return EXIT_OK


def cmd_dump_posterior(args) -> int:
    _check_output(args.out, args.force)
    model = _load_model(args.ckpt)
    if not args.scene.is_file():
        raise UsageError(f"scene {args.scene} not found")
    lf = read_lightfield(args.scene)
    gt = scenegen.read_ground_truth(args.scene.with_suffix(".gt"))
    post = network.infer_posterior(model, lf)
    x, y = args.pixel
    m = max(post.valid_margin, lf.valid_margin)
    if not (m <= x < lf.width - m and m <= y < lf.height - m):
        raise UsageError(f"pixel {x},{y} outside the valid interior")
    grid = args.grid
    pred = post.discretize(grid)[:, y, x]
    gt_hist, _ = discretize_ground_truth_map(gt.disparity[:, y:y + 1, x:x + 1], gt.eta[:, y:y + 1, x:x + 1], grid)
    rows = ["bin_center,gt_prob,pred_prob"]
    for c, g, q in zip(grid.centers, gt_hist[:, 0, 0], pred):
        rows.append(f"{c:.9g},{g:.9g},{q:.9g}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text("\n".join(rows) + "\n")
    _write_echo(args.out, args)
    print(f"wrote {grid.K} bins for pixel {x},{y} to {args.out}")
    return EXIT_OK


def cmd_replay_gt(args) -> int:
    _check_output(args.out, args.force)
    dataset = _read_data(args.data)
    maps = {rec.name: metrics.ground_truth_replay(rec, args.grid) for rec in dataset.records}
    args.out.parent.mkdir(parents=True, exist_ok=True)
    save_posterior_dump(args.out, maps)
    print(f"wrote ground-truth posteriors for {len(maps)} scenes to {args.out}")
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "dump-posterior": cmd_dump_posterior,
    "replay-gt": cmd_replay_gt,
}


def _thread_limit() -> int | None:
    raw = os.environ.get("LF_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LF_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("LF_THREADS must be >= 1")
    return n


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        limit = _thread_limit()
        with threadpool_limits(limits=limit):
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"lfpost: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except network.NumericError as exc:
        print(f"lfpost: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, zipfile.BadZipFile, KeyError, ValueError, OSError) as exc:
        print(f"lfpost: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
