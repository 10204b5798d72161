"""Command-line entry point: ``safer {train,sharpness,eval,landscape,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 data or checkpoint error,
4 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from safer.attacks import PRESETS, accuracy, eval_record, pgd, robust_accuracy, transfer_eval
from safer.config import RunConfig, load_config, write_config
from safer.data import Dataset
from safer.errors import ConfigError, DimensionError, FormatError, RegistryError, SaferError, VersionError
from safer.landscape import loss_landscape
from safer.models import load_checkpoint
from safer.models.checkpoint import atomic_write
from safer.sharpness import layer_sharpness_estimator, layer_sharpness_oracle
from safer.trainer import ablation_sweep, latest_checkpoint, sweep_csv, train

log = logging.getLogger("safer")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _write(path: Path, text: str) -> None:
    atomic_write(path, text.encode())


def _prepare_dir(path: Path, force: bool, resume: bool = False) -> Path:
    """Run directories are append-only: refuse a non-empty one unless forced or resuming."""
    if path.exists() and any(path.iterdir()) and not (force or resume):
        raise ConfigError(f"output directory {path} is not empty; pass --force to overwrite")
    path.mkdir(parents=True, exist_ok=True)
    return path


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.output_dir is not None:
        cfg = cfg.with_output_dir(args.output_dir)
    cfg.validate()
    return cfg


def _int_list(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of integers, got {text!r}") from None


def _eval_batch(ds: Dataset, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n > len(ds):
        raise ConfigError(f"batch of {n} requested from a dataset of {len(ds)}")
    idx = np.random.default_rng([seed, n]).choice(len(ds), size=n, replace=False)
    return ds.images[idx], ds.labels[idx]


# -- commands ------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _prepare_dir(Path(cfg.run.output_dir), args.force, resume=args.resume)
    _write(out / "config.ini", write_config(cfg))
    train_ds, test_ds = cfg.datasets()
    model = cfg.build_model()
    resume = latest_checkpoint(out) if args.resume else None
    res = train(model, train_ds, cfg.schedule, cfg.attack, cfg.optimizer, cfg.sharpness, cfg.loop(),
                cfg.augment.build(cfg.run.seed), out_dir=out, resume=resume)
    # final sharpness reports on the finished model
    x, y = _eval_batch(train_ds, min(cfg.sharpness.batch_size, len(train_ds)), cfg.run.seed)
    rep = layer_sharpness_estimator(model, x, y, replace(cfg.sharpness, fraction=cfg.schedule.fraction,
                                                         top_k=cfg.schedule.top_k), cfg.attack)
    _write(out / "reports" / "sharpness_final.json", rep.to_json())
    _write(out / "reports" / "sharpness_final.txt", rep.to_table() + "\n")
    summary = {"epochs": len(res.log), "test_clean_acc": accuracy(model, test_ds.images, test_ds.labels),
               "test_robust_acc": robust_accuracy(model, test_ds.images, test_ds.labels, cfg.eval_attack),
               "model_digest": model.digest()}
    _write(out / "summary.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_sharpness(args) -> int:
    cfg = _resolve(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    if model.cfg.image_size != cfg.model.image_size or model.cfg.channels != cfg.model.channels:
        raise VersionError("checkpoint input shape does not match the configured data")
    out = _prepare_dir(Path(cfg.run.output_dir), args.force)
    train_ds, _ = cfg.datasets()
    methods = ["estimator", "oracle"] if args.method == "both" else [args.method]
    scfg = cfg.sharpness if args.rho is None else replace(cfg.sharpness, rho=args.rho)
    rows = []
    for bs in _int_list(args.batch_sizes) if args.batch_sizes else [scfg.batch_size]:
        x, y = _eval_batch(train_ds, bs, cfg.run.seed)
        adv = pgd(model, x, y, cfg.attack, rng=np.random.default_rng([cfg.attack.seed, bs])).adversarial
        c = replace(scfg, batch_size=bs)
        for method in methods:
            fn = layer_sharpness_estimator if method == "estimator" else layer_sharpness_oracle
            rep = fn(model, x, y, c, adv_images=adv)
            _write(out / f"sharpness_{method}_b{bs}.json", rep.to_json())
            _write(out / f"sharpness_{method}_b{bs}.txt", rep.to_table() + "\n")
            rows.append({"method": method, "batch_size": bs, "wall_time": rep.wall_time,
                         "selected": [h.name for h in rep.selected]})
            print(rep.to_table())
    _write(out / "sharpness_summary.json", json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    models = [load_checkpoint(p)[0] for p in args.checkpoint]
    _, test_ds = cfg.datasets()
    for m in models:
        if m.cfg.image_size != test_ds.images.shape[-1] or m.cfg.channels != test_ds.images.shape[1]:
            raise DimensionError(f"checkpoint expects {m.cfg.channels}x{m.cfg.image_size}^2 inputs, "
                                 f"data has {test_ds.images.shape[1]}x{test_ds.images.shape[-1]}^2")
    presets = [s.strip() for s in args.presets.split(",") if s.strip()]
    unknown = [p for p in presets if p not in PRESETS]
    if unknown:
        raise ConfigError(f"unknown attack presets {unknown}; known: {sorted(PRESETS)}")
    results = {"checkpoints": [str(p) for p in args.checkpoint], "records": []}
    for path, m in zip(args.checkpoint, models):
        clean = accuracy(m, test_ds.images, test_ds.labels)
        for name in presets:
            atk = replace(PRESETS[name], seed=cfg.run.seed)
            robust = robust_accuracy(m, test_ds.images, test_ds.labels, atk)
            results["records"].append({**eval_record(m.digest()[:16], atk, clean, robust, len(test_ds)),
                                       "checkpoint": str(path), "preset": name})
    if len(models) == 2:
        # cell [i][j]: model j evaluated on examples crafted against model i
        results["transfer"] = {}
        for name in presets:
            atk = replace(PRESETS[name], seed=cfg.run.seed)
            results["transfer"][name] = [[transfer_eval(a, v, test_ds, atk) for v in models] for a in models]
    out = _prepare_dir(Path(cfg.run.output_dir), args.force)
    _write(out / "eval.json", json.dumps(results, indent=2, sort_keys=True) + "\n")
    print(json.dumps(results, sort_keys=True))
    return EXIT_OK


def cmd_landscape(args) -> int:
    cfg = _resolve(args)
    model, _, _ = load_checkpoint(args.checkpoint)
    train_ds, _ = cfg.datasets()
    x, y = _eval_batch(train_ds, args.batch_size, cfg.run.seed)
    adv = pgd(model, x, y, cfg.attack, rng=np.random.default_rng([cfg.attack.seed, 0])).adversarial
    extent = args.extent if args.extent is not None else cfg.optimizer.rho
    grid = loss_landscape(model, args.layer, adv, y, ((-extent, extent), (-extent, extent)),
                          args.resolution, cfg.run.seed)
    out = _prepare_dir(Path(cfg.run.output_dir), args.force)
    stem = f"landscape_{grid.layer.name}"
    _write(out / f"{stem}.csv", grid.to_csv())
    _write(out / f"{stem}.json", json.dumps({
        "layer": grid.layer.name, "index": grid.layer.index, "resolution": grid.resolution,
        "extents": grid.extents, "center_loss": grid.center, "variance": grid.variance(),
        "missing": int(np.isnan(grid.values).sum())}, indent=2) + "\n")
    print(f"{stem}: center={grid.center:.6g} variance={grid.variance():.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _resolve(args)
    out = _prepare_dir(Path(cfg.run.output_dir), args.force)
    _write(out / "config.ini", write_config(cfg))
    grid = [v.strip() for v in args.grid.split(",") if v.strip()]
    if args.axis != "dynamic_vs_fixed":
        grid = _int_list(args.grid)
    rows = ablation_sweep(cfg.sweep_base(), args.axis, grid, out_dir=out)
    _write(out / "sweep.csv", sweep_csv(rows))
    print(sweep_csv(rows), end="")
    return EXIT_OK if all(r["error"] is None for r in rows) else EXIT_RUNTIME


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override run and model seeds")
    common.add_argument("--output-dir", default=None, help="override run.output_dir")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("--config", default=None, help="INI run configuration (defaults if omitted)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="safer", description="Layer-selective sharpness-aware adversarial fine-tuning.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="run the full training schedule")
    t.add_argument("--resume", action="store_true", help="continue from the newest checkpoint in the output dir")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sharpness", parents=[common], help="per-layer sharpness reports for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--method", choices=["estimator", "oracle", "both"], default="estimator")
    s.add_argument("--batch-sizes", default=None, help="comma-separated grid, e.g. 50,100,200,300,500")
    s.add_argument("--rho", type=float, default=None)
    s.set_defaults(fn=cmd_sharpness)

    e = sub.add_parser("eval", parents=[common], help="clean and robust accuracy; transfer matrix for two models")
    e.add_argument("--checkpoint", required=True, nargs="+")
    e.add_argument("--presets", default="pgd20", help=f"comma-separated, from {', '.join(PRESETS)}")
    e.set_defaults(fn=cmd_eval)

    ls = sub.add_parser("landscape", parents=[common], help="adversarial loss surface around one layer")
    ls.add_argument("--checkpoint", required=True)
    ls.add_argument("--layer", required=True)
    ls.add_argument("--resolution", type=int, default=11)
    ls.add_argument("--extent", type=float, default=None, help="half-width of each axis (default: optimizer.rho)")
    ls.add_argument("--batch-size", type=int, default=64)
    ls.set_defaults(fn=cmd_landscape)

    sw = sub.add_parser("sweep", parents=[common], help="ablation sweep over one schedule axis")
    sw.add_argument("--axis", required=True, choices=["layer_count", "pretrain_split", "dynamic_vs_fixed"])
    sw.add_argument("--grid", required=True, help="comma-separated grid values")
    sw.set_defaults(fn=cmd_sweep)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, RegistryError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, VersionError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SaferError, FloatingPointError, ArithmeticError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
