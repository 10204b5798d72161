"""The training schedule: clean pretraining, PGD-AT, then layer-selective SAM fine-tuning."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from safer.attacks import AttackConfig, accuracy, pgd, robust_accuracy
from safer.data import AugmentConfig, Dataset, augment, train_val_split
from safer.errors import ConfigError, SaferError
from safer.models.checkpoint import atomic_write, load_checkpoint, save_checkpoint
from safer.models.vit import LayerHandle, Model, ViTConfig, build_model, set_trainable
from safer.sharpness import SharpnessConfig, SharpnessReport, layer_sharpness_estimator
from safer.trainer.log import EpochRecord, TrainLog
from safer.trainer.optim import SGD, OptimizerConfig, cosine_lr
from safer.trainer.steps import at_step, clean_step, safer_step, sam_step

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SaferSchedule:
    pretrain_clean_epochs: int = 2
    pretrain_adv_epochs: int = 10
    finetune_epochs: int = 10
    reselect_interval: int = 10
    fraction: float = 0.05
    dynamic: bool = True
    top_k: int | None = None  # fixed layer count; overrides ``fraction``

    def validate(self) -> None:
        for name in ("pretrain_clean_epochs", "pretrain_adv_epochs", "finetune_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(f"schedule.{name} must be non-negative, got {getattr(self, name)}")
        if self.reselect_interval < 1:
            raise ConfigError(f"schedule.reselect_interval must be at least 1, got {self.reselect_interval}")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"schedule.fraction must lie in (0, 1], got {self.fraction}")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError(f"schedule.top_k must be positive, got {self.top_k}")

    @property
    def total_epochs(self) -> int:
        return self.pretrain_clean_epochs + self.pretrain_adv_epochs + self.finetune_epochs

    def phase(self, epoch: int) -> str:
        if epoch < self.pretrain_clean_epochs:
            return "clean-pretrain"
        if epoch < self.pretrain_clean_epochs + self.pretrain_adv_epochs:
            return "pgd-at"
        return "safer"

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LoopConfig:
    """Batching, evaluation and checkpointing around the schedule."""

    batch_size: int = 64
    val_fraction: float = 0.1
    eval_robust_every: int = 1  # 0 evaluates robust accuracy only after the last epoch
    eval_size: int | None = None  # cap on validation samples used for robust accuracy
    eval_attack: AttackConfig = AttackConfig()
    checkpoint_every: int = 0  # extra checkpoints every N epochs; 0 disables
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"run.batch_size must be at least 1, got {self.batch_size}")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError(f"run.val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.eval_robust_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("run.eval_robust_every and run.checkpoint_every must be non-negative")
        if self.eval_size is not None and self.eval_size < 1:
            raise ConfigError(f"run.eval_size must be positive, got {self.eval_size}")
        self.eval_attack.validate()


@dataclass
class TrainResult:
    model: Model
    log: TrainLog
    reports: list[tuple[int, SharpnessReport]] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    val: Dataset | None = None
    completed: bool = True
    step_times: list[float] = field(default_factory=list)


def _stream(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _config_state(schedule, attack, opt_cfg, sharp_cfg, loop, augment_cfg) -> dict:
    return {
        "schedule": schedule.to_dict(),
        "attack": attack.to_dict(),
        "optimizer": opt_cfg.to_dict(),
        "sharpness": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(sharp_cfg).items()},
        "loop": {k: (v.to_dict() if isinstance(v, AttackConfig) else v) for k, v in asdict(loop).items()},
        "augment": asdict(augment_cfg) if augment_cfg is not None else None,
    }


def latest_checkpoint(out_dir) -> Path | None:
    """Most recent checkpoint in ``out_dir/checkpoints`` by recorded epoch."""
    ckpts = sorted(Path(out_dir, "checkpoints").glob("epoch*.ckpt"))
    return ckpts[-1] if ckpts else None


def rank_and_select(model: Model, train_ds: Dataset, schedule: SaferSchedule, sharp_cfg: SharpnessConfig,
                    attack: AttackConfig, seed: int, epoch: int) -> SharpnessReport:
    n = min(sharp_cfg.batch_size, len(train_ds))
    idx = np.random.default_rng([seed, epoch, 7]).choice(len(train_ds), size=n, replace=False)
    cfg = replace(sharp_cfg, fraction=schedule.fraction, top_k=schedule.top_k)
    return layer_sharpness_estimator(model, train_ds.images[idx], train_ds.labels[idx], cfg,
                                     replace(attack, seed=_stream(seed, epoch, 8)))


def train(model: Model, dataset: Dataset, schedule: SaferSchedule, attack: AttackConfig | None = None,
          opt_cfg: OptimizerConfig | None = None, sharp_cfg: SharpnessConfig | None = None,
          loop: LoopConfig | None = None, augment_cfg: AugmentConfig | None = AugmentConfig(),
          out_dir=None, resume=None, stop_after: int | None = None) -> TrainResult:
    """Run the full schedule on ``model`` in place.

    Every random draw comes from a stream keyed by ``(seed, epoch, batch)``,
    so a run resumed from any checkpoint replays the remaining epochs
    exactly. ``stop_after`` ends the run before that epoch (used to simulate
    interruption).
    """
    attack = attack or AttackConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    sharp_cfg = sharp_cfg or SharpnessConfig()
    loop = loop or LoopConfig()
    for c in (schedule, attack, opt_cfg, sharp_cfg, loop):
        c.validate()
    if augment_cfg is not None:
        augment_cfg.validate(model.cfg.image_size)
    seed = loop.seed
    out = Path(out_dir) if out_dir is not None else None
    config_state = _config_state(schedule, attack, opt_cfg, sharp_cfg, loop, augment_cfg)

    if loop.val_fraction > 0:
        train_ds, val_ds = train_val_split(dataset, loop.val_fraction, seed)
    else:
        train_ds, val_ds = dataset, dataset
    eval_ds = val_ds if loop.eval_size is None else val_ds.subset(np.arange(min(loop.eval_size, len(val_ds))))

    opt = SGD(opt_cfg.momentum, opt_cfg.weight_decay)
    horizon = opt_cfg.horizon or max(schedule.total_epochs, 1)
    base_trainable = set(model.trainable)
    selection: list[str] | None = None
    last_rank = -1
    start = 0
    tlog = TrainLog()
    result = TrainResult(model, tlog, val=val_ds)

    if resume is not None:
        saved, state, moments = load_checkpoint(resume)
        if state is None or state.get("config") != config_state:
            raise ConfigError(f"checkpoint {resume} was written by a different configuration")
        for k, p in saved.params.items():
            model.params[k].data = p.data
        model.trainable = set(saved.trainable)
        opt.load_state(moments)
        start = state["next_epoch"]
        selection = state["selection"]
        last_rank = state["last_rank"]
        base_trainable = set(state["base_trainable"])
        tlog = result.log = TrainLog.from_state(state["log"])

    def checkpoint(name: str, next_epoch: int) -> None:
        if out is None:
            return
        state = {"next_epoch": next_epoch, "selection": selection, "last_rank": last_rank,
                 "base_trainable": sorted(base_trainable), "log": tlog.state(), "config": config_state}
        result.checkpoints.append(save_checkpoint(out / "checkpoints" / name, model, state, opt.state()))

    def flush_logs() -> None:
        if out is not None:
            atomic_write(out / "train_log.csv", tlog.to_csv().encode())
            atomic_write(out / "train_log.jsonl", tlog.to_jsonl().encode())

    total = schedule.total_epochs
    for epoch in range(start, total):
        if stop_after is not None and epoch >= stop_after:
            result.completed = False
            flush_logs()
            return result
        t0 = time.perf_counter()
        phase = schedule.phase(epoch)
        lr = cosine_lr(opt_cfg.lr, epoch, horizon, opt_cfg.decay_factor)

        if phase == "safer":
            if selection is None or (schedule.dynamic and epoch - last_rank >= schedule.reselect_interval):
                model.trainable = set(base_trainable)
                report = rank_and_select(model, train_ds, schedule, sharp_cfg, attack, seed, epoch)
                before = set() if selection is None else _resolved(model, selection)
                selection, last_rank = [h.name for h in report.selected], epoch
                # momentum of layers entering the selection starts from zero
                opt.reset(n for name in _resolved(model, selection) - before
                          for n in model.registry[name].param_names)
                result.reports.append((epoch, report))
                if out is not None:
                    atomic_write(out / "reports" / f"sharpness_epoch{epoch:04d}.json", report.to_json().encode())
                set_trainable(model, selection)
                checkpoint(f"epoch{epoch:04d}.ckpt", epoch)
            else:
                set_trainable(model, selection)
        else:
            model.trainable = set(base_trainable)

        selected = [model.registry[n] for n in sorted(model.trainable, key=lambda n: model.registry[n].index)]
        losses, correct = [], 0
        order = np.random.default_rng([seed, epoch]).permutation(len(train_ds))
        for b, s in enumerate(range(0, len(order), loop.batch_size)):
            idx = order[s:s + loop.batch_size]
            xb, yb = train_ds.images[idx], train_ds.labels[idx]
            if augment_cfg is not None:
                xb = augment(xb, augment_cfg, seed=_stream(seed, epoch, b, 0))
            rng = np.random.default_rng(_stream(seed, epoch, b, 1))
            ts = time.perf_counter()
            if phase == "clean-pretrain":
                m = clean_step(model, opt, xb, yb, lr)
            elif opt_cfg.kind == "sgd":
                m = at_step(model, opt, xb, yb, attack, rng, lr)
            elif phase == "pgd-at":
                adv = pgd(model, xb, yb, attack, rng=rng, trace=False).adversarial
                m = sam_step(model, opt, adv, yb, selected, opt_cfg.rho, lr, joint=True)
            else:
                m = safer_step(model, opt, xb, yb, selected, attack, rng, opt_cfg.rho, lr,
                               joint=opt_cfg.sam_norm == "joint")
            result.step_times.append(time.perf_counter() - ts)
            losses.append(m.loss)
            correct += m.correct

        clean = accuracy(model, val_ds.images, val_ds.labels)
        last = epoch == total - 1
        robust = None
        if last or (loop.eval_robust_every and (epoch + 1) % loop.eval_robust_every == 0):
            robust = robust_accuracy(model, eval_ds.images, eval_ds.labels, loop.eval_attack)
        tlog.append(EpochRecord(epoch, phase, clean, robust, float(np.mean(losses)),
                                list(selection) if phase == "safer" else [], lr,
                                correct / len(train_ds), time.perf_counter() - t0))
        log.info("epoch %d %s lr=%.5f loss=%.4f clean=%.4f robust=%s", epoch, phase, lr,
                 np.mean(losses), clean, robust)
        if loop.checkpoint_every and (epoch + 1) % loop.checkpoint_every == 0 and not last:
            checkpoint(f"epoch{epoch + 1:04d}.ckpt", epoch + 1)
        flush_logs()

    checkpoint("final.ckpt", total)
    flush_logs()
    return result


def _resolved(model: Model, names) -> set[str]:
    """Handles that actually train when ``names`` are selected (adapters stand in for wrapped bases)."""
    probe = model.copy()
    set_trainable(probe, names)
    return probe.trainable


def evaluate(model: Model, ds: Dataset, attack: AttackConfig) -> tuple[float, float]:
    return accuracy(model, ds.images, ds.labels), robust_accuracy(model, ds.images, ds.labels, attack)


# -- ablations -----------------------------------------------------------------

AXES = ("layer_count", "pretrain_split", "dynamic_vs_fixed")


@dataclass
class SweepBase:
    """Everything needed to launch one training run from scratch."""

    model_cfg: ViTConfig
    dataset: Dataset
    schedule: SaferSchedule
    attack: AttackConfig = AttackConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    sharpness: SharpnessConfig = SharpnessConfig()
    loop: LoopConfig = LoopConfig()
    augment: AugmentConfig | None = AugmentConfig()
    test: Dataset | None = None


def schedule_for(base: SaferSchedule, axis: str, value) -> SaferSchedule:
    if axis == "layer_count":
        k = int(value)
        if k < 0:
            raise ConfigError(f"layer count must be non-negative, got {k}")
        if k == 0:  # no layer-selective phase: adversarial training with SAM throughout
            return replace(base, pretrain_adv_epochs=base.pretrain_adv_epochs + base.finetune_epochs,
                           finetune_epochs=0)
        return replace(base, top_k=k)
    if axis == "pretrain_split":
        adv_total = base.pretrain_adv_epochs + base.finetune_epochs
        k = int(value)
        if not 0 <= k <= adv_total:
            raise ConfigError(f"pretrain split must lie in [0, {adv_total}], got {k}")
        return replace(base, pretrain_adv_epochs=k, finetune_epochs=adv_total - k)
    if axis == "dynamic_vs_fixed":
        return replace(base, dynamic=_as_bool(value))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")


def _as_bool(v) -> bool:
    if isinstance(v, str):
        if v.lower() in ("dynamic", "true", "1", "yes"):
            return True
        if v.lower() in ("fixed", "false", "0", "no"):
            return False
        raise ConfigError(f"cannot read {v!r} as dynamic/fixed")
    return bool(v)


def run_point(base: SweepBase, schedule: SaferSchedule, out_dir=None) -> tuple[TrainResult, dict]:
    model = build_model(base.model_cfg)
    res = train(model, base.dataset, schedule, base.attack, base.optimizer, base.sharpness, base.loop,
                base.augment, out_dir=out_dir)
    test = base.test if base.test is not None else res.val
    clean, robust = evaluate(model, test, base.loop.eval_attack)
    return res, {"clean_acc": clean, "robust_acc": robust, "digest": model.digest()}


def ablation_sweep(base: SweepBase, axis: str, grid: Sequence, out_dir=None) -> list[dict]:
    """One full run per grid point with a shared seed. Failures are recorded, not raised."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    grid = list(grid)
    if not grid:
        raise ConfigError("ablation_sweep: grid is empty")
    rows = []
    for value in grid:
        row = {"axis": axis, "value": value, "clean_acc": None, "robust_acc": None, "error": None}
        try:
            schedule = schedule_for(base.schedule, axis, value)
            point_dir = None if out_dir is None else Path(out_dir) / f"{axis}={value}"
            res, metrics = run_point(base, schedule, point_dir)
            row.update(metrics)
            row["log"] = res.log
        except (SaferError, FloatingPointError) as exc:
            log.warning("sweep point %s=%s failed: %s", axis, value, exc)
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


def sweep_csv(rows: list[dict]) -> str:
    lines = ["axis,value,clean_acc,robust_acc,error"]
    for r in rows:
        cells = [r["axis"], str(r["value"]),
                 "" if r["clean_acc"] is None else repr(r["clean_acc"]),
                 "" if r["robust_acc"] is None else repr(r["robust_acc"]),
                 (r["error"] or "").replace(",", ";")]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
