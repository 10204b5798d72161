"""Per-layer adversarial sharpness: gradient-norm estimator, ascent oracle, ranking."""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from itertools import combinations
from typing import Iterable, Sequence

import numpy as np

from safer.attacks import AttackConfig, pgd
from safer.autodiff import cross_entropy, grad, no_grad
from safer.errors import ConfigError, ContractError
from safer.models.vit import LayerHandle, Model

log = __import__("logging").getLogger(__name__)


@dataclass(frozen=True)
class SharpnessConfig:
    rho: float = 0.05
    batch_size: int = 50
    oracle_steps: int = 10
    fraction: float = 0.05
    seed: int = 0
    microbatch: int = 1  # per-sample norms; set to batch_size for one batch-summed norm
    normalize: bool = False  # divide by sqrt(param_count)
    rank_on: str = "base"  # PEFT models: rank base weights or adapter weights
    roles: tuple[str, ...] | None = None  # rankable roles; None means all weight-bearing roles
    top_k: int | None = None  # overrides ``fraction`` when set

    def validate(self) -> None:
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError(f"sharpness.fraction must lie in (0, 1], got {self.fraction}")
        if self.rho <= 0:
            raise ConfigError(f"sharpness.rho must be positive, got {self.rho}")
        if self.batch_size < 1:
            raise ConfigError(f"sharpness.batch_size must be at least 1, got {self.batch_size}")
        if self.oracle_steps < 1:
            raise ConfigError(f"sharpness.oracle_steps must be at least 1, got {self.oracle_steps}")
        if self.microbatch < 1:
            raise ConfigError(f"sharpness.microbatch must be at least 1, got {self.microbatch}")
        if self.rank_on not in ("base", "adapter"):
            raise ConfigError(f"sharpness.rank_on must be 'base' or 'adapter', got {self.rank_on!r}")
        if self.top_k is not None and self.top_k < 1:
            raise ConfigError(f"sharpness.top_k must be positive, got {self.top_k}")


@dataclass
class SharpnessReport:
    per_layer: list[tuple[LayerHandle, float]]
    ranking: list[LayerHandle]
    selected: list[LayerHandle]
    batch_digest: str
    method: str  # "estimator" or "oracle"
    rho: float = 0.0
    batch_size: int = 0
    microbatch: int = 1
    wall_time: float = 0.0
    flags: list[str] = field(default_factory=list)
    failed: list[str] = field(default_factory=list)

    def gammas(self) -> np.ndarray:
        return np.array([g for _, g in self.per_layer])

    def top(self, k: int) -> list[LayerHandle]:
        return self.ranking[:k]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "rho": self.rho,
            "batch_size": self.batch_size,
            "microbatch": self.microbatch,
            "batch_digest": self.batch_digest,
            "wall_time": self.wall_time,
            "layers": [{"index": h.index, "name": h.name, "role": h.role,
                        "gamma": None if not math.isfinite(g) else g} for h, g in self.per_layer],
            "ranking": [h.index for h in self.ranking],
            "selected": [h.index for h in self.selected],
            "flags": list(self.flags),
            "failed": list(self.failed),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rank_of = {h.index: r for r, h in enumerate(self.ranking, 1)}
        sel = {h.index for h in self.selected}
        lines = [f"{self.method} sharpness  rho={self.rho:g}  batch={self.batch_size}  "
                 f"microbatch={self.microbatch}  time={self.wall_time:.3f}s",
                 f"{'idx':>4} {'layer':<22} {'role':<12} {'gamma':>14} {'rank':>5} sel"]
        for h, g in self.per_layer:
            lines.append(f"{h.index:>4} {h.name:<22} {h.role:<12} {g:>14.6g} {rank_of[h.index]:>5} "
                         f"{'*' if h.index in sel else ''}")
        return "\n".join(lines)


def batch_digest(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images, dtype="<f8").tobytes())
    h.update(np.ascontiguousarray(labels, dtype="<i8").tobytes())
    return h.hexdigest()


def num_selected(fraction: float, rankable: int) -> int:
    """``max(1, round(fraction * rankable))`` with halves rounded up."""
    return max(1, int(math.floor(fraction * rankable + 0.5)))


def rank_layers(per_layer: Sequence[tuple[LayerHandle, float]]) -> list[LayerHandle]:
    """Descending gamma; ties (and failed NaN entries, last) by lower index."""
    def key(item):
        h, g = item
        return (0 if math.isfinite(g) else 1, -g if math.isfinite(g) else 0.0, h.index)

    return [h for h, _ in sorted(per_layer, key=key)]


def select_top_k(report: SharpnessReport, fraction: float | None = None, k: int | None = None) -> list[LayerHandle]:
    if not report.per_layer:
        raise ContractError("select_top_k: empty report")
    if k is None:
        if fraction is None or not 0.0 < fraction <= 1.0:
            raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
        k = num_selected(fraction, len(report.per_layer))
    return report.ranking[:min(k, len(report.ranking))]


def rankable_handles(model: Model, cfg: SharpnessConfig) -> list[LayerHandle]:
    return model.registry.rankable(cfg.roles, adapters=(cfg.rank_on == "adapter"))


def adversarial_batch(model: Model, images, labels, attack: AttackConfig | None, seed: int) -> np.ndarray:
    if attack is None:
        return np.asarray(images, dtype=np.float64)
    return pgd(model, images, labels, attack, rng=np.random.default_rng([attack.seed, seed]), trace=False).adversarial


def _microbatches(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(s + size, n))


def layer_grad_norms(model: Model, x: np.ndarray, labels: np.ndarray, handles: Sequence[LayerHandle],
                     microbatch: int = 1, loss_scale: float = 1.0) -> np.ndarray:
    """``sum over microbatches of ||d loss_mb / d w_i||_2`` for each handle.

    ``loss_mb`` is the summed cross-entropy of one microbatch. With
    ``microbatch=1`` a single backward pass yields all per-sample gradients
    when the model supports it; otherwise microbatches are looped.
    """
    params = [model.params[n] for h in handles for n in h.param_names]
    owner = np.repeat(np.arange(len(handles)), [len(h.param_names) for h in handles])
    out = np.zeros(len(handles))
    if microbatch == 1 and not model.adapters:
        loss = cross_entropy(model(x), labels, reduction="sum") * loss_scale
        grads = grad(loss, params, per_sample=True)
        sq = np.zeros((len(x), len(handles)))
        for j, g in enumerate(grads):
            sq[:, owner[j]] += (g.reshape(len(x), -1) ** 2).sum(axis=1)
        return np.sqrt(sq).sum(axis=0)
    for sl in _microbatches(len(x), microbatch):
        loss = cross_entropy(model(x[sl]), labels[sl], reduction="sum") * loss_scale
        grads = grad(loss, params)
        sq = np.zeros(len(handles))
        for j, g in enumerate(grads):
            sq[owner[j]] += float((g**2).sum())
        out += np.sqrt(sq)
    return out


def _finish(model, cfg, handles, gammas, images, labels, method, t0, failed=()) -> SharpnessReport:
    if cfg.normalize:
        gammas = np.array([g / math.sqrt(h.param_count) for h, g in zip(handles, gammas)])
    per_layer = [(h, float(g)) for h, g in zip(handles, gammas)]
    ranking = rank_layers(per_layer)
    k = cfg.top_k if cfg.top_k is not None else num_selected(cfg.fraction, len(handles))
    flags = []
    finite = np.array([g for g in gammas if math.isfinite(g)])
    if finite.size and np.all(finite == 0):
        flags.append("all-zero-gradients")
    if cfg.microbatch > 1:
        flags.append(f"microbatch-{cfg.microbatch}")
    if cfg.normalize:
        flags.append("normalized")
    return SharpnessReport(per_layer, ranking, ranking[:min(k, len(ranking))], batch_digest(images, labels),
                           method, cfg.rho, len(labels), cfg.microbatch, time.perf_counter() - t0, flags,
                           list(failed))


def layer_sharpness_estimator(model: Model, images, labels, cfg: SharpnessConfig | None = None,
                              attack: AttackConfig | None = AttackConfig(), adv_images=None,
                              seed: int = 0) -> SharpnessReport:
    """Rank layers by summed per-sample adversarial gradient norms.

    ``attack=None`` measures on the given images directly; ``adv_images``
    skips crafting and uses a precomputed adversarial batch.
    """
    cfg = cfg or SharpnessConfig()
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigError("layer_sharpness_estimator: empty batch")
    t0 = time.perf_counter()
    x = adv_images if adv_images is not None else adversarial_batch(model, images, labels, attack, seed)
    handles = rankable_handles(model, cfg)
    gammas = layer_grad_norms(model, x, labels, handles, cfg.microbatch)
    return _finish(model, cfg, handles, gammas, images, labels, "estimator", t0)


def ascent_gap(params: Sequence, loss_fn, rho: float, steps: int, step: float) -> float | None:
    """Projected normalized-gradient ascent of ``loss_fn()`` over ``params`` inside the rho-ball.

    Returns the best loss gap seen along the path (never below zero), or
    None when a loss turns non-finite. Parameter arrays are restored from
    saved copies on exit.
    """
    base = [p.data.copy() for p in params]
    try:
        with no_grad():
            l0 = loss_fn().item()
        best = 0.0
        eps = [np.zeros_like(b) for b in base]
        for _ in range(steps):
            loss = loss_fn()
            if not math.isfinite(loss.item()):
                return None
            gs = grad(loss, list(params))
            gn = math.sqrt(sum(float((g**2).sum()) for g in gs))
            if gn == 0.0:
                break
            eps = [e + (step / gn) * g for e, g in zip(eps, gs)]
            en = math.sqrt(sum(float((e**2).sum()) for e in eps))
            if en > rho:
                eps = [e * (rho / en) for e in eps]
            for p, b, e in zip(params, base, eps):
                p.data = b + e
            with no_grad():
                gap = loss_fn().item() - l0
            if not math.isfinite(gap):
                return None
            best = max(best, gap)
        return best
    finally:
        for p, b in zip(params, base):
            p.data = b


def layer_sharpness_oracle(model: Model, images, labels, cfg: SharpnessConfig | None = None,
                           attack: AttackConfig | None = AttackConfig(), adv_images=None,
                           seed: int = 0) -> SharpnessReport:
    """Explicit per-layer maximisation of the loss gap inside the rho-ball.

    Each microbatch gets its own ascent starting from zero perturbation; the
    best gap along the path (never below zero) is summed over microbatches.
    Layer weights are restored from saved copies afterwards.
    """
    cfg = cfg or SharpnessConfig()
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        raise ConfigError("layer_sharpness_oracle: empty batch")
    t0 = time.perf_counter()
    x = adv_images if adv_images is not None else adversarial_batch(model, images, labels, attack, seed)
    handles = rankable_handles(model, cfg)
    gammas = np.zeros(len(handles))
    failed = []
    step = cfg.rho / cfg.oracle_steps
    for i, h in enumerate(handles):
        total = 0.0
        params = [model.params[n] for n in h.param_names]
        for sl in _microbatches(len(x), cfg.microbatch):
            def loss_fn(sl=sl):
                return cross_entropy(model(x[sl]), labels[sl], reduction="sum")

            gap = ascent_gap(params, loss_fn, cfg.rho, cfg.oracle_steps, step)
            if gap is None:
                gap = ascent_gap(params, loss_fn, cfg.rho, cfg.oracle_steps, step / 2)
            if gap is None:
                total = float("nan")
                failed.append(h.name)
                log.warning("oracle ascent failed for %s", h.name)
                break
            total += gap
        gammas[i] = total
    return _finish(model, cfg, handles, gammas, images, labels, "oracle", t0, failed)


def spearman(a: Sequence[float], b: Sequence[float]) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(a, b).statistic)


@dataclass
class StabilityResult:
    batch_size: int
    top_sets: list[tuple[int, ...]]
    pair_agreement: float  # fraction of draw pairs with identical top-K sets
    modal_count: int  # draws sharing the most common top-K set
    selection_frequency: dict[str, float]
    low_confidence: bool
    wall_times: list[float]

    def to_dict(self) -> dict:
        return {"batch_size": self.batch_size, "top_sets": [list(s) for s in self.top_sets],
                "pair_agreement": self.pair_agreement, "modal_count": self.modal_count,
                "selection_frequency": self.selection_frequency, "low_confidence": self.low_confidence,
                "wall_times": self.wall_times}


def low_confidence(gamma_sets: Sequence[Sequence[float]], pair_agreement: float) -> bool:
    """True when draws mostly disagree or the mean gammas are nearly uniform (coefficient of variation < 0.1)."""
    g = np.mean(np.asarray(gamma_sets, dtype=float), axis=0)
    cv = float(np.std(g) / np.mean(g)) if np.mean(g) > 0 else 0.0
    return cv < 0.1 or pair_agreement < 0.5


def ranking_stability(model: Model, dataset, cfg: SharpnessConfig, draws: int = 5,
                      batch_sizes: Iterable[int] = (50,), attack: AttackConfig | None = AttackConfig(),
                      k: int | None = None, seed: int = 0, indices=None) -> list[StabilityResult]:
    """Repeat the estimator on independent random batches and compare top-K sets.

    ``indices`` (one index array per draw) pins the batches explicitly.
    """
    if draws < 2:
        raise ConfigError("ranking_stability: need at least 2 draws")
    results = []
    for bs in batch_sizes:
        if bs > len(dataset):
            raise ConfigError(f"ranking_stability: dataset of {len(dataset)} is smaller than batch {bs}")
        rng = np.random.default_rng([seed, bs])
        tops, times, gamma_sets = [], [], []
        for d in range(draws):
            idx = indices[d] if indices is not None else rng.choice(len(dataset), size=bs, replace=False)
            c = SharpnessConfig(**{**cfg.__dict__, "batch_size": bs})
            rep = layer_sharpness_estimator(model, dataset.images[idx], dataset.labels[idx], c, attack, seed=d)
            top = select_top_k(rep, cfg.fraction, k if k is not None else cfg.top_k)
            tops.append(tuple(sorted(h.index for h in top)))
            times.append(rep.wall_time)
            gamma_sets.append(rep.gammas())
        pairs = list(combinations(range(draws), 2))
        agree = sum(tops[i] == tops[j] for i, j in pairs) / len(pairs)
        modal = max(tops.count(t) for t in set(tops))
        names = {h.index: h.name for h in rankable_handles(model, cfg)}
        freq = {names[i]: sum(i in t for t in tops) / draws for i in sorted(names)}
        results.append(StabilityResult(bs, tops, agree, modal, freq, low_confidence(gamma_sets, agree), times))
    return results
