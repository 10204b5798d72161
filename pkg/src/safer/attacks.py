"""FGSM / PGD adversarial examples under L-inf and L2 budgets."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from safer.autodiff import Tensor, cross_entropy, grad, no_grad
from safer.errors import ConfigError, DimensionError, DomainError


@dataclass(frozen=True)
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 0.03
    alpha: float = 0.007
    steps: int = 20
    random_start: bool = True
    seed: int = 0

    def validate(self) -> None:
        if self.norm not in ("linf", "l2"):
            raise ConfigError(f"attack.norm must be 'linf' or 'l2', got {self.norm!r}")
        if self.epsilon < 0:
            raise ConfigError(f"attack.epsilon must be non-negative, got {self.epsilon}")
        if self.steps < 0:
            raise ConfigError(f"attack.steps must be non-negative, got {self.steps}")
        if self.steps > 0 and self.alpha <= 0:
            raise ConfigError(f"attack.alpha must be positive when steps > 0, got {self.alpha}")

    def to_dict(self) -> dict:
        return asdict(self)


# Higher-budget and L2 evaluation settings.
PRESETS = {
    "pgd20": AttackConfig(),
    "pgd50": AttackConfig(steps=50),
    "pgd100": AttackConfig(steps=100),
    "pgd20-eps0.05": AttackConfig(epsilon=0.05),
    "pgd20-eps0.07": AttackConfig(epsilon=0.07),
    "pgd20-l2": AttackConfig(norm="l2"),
    "fgsm": AttackConfig(alpha=0.03, steps=1, random_start=False),
    "clean": AttackConfig(steps=0, random_start=False),
}


@dataclass
class AdvBatch:
    clean: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    loss_trace: list[float] = field(default_factory=list)


def _per_sample_norm(x: np.ndarray) -> np.ndarray:
    return np.sqrt((x.reshape(len(x), -1) ** 2).sum(axis=1))


def _project(delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    if cfg.norm == "linf":
        return np.clip(delta, -cfg.epsilon, cfg.epsilon)
    norms = _per_sample_norm(delta)
    factor = np.minimum(1.0, cfg.epsilon / np.maximum(norms, 1e-300))
    return delta * factor.reshape((-1,) + (1,) * (delta.ndim - 1))


def _random_start(shape, cfg: AttackConfig, rng: np.random.Generator) -> np.ndarray:
    if cfg.norm == "linf":
        return rng.uniform(-cfg.epsilon, cfg.epsilon, size=shape)
    n = shape[0]
    dim = int(np.prod(shape[1:]))
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = rng.random(n) ** (1.0 / dim) * cfg.epsilon
    return (direction * radius[:, None]).reshape(shape)


def input_gradient(model, x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradient of the summed cross-entropy w.r.t. the input, and the mean loss."""
    xt = Tensor(x, requires_grad=True)
    loss = cross_entropy(model(xt), labels, reduction="sum")
    (g,) = grad(loss, [xt])
    return g, loss.item() / len(x)


def mean_loss(model, x: np.ndarray, labels: np.ndarray) -> float:
    with no_grad():
        return cross_entropy(model(x), labels).item()


def pgd(model, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig | None = None,
        rng: np.random.Generator | None = None, trace: bool = True) -> AdvBatch:
    """Untargeted PGD on the true labels.

    Model parameters are only read: gradients are taken with respect to the
    input. Each step clips ``x + delta`` to [0, 1] and then re-projects
    ``delta`` onto the budget ball.
    """
    cfg = cfg or AttackConfig()
    cfg.validate()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if images.size and (images.min() < 0.0 or images.max() > 1.0):
        raise DomainError("pgd: images must lie in [0, 1]")
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    if cfg.epsilon == 0.0:
        out = AdvBatch(images, images.copy(), labels)
        if trace:
            out.loss_trace = [mean_loss(model, images, labels)] * cfg.steps
        return out

    delta = np.zeros_like(images)
    if cfg.random_start:
        delta = _random_start(images.shape, cfg, rng)
        delta = np.clip(images + delta, 0.0, 1.0) - images
    losses = []
    for _ in range(cfg.steps):
        g, _ = input_gradient(model, images + delta, labels)
        if cfg.norm == "linf":
            delta = delta + cfg.alpha * np.sign(g)
        else:
            gn = _per_sample_norm(g)
            ok = gn > 0  # zero-gradient samples keep their delta this step
            step = np.zeros_like(g)
            step[ok] = g[ok] / gn[ok].reshape((-1,) + (1,) * (g.ndim - 1))
            delta = delta + cfg.alpha * step
        delta = np.clip(images + delta, 0.0, 1.0) - images
        delta = _project(delta, cfg)
        if trace:
            losses.append(mean_loss(model, images + delta, labels))
    adv = images + delta
    # projection shrinks toward the clean image, so adv stays inside [0, 1] up to rounding
    adv = np.clip(adv, 0.0, 1.0)
    return AdvBatch(images, adv, labels, losses)


def accuracy(model, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    correct = 0
    with no_grad():
        for s in range(0, len(labels), batch_size):
            logits = model(images[s:s + batch_size]).data
            correct += int((logits.argmax(axis=1) == labels[s:s + batch_size]).sum())
    return correct / len(labels)


def robust_accuracy(model, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
                    batch_size: int = 256, attacker=None) -> float:
    """Accuracy of ``model`` on examples crafted against ``attacker`` (default: itself).

    Batch ``k`` uses the random stream ``SeedSequence([cfg.seed, k])``.
    """
    attacker = attacker or model
    correct = 0
    for k, s in enumerate(range(0, len(labels), batch_size)):
        xb, yb = images[s:s + batch_size], labels[s:s + batch_size]
        adv = pgd(attacker, xb, yb, cfg, rng=np.random.default_rng([cfg.seed, k]), trace=False).adversarial
        with no_grad():
            correct += int((model(adv).data.argmax(axis=1) == yb).sum())
    return correct / len(labels)


def attack_convergence(model, dataset, cfg: AttackConfig, step_grid, batch_size: int = 256) -> list[dict]:
    """Robust accuracy for each step count, holding epsilon, alpha and seed fixed."""
    grid = list(step_grid)
    if not grid:
        raise ConfigError("attack_convergence: step grid is empty")
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ConfigError("attack_convergence: step grid must be ascending")
    rows = []
    for steps in grid:
        c = replace(cfg, steps=int(steps))
        rows.append({"steps": int(steps),
                     "robust_acc": robust_accuracy(model, dataset.images, dataset.labels, c, batch_size)})
    return rows


def transfer_eval(attacker, victim, dataset, cfg: AttackConfig, batch_size: int = 256) -> float:
    """Accuracy of ``victim`` on adversarial examples crafted on ``attacker``."""
    if attacker.cfg.image_size != victim.cfg.image_size or attacker.cfg.channels != victim.cfg.channels:
        raise DimensionError(
            f"transfer_eval: attacker input {attacker.cfg.channels}x{attacker.cfg.image_size}^2 "
            f"differs from victim input {victim.cfg.channels}x{victim.cfg.image_size}^2")
    return robust_accuracy(victim, dataset.images, dataset.labels, cfg, batch_size, attacker=attacker)


def eval_record(model_id: str, cfg: AttackConfig, clean_acc: float, robust_acc: float, n_samples: int) -> dict:
    """One evaluation result in the on-disk record layout."""
    return {"model_id": model_id,
            "attack": {"norm": cfg.norm, "eps": cfg.epsilon, "alpha": cfg.alpha, "steps": cfg.steps},
            "clean_acc": clean_acc, "robust_acc": robust_acc, "n_samples": n_samples, "seed": cfg.seed}
