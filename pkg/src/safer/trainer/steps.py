"""Single optimisation steps: clean, plain adversarial, and SAM on a layer subset."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from safer.attacks import AttackConfig, pgd
from safer.autodiff import backward, cross_entropy, zero_grads
from safer.errors import ContractError
from safer.models.vit import LayerHandle, Model
from safer.trainer.optim import SGD, sam_epsilon

log = logging.getLogger(__name__)


@dataclass
class StepMetrics:
    loss: float
    perturbed_loss: float | None = None
    correct: int = 0
    skipped: bool = False


def _groups(model: Model, handles: Sequence[LayerHandle]) -> list[list[tuple[str, object]]]:
    return [[(n, model.params[n]) for n in h.param_names] for h in handles]


def _loss_and_grads(model: Model, x, labels, params) -> tuple[float, list[np.ndarray], np.ndarray]:
    tensors = [p for _, p in params]
    zero_grads(tensors)
    logits = model(x)
    loss = cross_entropy(logits, labels)
    backward(loss, inputs=tensors)
    grads = [p.grad for p in tensors]
    zero_grads(tensors)
    return loss.item(), grads, logits.data


def sam_perturbation(model: Model, selected: Sequence[LayerHandle], adv_images, labels, rho: float,
                     joint: bool = False) -> tuple[list[list[np.ndarray]], float, list[np.ndarray]]:
    """Per-layer ascent directions on the adversarial batch.

    Runs one backward pass of the adversarial loss and returns
    ``(epsilons per handle, loss, flat gradient list)``.
    """
    groups = _groups(model, selected)
    flat = [item for grp in groups for item in grp]
    loss, grads, _ = _loss_and_grads(model, adv_images, labels, flat)
    it = iter(grads)
    grad_groups = [[next(it) for _ in grp] for grp in groups]
    return sam_epsilon(grad_groups, rho, joint), loss, grads


def clean_step(model: Model, opt: SGD, images, labels, lr: float) -> StepMetrics:
    params = model.trainable_params()
    loss, grads, logits = _loss_and_grads(model, images, labels, params)
    correct = int((logits.argmax(axis=1) == labels).sum())
    if not math.isfinite(loss):
        log.warning("non-finite clean loss; update skipped")
        return StepMetrics(loss, correct=correct, skipped=True)
    opt.step(params, grads, lr)
    return StepMetrics(loss, correct=correct)


def at_step(model: Model, opt: SGD, images, labels, attack: AttackConfig, rng: np.random.Generator,
            lr: float) -> StepMetrics:
    """PGD adversarial training step on every trainable layer: one backward pass."""
    adv = pgd(model, images, labels, attack, rng=rng, trace=False).adversarial
    return clean_step(model, opt, adv, labels, lr)


def sam_step(model: Model, opt: SGD, adv_images, labels, handles: Sequence[LayerHandle], rho: float,
             lr: float, joint: bool = False) -> StepMetrics:
    """SAM update of ``handles`` on a fixed adversarial batch: exactly two backward passes.

    The perturbation is removed by reassigning the saved base arrays, so the
    weights are restored bit-exactly before the SGD update is applied.
    """
    if not handles:
        raise ContractError("sam_step: no layers selected")
    groups = _groups(model, handles)
    flat = [item for grp in groups for item in grp]
    eps, loss, _ = sam_perturbation(model, handles, adv_images, labels, rho, joint)
    base = [p.data for _, p in flat]
    try:
        for (_, p), b, e in zip(flat, base, (e for grp in eps for e in grp)):
            p.data = b + e
        ploss, grads, logits = _loss_and_grads(model, adv_images, labels, flat)
    finally:
        for (_, p), b in zip(flat, base):
            p.data = b
    correct = int((logits.argmax(axis=1) == labels).sum())
    if not math.isfinite(ploss):
        log.warning("non-finite loss at the perturbed point; update skipped")
        return StepMetrics(loss, ploss, correct, skipped=True)
    opt.step(flat, grads, lr)
    return StepMetrics(loss, ploss, correct)


def safer_step(model: Model, opt: SGD, images, labels, selected: Sequence[LayerHandle], attack: AttackConfig,
               rng: np.random.Generator, rho: float, lr: float, joint: bool = False) -> StepMetrics:
    """Craft PGD examples on the current weights, then SAM-update only ``selected``.

    The same adversarial batch is used for both SAM passes.
    """
    frozen = [h.name for h in selected if h.name not in model.trainable]
    if frozen:
        raise ContractError(f"safer_step: selected layers are not trainable: {frozen}")
    adv = pgd(model, images, labels, attack, rng=rng, trace=False).adversarial
    return sam_step(model, opt, adv, labels, selected, rho, lr, joint)
