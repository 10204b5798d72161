"""SGD with momentum, the cosine learning-rate schedule, and SAM perturbations."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

from safer.autodiff import Tensor
from safer.errors import ConfigError

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sam-over-sgd"  # or "sgd"
    lr: float = 0.015
    momentum: float = 0.9
    weight_decay: float = 0.0
    rho: float = 0.05
    decay_factor: float = 2.0
    horizon: int | None = None  # epochs until lr reaches 0; None means the run length
    sam_norm: str = "layer"  # "layer" (one epsilon per layer) or "joint"

    def validate(self) -> None:
        if self.kind not in ("sgd", "sam-over-sgd"):
            raise ConfigError(f"optimizer.kind must be 'sgd' or 'sam-over-sgd', got {self.kind!r}")
        if self.lr <= 0:
            raise ConfigError(f"optimizer.lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"optimizer.momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"optimizer.weight_decay must be non-negative, got {self.weight_decay}")
        if self.kind == "sam-over-sgd" and self.rho <= 0:
            raise ConfigError(f"optimizer.rho must be positive for sam-over-sgd, got {self.rho}")
        if self.rho < 0:
            raise ConfigError(f"optimizer.rho must be non-negative, got {self.rho}")
        if self.decay_factor <= 0:
            raise ConfigError(f"optimizer.decay_factor must be positive, got {self.decay_factor}")
        if self.horizon is not None and self.horizon < 1:
            raise ConfigError(f"optimizer.horizon must be at least 1, got {self.horizon}")
        if self.sam_norm not in ("layer", "joint"):
            raise ConfigError(f"optimizer.sam_norm must be 'layer' or 'joint', got {self.sam_norm!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(lr0: float, epoch: float, horizon: int, decay_factor: float = 2.0) -> float:
    """``lr0 * cos(pi t / 2T) ** decay_factor``, clamped to 0 past the horizon.

    Factor 2 is the usual half-period cosine ``lr0 (1 + cos(pi t / T)) / 2``;
    larger factors decay faster early on.
    """
    if epoch >= horizon:
        return 0.0
    c = math.cos(math.pi * max(epoch, 0.0) / (2.0 * horizon))
    return lr0 * c**decay_factor


class SGD:
    """Heavy-ball SGD. Buffers are keyed by parameter name and live on the base weights."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def reset(self, names: Iterable[str]) -> None:
        for n in names:
            self.buffers.pop(n, None)

    def step(self, params: Sequence[tuple[str, Tensor]], grads: Sequence[np.ndarray], lr: float) -> None:
        for (name, p), g in zip(params, grads):
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            p.data = p.data - lr * buf

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.buffers.items()}

    def load_state(self, buffers: dict[str, np.ndarray]) -> None:
        self.buffers = {k: np.array(v, dtype=np.float64) for k, v in buffers.items()}


def sam_epsilon(groups: Sequence[Sequence[np.ndarray]], rho: float, joint: bool = False) -> list[list[np.ndarray]]:
    """Ascent perturbations ``rho * g / ||g||`` for each group of gradient blocks.

    With ``joint=False`` each group (a layer) is normalised on its own so
    every nonzero group gets norm ``rho``; ``joint=True`` normalises the
    concatenation of all groups. A zero-norm group gets a zero perturbation.
    """
    norms = [math.sqrt(sum(float(np.vdot(g, g)) for g in grp)) for grp in groups]
    if joint:
        total = math.sqrt(sum(n * n for n in norms))
        norms = [total] * len(groups)
    out = []
    for grp, n in zip(groups, norms):
        if n == 0.0:
            log.warning("zero gradient in SAM ascent; perturbation set to zero")
            out.append([np.zeros_like(g) for g in grp])
        else:
            out.append([g * (rho / n) for g in grp])
    return out
