"""LoRA and DoRA adapters for the linear layers of a :class:`Model`."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from safer.autodiff import Tensor, ops
from safer.errors import ConfigError


@dataclass(frozen=True)
class AdapterConfig:
    kind: str = "lora"
    rank: int = 4
    alpha: float = 8.0
    target_roles: frozenset = field(default_factory=lambda: frozenset({"attn-qkv", "attn-proj", "mlp-fc1", "mlp-fc2"}))
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in ("lora", "dora"):
            raise ConfigError(f"adapter.kind must be 'lora' or 'dora', got {self.kind!r}")
        if self.rank < 1:
            raise ConfigError(f"adapter.rank must be positive, got {self.rank}")
        from safer.models.vit import LINEAR_ROLES

        unknown = set(self.target_roles) - set(LINEAR_ROLES) - {"patch-embed"}
        if unknown:
            raise ConfigError(f"adapter.target_roles contains non-linear roles {sorted(unknown)}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "rank": self.rank, "alpha": self.alpha,
                "target_roles": sorted(self.target_roles), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AdapterConfig":
        return cls(d["kind"], int(d["rank"]), float(d["alpha"]), frozenset(d["target_roles"]), int(d["seed"]))


def column_norms(w: Tensor) -> Tensor:
    """L2 norm of each output column of a ``[in, out]`` weight."""
    return ops.sqrt((w * w).sum(axis=0))


@dataclass(frozen=True)
class AdapterSpec:
    kind: str
    scale: float

    def apply(self, model, x: Tensor, name: str) -> Tensor:
        p = model.params
        w0, bias = p[name + ".weight"], p[name + ".bias"]
        a, b = p[name + ".lora_A"], p[name + ".lora_B"]
        if self.kind == "lora":
            # base term first, so a zero update leaves the output bit-identical
            base = x @ w0 + bias
            return base + ((x @ a) @ b) * self.scale
        direction = w0 + (a @ b) * self.scale
        w = direction * (p[name + ".dora_m"] / column_norms(direction))
        return x @ w + bias


def wrap_adapters(model, acfg: AdapterConfig):
    """Return a copy of ``model`` whose targeted linear layers carry adapters.

    The wrapped base weights stay in the registry but become permanently
    frozen; each gets an adapter handle placed right after it.
    """
    from safer.models.vit import LayerHandle, LayerRegistry

    acfg.validate()
    out = model.copy()
    rng = np.random.default_rng(acfg.seed)
    targets = [h for h in out.registry if h.role in acfg.target_roles and not h.is_adapter]
    for h in targets:
        w = out.params[h.name + ".weight"].data
        if acfg.rank > min(w.shape):
            raise ConfigError(f"adapter.rank {acfg.rank} exceeds min dimension {min(w.shape)} of {h.name}")
    handles = []
    for h in out.registry:
        handles.append(h)
        if h not in targets:
            continue
        fan_in, fan_out = out.params[h.name + ".weight"].shape
        new = {
            h.name + ".lora_A": rng.standard_normal((fan_in, acfg.rank)) * fan_in**-0.5,
            h.name + ".lora_B": np.zeros((acfg.rank, fan_out)),
        }
        if acfg.kind == "dora":
            new[h.name + ".dora_m"] = column_norms(out.params[h.name + ".weight"]).data.copy()
        for k, v in new.items():
            out.params[k] = Tensor(v, requires_grad=True, name=k)
        handles.append(LayerHandle(
            -1, h.name + "." + acfg.kind, h.role, int(sum(v.size for v in new.values())),
            tuple(new), adapter_of=h.name))
        out.adapters[h.name] = AdapterSpec(acfg.kind, acfg.alpha / acfg.rank)
    out.registry = LayerRegistry(
        LayerHandle(i, h.name, h.role, h.param_count, h.param_names, h.adapter_of) for i, h in enumerate(handles))
    out.adapter_cfg = acfg
    wrapped = {h.name for h in targets}
    out.trainable = {h.name for h in out.registry if h.name not in wrapped}
    return out
