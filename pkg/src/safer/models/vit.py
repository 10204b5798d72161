"""Tiny Vision Transformer with a named layer registry."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterable, Iterator

import numpy as np

from safer.autodiff import Tensor, as_tensor, ops
from safer.errors import ConfigError, DimensionError, RegistryError

ROLES = ("patch-embed", "attn-qkv", "attn-proj", "mlp-fc1", "mlp-fc2", "norm1", "norm2", "head")
WEIGHT_ROLES = frozenset({"patch-embed", "attn-qkv", "attn-proj", "mlp-fc1", "mlp-fc2", "head"})
LINEAR_ROLES = frozenset({"attn-qkv", "attn-proj", "mlp-fc1", "mlp-fc2"})
BLOCK_LAYOUT = (
    ("norm1", "norm1"),
    ("attn.qkv", "attn-qkv"),
    ("attn.proj", "attn-proj"),
    ("norm2", "norm2"),
    ("mlp.fc1", "mlp-fc1"),
    ("mlp.fc2", "mlp-fc2"),
)


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 16
    patch_size: int = 4
    channels: int = 3
    embed_dim: int = 32
    depth: int = 3
    heads: int = 4
    mlp_ratio: float = 2.0
    num_classes: int = 10
    seed: int = 0

    def validate(self) -> None:
        for name in ("image_size", "patch_size", "channels", "embed_dim", "depth", "heads", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(
                f"model.image_size ({self.image_size}) must be divisible by model.patch_size ({self.patch_size})")
        if self.embed_dim % self.heads:
            raise ConfigError(f"model.embed_dim ({self.embed_dim}) must be divisible by model.heads ({self.heads})")
        if self.mlp_ratio <= 0 or self.hidden_dim < 1:
            raise ConfigError(f"model.mlp_ratio must give a positive hidden width, got {self.mlp_ratio}")
        if self.num_classes < 2:
            raise ConfigError("model.num_classes must be at least 2")

    @property
    def hidden_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def registry_size(self) -> int:
        return 1 + 6 * self.depth + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LayerHandle:
    index: int
    name: str
    role: str
    param_count: int
    param_names: tuple[str, ...] = field(default=(), compare=False)
    adapter_of: str | None = None

    @property
    def is_adapter(self) -> bool:
        return self.adapter_of is not None


class LayerRegistry:
    """Ordered collection of layer handles, indexed by forward order."""

    def __init__(self, handles: Iterable[LayerHandle]):
        self.handles: list[LayerHandle] = list(handles)
        self._by_name = {h.name: h for h in self.handles}
        if len(self._by_name) != len(self.handles):
            raise RegistryError("duplicate layer names in registry")

    def __len__(self) -> int:
        return len(self.handles)

    def __iter__(self) -> Iterator[LayerHandle]:
        return iter(self.handles)

    def __getitem__(self, key: int | str) -> LayerHandle:
        if isinstance(key, str):
            try:
                return self._by_name[key]
            except KeyError:
                raise RegistryError(f"unknown layer {key!r}") from None
        return self.handles[key]

    def __contains__(self, handle) -> bool:
        name = handle.name if isinstance(handle, LayerHandle) else handle
        return name in self._by_name and (
            not isinstance(handle, LayerHandle) or self._by_name[name] == handle)

    def names(self) -> list[str]:
        return [h.name for h in self.handles]

    def rankable(self, roles: Iterable[str] | None = None, adapters: bool = False) -> list[LayerHandle]:
        """Handles eligible for sharpness ranking.

        By default, the weight-bearing base layers. With ``adapters=True``,
        adapter handles stand in for the base layers they wrap.
        """
        roles = WEIGHT_ROLES if roles is None else frozenset(roles)
        wrapped = {h.adapter_of for h in self.handles if h.is_adapter}
        out = []
        for h in self.handles:
            if h.role not in roles:
                continue
            if h.is_adapter:
                if adapters:
                    out.append(h)
            elif not (adapters and h.name in wrapped):
                out.append(h)
        return out


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Model:
    """Parameters, registry and forward pass of a tiny ViT.

    Parameters are stored flat in ``params`` under dotted names; every one
    of them belongs to exactly one registry handle.
    """

    def __init__(self, cfg: ViTConfig, params: dict[str, Tensor], registry: LayerRegistry):
        self.cfg = cfg
        self.params = params
        self.registry = registry
        self.adapters: dict[str, "AdapterSpec"] = {}
        self.adapter_cfg = None
        self.trainable: set[str] = {h.name for h in registry}
        self._cls_idx: dict[int, np.ndarray] = {}

    # -- parameter access -------------------------------------------------
    def handle_params(self, handle: LayerHandle | str) -> list[Tensor]:
        h = self.registry[handle if isinstance(handle, str) else handle.name]
        return [self.params[n] for n in h.param_names]

    def trainable_handles(self) -> list[LayerHandle]:
        return [h for h in self.registry if h.name in self.trainable]

    def trainable_params(self) -> list[tuple[str, Tensor]]:
        return [(n, self.params[n]) for h in self.trainable_handles() for n in h.param_names]

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for k, v in snap.items():
            self.params[k].data = v.copy()

    def digest(self, handle: LayerHandle | str | None = None) -> str:
        """SHA-256 over parameter bytes (one handle, or the whole model)."""
        h = hashlib.sha256()
        names = self.params.keys() if handle is None else self.registry[
            handle if isinstance(handle, str) else handle.name].param_names
        for n in names:
            h.update(n.encode())
            h.update(self.params[n].data.astype("<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "Model":
        params = {k: Tensor(v.data, requires_grad=True, name=k) for k, v in self.params.items()}
        m = Model(self.cfg, params, LayerRegistry(self.registry.handles))
        m.adapters = dict(self.adapters)
        m.adapter_cfg = self.adapter_cfg
        m.trainable = set(self.trainable)
        return m

    # -- forward ----------------------------------------------------------
    def __call__(self, images) -> Tensor:
        return forward(self, images)

    def linear(self, x: Tensor, name: str) -> Tensor:
        spec = self.adapters.get(name)
        if spec is None:
            return x @ self.params[name + ".weight"] + self.params[name + ".bias"]
        return spec.apply(self, x, name)

    def _cls_indices(self, batch: int) -> np.ndarray:
        idx = self._cls_idx.get(batch)
        if idx is None:
            idx = self._cls_idx[batch] = np.zeros((batch, 1), dtype=np.int64)
        return idx


def build_model(cfg: ViTConfig) -> Model:
    """Deterministically initialise a model from ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    d, hid = cfg.embed_dim, cfg.hidden_dim
    patch_dim = cfg.channels * cfg.patch_size**2
    params: dict[str, np.ndarray] = {}
    handles: list[tuple[str, str, list[str]]] = []

    def linear(name: str, fan_in: int, fan_out: int) -> list[str]:
        params[name + ".weight"] = _trunc_normal(rng, (fan_in, fan_out), fan_in**-0.5)
        params[name + ".bias"] = np.zeros(fan_out)
        return [name + ".weight", name + ".bias"]

    def norm(name: str) -> list[str]:
        params[name + ".weight"] = np.ones(d)
        params[name + ".bias"] = np.zeros(d)
        return [name + ".weight", name + ".bias"]

    names = linear("patch_embed", patch_dim, d)
    params["patch_embed.cls_token"] = _trunc_normal(rng, (1, d), 0.02)
    params["patch_embed.pos_embed"] = _trunc_normal(rng, (cfg.num_patches + 1, d), 0.02)
    handles.append(("patch_embed", "patch-embed", names + ["patch_embed.cls_token", "patch_embed.pos_embed"]))
    for i in range(cfg.depth):
        for suffix, role in BLOCK_LAYOUT:
            name = f"block{i}.{suffix}"
            if role.startswith("norm"):
                pn = norm(name)
            else:
                fan_in, fan_out = {
                    "attn-qkv": (d, 3 * d),
                    "attn-proj": (d, d),
                    "mlp-fc1": (d, hid),
                    "mlp-fc2": (hid, d),
                }[role]
                pn = linear(name, fan_in, fan_out)
            handles.append((name, role, pn))
    head = norm("head.norm") + linear("head", d, cfg.num_classes)
    handles.append(("head", "head", head))

    tensors = {k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}
    registry = LayerRegistry(
        LayerHandle(i, name, role, int(sum(params[p].size for p in pn)), tuple(pn))
        for i, (name, role, pn) in enumerate(handles)
    )
    return Model(cfg, tensors, registry)


def forward(model: Model, images) -> Tensor:
    """Logits ``[B, num_classes]`` for images ``[B, C, H, W]``."""
    cfg = model.cfg
    x = as_tensor(images)
    expect = (cfg.channels, cfg.image_size, cfg.image_size)
    if x.ndim != 4 or x.shape[1:] != expect:
        raise DimensionError(f"forward: expected images [B, {', '.join(map(str, expect))}], got {list(x.shape)}")
    p = model.params
    b = x.shape[0]
    g = cfg.image_size // cfg.patch_size
    ps = cfg.patch_size
    d = cfg.embed_dim
    nh = cfg.heads
    dh = d // nh
    t = cfg.num_patches + 1

    x = x.reshape(b, cfg.channels, g, ps, g, ps).transpose(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, g * g, cfg.channels * ps * ps)
    tok = model.linear(x, "patch_embed")
    cls = ops.embedding(p["patch_embed.cls_token"], model._cls_indices(b))
    h = ops.concat([cls, tok], axis=1) + p["patch_embed.pos_embed"]

    scale = dh**-0.5
    for i in range(cfg.depth):
        pre = f"block{i}."
        a = ops.layernorm(h, p[pre + "norm1.weight"], p[pre + "norm1.bias"])
        qkv = model.linear(a, pre + "attn.qkv")
        qkv = qkv.reshape(b, t, 3, nh, dh).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = ops.softmax((q @ k.transpose(0, 1, 3, 2)) * scale, axis=-1)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(b, t, d)
        h = h + model.linear(o, pre + "attn.proj")
        m = ops.layernorm(h, p[pre + "norm2.weight"], p[pre + "norm2.bias"])
        m = model.linear(ops.gelu(model.linear(m, pre + "mlp.fc1")), pre + "mlp.fc2")
        h = h + m
    h = ops.layernorm(h, p["head.norm.weight"], p["head.norm.bias"])
    return model.linear(h[:, 0], "head")


def set_trainable(model: Model, selected: Iterable[LayerHandle | str]) -> None:
    """Restrict optimizer updates to ``selected``.

    A base layer wrapped by an adapter is permanently frozen; selecting it
    selects its adapter instead.
    """
    names = set()
    adapter_for = {h.adapter_of: h.name for h in model.registry if h.is_adapter}
    for s in selected:
        name = s.name if isinstance(s, LayerHandle) else s
        if name not in model.registry:
            raise RegistryError(f"unknown layer {name!r}")
        if isinstance(s, LayerHandle) and model.registry[name] != s:
            raise RegistryError(f"layer handle {name!r} does not belong to this model")
        names.add(adapter_for.get(name, name))
    model.trainable = names


def frozen_base_names(model: Model) -> set[str]:
    return {h.adapter_of for h in model.registry if h.is_adapter}


from safer.models.adapters import AdapterSpec  # noqa: E402  (circular type import)
