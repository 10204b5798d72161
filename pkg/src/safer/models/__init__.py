"""Tiny ViT family, layer registry, adapters and checkpoints."""

from safer.models.adapters import AdapterConfig, wrap_adapters
from safer.models.checkpoint import load_checkpoint, save_checkpoint
from safer.models.vit import (
    ROLES,
    WEIGHT_ROLES,
    LayerHandle,
    LayerRegistry,
    Model,
    ViTConfig,
    build_model,
    forward,
    set_trainable,
)

__all__ = [
    "ROLES", "WEIGHT_ROLES", "AdapterConfig", "LayerHandle", "LayerRegistry", "Model", "ViTConfig",
    "build_model", "forward", "load_checkpoint", "save_checkpoint", "set_trainable", "wrap_adapters",
]
