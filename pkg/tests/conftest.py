import numpy as np
import pytest

from safer.attacks import AttackConfig
from safer.autodiff import Tensor
from safer.data import synth_dataset
from safer.models import LayerHandle, LayerRegistry, Model, ViTConfig, build_model
from safer.trainer import LoopConfig, OptimizerConfig, SaferSchedule, train

SMALL = ViTConfig(image_size=8, patch_size=4, channels=3, embed_dim=8, depth=2, heads=2, num_classes=4)


class LinearChain(Model):
    """Two-class logits ``x @ W1 @ W2`` with W1 registered as fc1 and W2 as the head."""

    def __init__(self, w1, w2):
        params = {"fc1.weight": Tensor(w1, requires_grad=True), "head.weight": Tensor(w2, requires_grad=True)}
        registry = LayerRegistry([LayerHandle(0, "fc1", "mlp-fc1", 4, ("fc1.weight",)),
                                  LayerHandle(1, "head", "head", 4, ("head.weight",))])
        super().__init__(ViTConfig(), params, registry)

    def __call__(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return x @ self.params["fc1.weight"] @ self.params["head.weight"]


@pytest.fixture
def small_model():
    return build_model(SMALL)


@pytest.fixture
def small_data():
    return synth_dataset(24, classes=4, image_size=8, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Settings for the toy adversarially trained model shared by the slower tests.
TOY_DATA = dict(n=640, seed=11)
TOY_ATTACK = AttackConfig(steps=5, alpha=0.015)
TOY_SCHEDULE = SaferSchedule(pretrain_clean_epochs=3, pretrain_adv_epochs=37, finetune_epochs=0)


@pytest.fixture(scope="session")
def trained_toy():
    """A default-size ViT after 3 clean and 37 PGD-AT epochs on the synthetic task (about 57% PGD-20 accuracy)."""
    ds = synth_dataset(**TOY_DATA)
    model = build_model(ViTConfig(seed=11))
    res = train(model, ds, TOY_SCHEDULE, TOY_ATTACK, OptimizerConfig(lr=0.05),
                loop=LoopConfig(batch_size=32, eval_robust_every=0, eval_size=64,
                                eval_attack=AttackConfig(steps=5), seed=11))
    return model, ds, res
