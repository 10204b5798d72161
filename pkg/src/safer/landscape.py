"""Two-dimensional loss surfaces around one layer's weights."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from safer.autodiff import cross_entropy, no_grad
from safer.errors import ConfigError
from safer.models.vit import LayerHandle, Model


@dataclass
class LandscapeGrid:
    layer: LayerHandle
    directions: tuple[np.ndarray, np.ndarray]  # flattened, unit norm, orthogonal
    extents: tuple[tuple[float, float], tuple[float, float]]
    resolution: int
    values: np.ndarray  # [resolution, resolution]; rows follow axis a, columns axis b; NaN marks failures

    def axis(self, k: int) -> np.ndarray:
        return _axis(self.extents[k], self.resolution)

    @property
    def center(self) -> float:
        c = self.resolution // 2
        return float(self.values[c, c])

    def variance(self) -> float:
        return float(np.nanvar(self.values))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["a", "b", "loss"])
        for i, a in enumerate(self.axis(0)):
            for j, b in enumerate(self.axis(1)):
                v = self.values[i, j]
                w.writerow([repr(float(a)), repr(float(b)), repr(float(v)) if math.isfinite(v) else ""])
        return buf.getvalue()


def _axis(extent: tuple[float, float], resolution: int) -> np.ndarray:
    # Symmetric index arithmetic puts an exact 0.0 at the centre for symmetric extents.
    lo, hi = extent
    c = (resolution - 1) / 2
    t = (np.arange(resolution) - c) / c
    mid, half = (lo + hi) / 2, (hi - lo) / 2
    return mid + half * t


def landscape_directions(shape_sizes: tuple[int, ...], seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Two orthonormal Gaussian directions, regenerated from ``(seed, sizes)`` alone."""
    n = int(sum(shape_sizes))
    if n < 2:
        raise ConfigError("a landscape needs a layer with at least 2 weights")
    rng = np.random.default_rng([seed, *shape_sizes])
    d1 = rng.standard_normal(n)
    d2 = rng.standard_normal(n)
    d1 /= np.linalg.norm(d1)
    d2 -= (d2 @ d1) * d1
    d2 /= np.linalg.norm(d2)
    return d1, d2


def loss_landscape(model: Model, layer: LayerHandle | str, images, labels, extents=None,
                   resolution: int = 11, seed: int = 0, rho: float = 0.05) -> LandscapeGrid:
    """Mean cross-entropy at ``w + a d1 + b d2`` over a grid of offsets for one layer.

    ``images`` should already be the fixed adversarial batch. Extents default
    to ``(-rho, rho)`` on both axes; the layer weights are restored afterwards.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ConfigError(f"resolution must be an odd number >= 3, got {resolution}")
    handle = model.registry[layer if isinstance(layer, str) else layer.name]
    if extents is None:
        extents = ((-rho, rho), (-rho, rho))
    params = [model.params[n] for n in handle.param_names]
    sizes = tuple(p.size for p in params)
    d1, d2 = landscape_directions(sizes, seed)
    base = [p.data for p in params]
    flat = np.concatenate([b.ravel() for b in base])
    splits = np.cumsum(sizes)[:-1]
    a_axis, b_axis = _axis(extents[0], resolution), _axis(extents[1], resolution)
    values = np.full((resolution, resolution), np.nan)
    try:
        with no_grad(), np.errstate(all="ignore"):
            for i, a in enumerate(a_axis):
                for j, b in enumerate(b_axis):
                    if a == 0.0 and b == 0.0:
                        for p, bb in zip(params, base):
                            p.data = bb
                    else:
                        w = flat + a * d1 + b * d2
                        for p, part, bb in zip(params, np.split(w, splits), base):
                            p.data = part.reshape(bb.shape)
                    v = cross_entropy(model(images), labels).item()
                    values[i, j] = v if math.isfinite(v) else np.nan
    finally:
        for p, bb in zip(params, base):
            p.data = bb
    return LandscapeGrid(handle, (d1, d2), (tuple(extents[0]), tuple(extents[1])), resolution, values)
