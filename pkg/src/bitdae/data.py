"""Synthetic shape datasets with known generative factors."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError

SHAPES = ("square", "circle", "triangle", "plus")


@dataclass(frozen=True)
class SyntheticSpec:
    """Single shapes on a dark background.

    Factors, each sampled exactly balanced before shuffling:

    * ``shape``    index into ``shapes``
    * ``fill``     0 = outline, 1 = filled
    * ``position`` cell of a ``grid`` x ``grid`` lattice of centres
    * ``size``     index into ``radii``

    ``style`` forces every image to outlines or fills (``"outline"`` /
    ``"filled"``), which gives paired domains that share all other factors.
    """

    resolution: int = 16
    count: int = 4096
    seed: int = 0
    shapes: tuple = ("square", "circle")
    grid: int = 3
    radii: tuple = (4.0,)
    stroke: float = 1.5
    style: str = "mixed"
    channels: int = 1
    supersample: int = 4

    def __post_init__(self):
        object.__setattr__(self, "shapes", tuple(self.shapes))
        object.__setattr__(self, "radii", tuple(float(r) for r in self.radii))
        if self.count < 1:
            raise ConfigurationError("count must be positive")
        for s in self.shapes:
            if s not in SHAPES:
                raise ConfigurationError(f"unknown shape {s!r}; choose from {SHAPES}")
        if not self.shapes or not self.radii or self.grid < 1:
            raise ConfigurationError("need at least one shape, one radius and grid >= 1")
        if self.style not in ("mixed", "outline", "filled"):
            raise ConfigurationError(f"style must be mixed/outline/filled, got {self.style!r}")
        if self.channels not in (1, 3):
            raise ConfigurationError("channels must be 1 or 3")
        margin = max(self.radii) + 1.0
        if 2 * margin > self.resolution:
            raise ConfigurationError(
                f"radius {max(self.radii)} does not fit a {self.resolution}px canvas")
        if min(self.radii) <= self.stroke:
            raise ConfigurationError("stroke must be thinner than the smallest radius")

    @property
    def factor_sizes(self) -> dict:
        return {"shape": len(self.shapes), "fill": 2, "position": self.grid ** 2, "size": len(self.radii)}

    def centres(self) -> np.ndarray:
        margin = max(self.radii) + 1.0
        if self.grid == 1:
            axis = np.array([self.resolution / 2.0])
        else:
            axis = np.linspace(margin, self.resolution - margin, self.grid)
        return axis

    def to_dict(self) -> dict:
        return asdict(self)


def _shape_mask(kind: str, dx: np.ndarray, dy: np.ndarray, r: float) -> np.ndarray:
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= r * 0.85
    if kind == "circle":
        return np.hypot(dx, dy) <= r
    if kind == "triangle":
        # apex up, base at dy = +r*0.8
        return (dy <= 0.8 * r) & (dy >= -r + 2 * np.abs(dx) * 0.9)
    if kind == "plus":
        w = r * 0.35
        return ((np.abs(dx) <= w) & (np.abs(dy) <= r)) | ((np.abs(dy) <= w) & (np.abs(dx) <= r))
    raise ConfigurationError(kind)


def render(spec: SyntheticSpec, shape: int, fill: int, position: int, size: int) -> np.ndarray:
    """One image as uint8 (C, H, W)."""
    ss = spec.supersample
    n = spec.resolution * ss
    coords = (np.arange(n) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    axis = spec.centres()
    cy, cx = axis[position // spec.grid], axis[position % spec.grid]
    r = spec.radii[size]
    kind = spec.shapes[shape]
    outer = _shape_mask(kind, xx - cx, yy - cy, r)
    if fill:
        mask = outer
    else:
        shrink = (r - spec.stroke) / r
        inner = _shape_mask(kind, (xx - cx) / shrink, (yy - cy) / shrink, r)
        mask = outer & ~inner
    cover = mask.reshape(spec.resolution, ss, spec.resolution, ss).mean(axis=(1, 3))
    img = np.rint(cover * 255.0).astype(np.uint8)
    return np.repeat(img[None], spec.channels, axis=0)


def _balanced(rng: np.random.Generator, count: int, k: int) -> np.ndarray:
    return rng.permutation(np.arange(count) % k)


def sample_factors(spec: SyntheticSpec) -> dict:
    rng = np.random.default_rng(spec.seed)
    labels = {}
    for name, k in spec.factor_sizes.items():
        labels[name] = _balanced(rng, spec.count, k)
    if spec.style != "mixed":
        labels["fill"] = np.full(spec.count, int(spec.style == "filled"))
    return labels


def to_unit_range(images_u8: np.ndarray) -> torch.Tensor:
    """uint8 [0, 255] -> float32 [-1, 1] via x / 127.5 - 1."""
    return torch.from_numpy(images_u8.astype(np.float32) / 127.5 - 1.0)


def generate_synthetic(spec: SyntheticSpec, labels: Optional[dict] = None):
    """Images (count, C, H, W) in [-1, 1] and a dict of per-factor integer labels.

    ``labels`` may be passed to render a second domain from the same factors.
    """
    if labels is None:
        labels = sample_factors(spec)
    else:
        labels = {k: np.asarray(v).copy() for k, v in labels.items()}
        if spec.style != "mixed":
            labels["fill"] = np.full(len(labels["fill"]), int(spec.style == "filled"))
    count = len(labels["shape"])
    sizes = spec.factor_sizes
    for name, k in sizes.items():
        if labels[name].min() < 0 or labels[name].max() >= k:
            raise ConfigurationError(f"factor {name!r} has labels outside [0, {k})")
    cache = {}
    out = np.empty((count, spec.channels, spec.resolution, spec.resolution), dtype=np.uint8)
    for i in range(count):
        key = tuple(int(labels[f][i]) for f in ("shape", "fill", "position", "size"))
        if key not in cache:
            cache[key] = render(spec, *key)
        out[i] = cache[key]
    return to_unit_range(out), labels
