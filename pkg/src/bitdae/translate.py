"""Mapping codes between two separately trained models, and image translation through it."""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from . import io
from .errors import ConfigurationError, DataError, ShapeError
from .latent import LatentCode
from .sampler import DMZModel, sample_from_noise


class LatentMap(nn.Module):
    """MLP gamma: source code -> target bit logits, ``depth`` hidden layers of ``width`` units."""

    def __init__(self, n_src: int, n_tgt: int, depth: int = 6, width: int = 128):
        super().__init__()
        if depth < 1:
            raise ConfigurationError(f"depth must be >= 1, got {depth}")
        self.n_src, self.n_tgt, self.depth, self.width = n_src, n_tgt, depth, width
        layers, d = [], n_src
        for _ in range(depth):
            layers += [nn.Linear(d, width), nn.ReLU()]
            d = width
        layers.append(nn.Linear(d, n_tgt))
        self.net = nn.Sequential(*layers)
        self.val_loss: Optional[float] = None
        self.val_accuracy: Optional[float] = None

    def forward(self, z: Tensor) -> Tensor:
        if z.shape[-1] != self.n_src:
            raise ShapeError(f"map expects {self.n_src}-bit codes, got {z.shape[-1]}")
        return self.net(z)

    def map_codes(self, z) -> LatentCode:
        """Hard target codes: sigmoid(gamma(z)) thresholded at 0.5."""
        values = z.values if isinstance(z, LatentCode) else torch.as_tensor(z, dtype=torch.float32)
        with torch.no_grad():
            return LatentCode((torch.sigmoid(self(values.float())) > 0.5).float(), "hard")

    def spec(self) -> dict:
        return {"n_src": self.n_src, "n_tgt": self.n_tgt, "depth": self.depth, "width": self.width}


def _pairs_to_tensors(code_pairs) -> tuple[Tensor, Tensor]:
    if isinstance(code_pairs, tuple) and len(code_pairs) == 2 and not isinstance(code_pairs[0], tuple):
        src, tgt = code_pairs
    else:
        code_pairs = list(code_pairs)
        if not code_pairs:
            raise DataError("no code pairs to fit")
        src, tgt = zip(*code_pairs)
        src = torch.stack([torch.as_tensor(s) for s in src])
        tgt = torch.stack([torch.as_tensor(t) for t in tgt])
    src = (src.values if isinstance(src, LatentCode) else torch.as_tensor(src)).float()
    tgt = (tgt.values if isinstance(tgt, LatentCode) else torch.as_tensor(tgt)).float()
    if src.shape[0] == 0:
        raise DataError("no code pairs to fit")
    if src.shape[0] != tgt.shape[0]:
        raise ShapeError(f"{src.shape[0]} source codes vs {tgt.shape[0]} target codes")
    return src, tgt


def fit_latent_map(
    code_pairs,
    depth: int = 6,
    width: int = 128,
    epochs: int = 300,
    batch_size: int = 256,
    lr: float = 1e-3,
    val_fraction: float = 0.1,
    seed: int = 0,
) -> LatentMap:
    """Fit gamma by minimising binary cross-entropy on a shuffled training split.

    ``code_pairs`` is a list of (src, tgt) hard codes or a ``(src, tgt)``
    pair of stacked arrays. The held-out loss and bit accuracy are stored on
    the returned map as ``val_loss`` and ``val_accuracy``.
    """
    src, tgt = _pairs_to_tensors(code_pairs)
    g = torch.Generator().manual_seed(seed)
    perm = torch.randperm(src.shape[0], generator=g)
    n_val = int(math.floor(val_fraction * src.shape[0])) if src.shape[0] > 1 else 0
    val, tr = perm[:n_val], perm[n_val:]
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        gamma = LatentMap(src.shape[1], tgt.shape[1], depth, width)
    opt = torch.optim.Adam(gamma.parameters(), lr=lr)
    for _ in range(epochs):
        order = tr[torch.randperm(len(tr), generator=g)]
        for i in range(0, len(order), batch_size):
            idx = order[i:i + batch_size]
            loss = F.binary_cross_entropy_with_logits(gamma(src[idx]), tgt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    gamma.eval()
    held = val if n_val else tr
    with torch.no_grad():
        logits = gamma(src[held])
        gamma.val_loss = float(F.binary_cross_entropy_with_logits(logits, tgt[held]))
        gamma.val_accuracy = float(((logits > 0).float() == tgt[held]).float().mean())
    return gamma


def depth_sweep(code_pairs, depths: Sequence[int] = (1, 2, 4, 6, 8), **kw) -> dict:
    """Fit one map per depth; returns {depth: (map, val_loss)}."""
    return {d: (m, m.val_loss) for d in depths for m in [fit_latent_map(code_pairs, depth=d, **kw)]}


def translate_image(
    x_src: Tensor,
    model_src: DMZModel,
    model_tgt: DMZModel,
    gamma: LatentMap,
    generator: Optional[torch.Generator] = None,
    T_sub: Optional[int] = None,
    x_tgt: Optional[Tensor] = None,
    clip_x0: bool = True,
) -> tuple[Tensor, Optional[Tensor]]:
    """Encode with the source model, map the code, generate with the target model.

    Returns the translated batch and, when paired targets ``x_tgt`` are
    given, the per-pair mean squared error.
    """
    if gamma.n_src != model_src.n_bits or gamma.n_tgt != model_tgt.n_bits:
        raise ConfigurationError(
            f"map is {gamma.n_src}->{gamma.n_tgt} bits, models are {model_src.n_bits}->{model_tgt.n_bits}")
    z_src = model_src.encode(x_src)
    z_tgt = gamma.map_codes(z_src)
    out = sample_from_noise(model_tgt, model_tgt.schedule_for(T_sub), z_tgt, x_src.shape[0], generator, clip_x0)
    mse = None
    if x_tgt is not None:
        if x_tgt.shape != out.shape:
            raise ShapeError(f"targets {tuple(x_tgt.shape)} vs translations {tuple(out.shape)}")
        mse = ((out - x_tgt) ** 2).flatten(1).mean(1)
    return out, mse


def identity_map(n_bits: int) -> LatentMap:
    """A depth-1 map that reproduces its input code exactly after thresholding."""
    gamma = LatentMap(n_bits, n_bits, depth=1, width=n_bits)
    with torch.no_grad():
        first, last = gamma.net[0], gamma.net[-1]
        first.weight.copy_(torch.eye(n_bits))
        first.bias.zero_()
        last.weight.copy_(2.0 * torch.eye(n_bits))
        last.bias.fill_(-1.0)
    gamma.eval()
    return gamma


def save_map(gamma: LatentMap, path) -> None:
    meta = {"kind": "latent_map", **gamma.spec(), "val_loss": gamma.val_loss, "val_accuracy": gamma.val_accuracy}
    io.save_checkpoint(path, gamma.state_dict(), meta)


def load_map(path) -> LatentMap:
    tensors, meta = io.load_checkpoint(path)
    if meta.get("kind") != "latent_map":
        raise ConfigurationError(f"{path} holds {meta.get('kind')!r}, not a latent map")
    gamma = LatentMap(meta["n_src"], meta["n_tgt"], meta["depth"], meta["width"])
    gamma.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    gamma.val_loss, gamma.val_accuracy = meta["val_loss"], meta["val_accuracy"]
    gamma.eval()
    return gamma
