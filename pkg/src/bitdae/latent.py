"""Image encoder, binary latent relaxation and priors over codes."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError, DataError, ShapeError

LATENT_KINDS = ("bernoulli", "normal")


@dataclass(frozen=True)
class EncoderSpec:
    """Conv/BatchNorm/LeakyReLU blocks, each halving resolution, then a linear head.

    ``latent_kind='normal'`` is the continuous ablation: the head emits a mean
    and a log-variance per latent dimension.
    """

    input_shape: tuple
    n_bits: int
    n_blocks: int = 3
    channels_per_block: tuple = (32, 64, 64)
    latent_kind: str = "bernoulli"

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "channels_per_block", tuple(int(v) for v in self.channels_per_block))
        if len(self.input_shape) != 3:
            raise ConfigurationError(f"input_shape must be (C, H, W), got {self.input_shape}")
        if self.n_bits < 1 or self.n_blocks < 1:
            raise ConfigurationError("n_bits and n_blocks must be positive")
        if len(self.channels_per_block) != self.n_blocks:
            raise ConfigurationError(
                f"{len(self.channels_per_block)} channel widths given for {self.n_blocks} blocks")
        _, H, W = self.input_shape
        if min(H, W) >> self.n_blocks < 1 or min(H, W) % (1 << self.n_blocks):
            raise ConfigurationError(
                f"{self.n_blocks} halving blocks do not fit a {H}x{W} input")
        if self.latent_kind not in LATENT_KINDS:
            raise ConfigurationError(f"latent_kind must be one of {LATENT_KINDS}")

    @property
    def final_size(self) -> tuple:
        _, H, W = self.input_shape
        return H >> self.n_blocks, W >> self.n_blocks

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LatentCode:
    """Batch of codes. ``mode`` is ``relaxed`` (values in (0,1)) or ``hard`` ({0,1})."""

    values: Tensor
    mode: str

    def __post_init__(self):
        if self.mode not in ("relaxed", "hard", "continuous"):
            raise ConfigurationError(f"unknown code mode {self.mode!r}")

    @property
    def n_bits(self) -> int:
        return self.values.shape[-1]


class Encoder(nn.Module):
    def __init__(self, spec: EncoderSpec):
        super().__init__()
        self.spec = spec
        layers = []
        c_in = spec.input_shape[0]
        for c_out in spec.channels_per_block:
            layers += [
                nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
                nn.BatchNorm2d(c_out),
                nn.LeakyReLU(0.2),
            ]
            c_in = c_out
        self.blocks = nn.Sequential(*layers)
        h, w = spec.final_size
        out = spec.n_bits * (2 if spec.latent_kind == "normal" else 1)
        self.proj = nn.Linear(c_in * h * w, out)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)

    def forward(self, x: Tensor) -> Tensor:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"encoder expects {self.spec.input_shape}, got {tuple(x.shape[1:])}")
        return self.proj(self.blocks(x).flatten(1))


def encode_logits(x0: Tensor, encoder: Encoder) -> Tensor:
    """Per-bit logits, shape (B, n_bits). Uses the encoder's current train/eval mode."""
    return encoder(x0)


def relax_sample(logits: Tensor, temperature: float, u: Tensor) -> LatentCode:
    """Binary-concrete sample sigmoid((logit + log u - log(1-u)) / temperature)."""
    if not temperature > 0:
        raise ConfigurationError(f"temperature must be > 0, got {temperature}")
    if u.shape != logits.shape:
        raise ShapeError(f"noise shape {tuple(u.shape)} != logits shape {tuple(logits.shape)}")
    noise = torch.log(u) - torch.log1p(-u)
    z = torch.sigmoid((logits + noise) / temperature)
    tiny = torch.finfo(z.dtype).eps
    z = z.clamp(tiny, 1 - tiny)
    return LatentCode(z, "relaxed")


def binarize(code, from_logits: bool = False) -> LatentCode:
    """Hard threshold with a straight-through gradient.

    Relaxed values are thresholded at 0.5 (a tie maps to 0), logits at 0.
    The backward pass treats the threshold as identity.
    """
    values = code.values if isinstance(code, LatentCode) else code
    threshold = 0.0 if from_logits else 0.5
    hard = (values > threshold).to(values.dtype)
    if values.requires_grad:
        hard = values + (hard - values).detach()
    return LatentCode(hard, "hard")


def posterior_code(x0: Tensor, encoder: Encoder) -> LatentCode:
    """Deterministic inference-time code: hard threshold of the logits (eval mode)."""
    was_training = encoder.training
    encoder.eval()
    try:
        with torch.no_grad():
            out = encoder(x0)
    finally:
        encoder.train(was_training)
    if encoder.spec.latent_kind == "normal":
        return LatentCode(out[:, : encoder.spec.n_bits], "continuous")
    return binarize(out, from_logits=True)


def sample_prior_bernoulli(n: int, count: int = 1, generator: Optional[torch.Generator] = None) -> LatentCode:
    """``count`` codes of ``n`` i.i.d. fair bits."""
    if n < 1 or count < 1:
        raise ConfigurationError("n and count must be positive")
    bits = torch.randint(0, 2, (count, n), generator=generator).float()
    return LatentCode(bits, "hard")


# ---------------------------------------------------------------- Normal ablation


def gaussian_latent(stats: Tensor, n: int, eps: Tensor) -> LatentCode:
    """Reparameterised sample from the mean/log-variance head of a normal encoder."""
    mean, logvar = stats[:, :n], stats[:, n:]
    return LatentCode(mean + torch.exp(0.5 * logvar) * eps, "continuous")


@dataclass
class NormalPrior:
    mean: Tensor
    std: Tensor

    def sample(self, count: int, generator: Optional[torch.Generator] = None) -> LatentCode:
        eps = torch.randn((count, self.mean.numel()), generator=generator)
        return LatentCode(self.mean + self.std * eps, "continuous")


def fit_normal_prior(codes: Tensor) -> NormalPrior:
    """Per-dimension mean and std of training-set codes."""
    if codes.shape[0] < 2:
        raise DataError("need at least two codes to fit a normal prior")
    return NormalPrior(codes.mean(0), codes.std(0))


# ---------------------------------------------------------------- autoregressive prior


class MaskedLinear(nn.Linear):
    def __init__(self, in_features: int, out_features: int, mask: Tensor):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", mask.float())

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight * self.mask, self.bias)


class ARPrior(nn.Module):
    """Causal bit model p(z_i | z_<i) as a masked MLP over the flat code.

    Natural ordering. The first bit's conditional reduces to the output bias.
    """

    def __init__(self, n_bits: int, hidden: int = 128, n_hidden_layers: int = 2):
        super().__init__()
        self.n_bits = n_bits
        self.hidden = hidden
        self.n_hidden_layers = n_hidden_layers
        rng = np.random.RandomState(0)
        degrees = [np.arange(1, n_bits + 1)]
        for _ in range(n_hidden_layers):
            if n_bits > 1:
                degrees.append(rng.randint(1, n_bits, size=hidden))
            else:
                degrees.append(np.zeros(hidden, dtype=int))
        layers = []
        for d_in, d_out in zip(degrees[:-1], degrees[1:]):
            mask = torch.as_tensor(d_out[:, None] >= d_in[None, :])
            layers += [MaskedLinear(len(d_in), len(d_out), mask), nn.ReLU()]
        out_mask = torch.as_tensor(degrees[0][:, None] > degrees[-1][None, :])
        layers.append(MaskedLinear(len(degrees[-1]), n_bits, out_mask))
        self.net = nn.Sequential(*layers)

    def forward(self, z: Tensor) -> Tensor:
        """Logits of p(z_i = 1 | z_<i) for every i."""
        return self.net(z)

    def log_prob(self, z: Tensor) -> Tensor:
        return -F.binary_cross_entropy_with_logits(self(z), z, reduction="none").sum(-1)

    def conditionals(self, z: Tensor) -> Tensor:
        return torch.sigmoid(self(z))

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def _stack_codes(codes) -> Tensor:
    if isinstance(codes, LatentCode):
        codes = codes.values
    elif isinstance(codes, (list, tuple)):
        if not codes:
            raise DataError("empty code set")
        codes = torch.stack([c.values if isinstance(c, LatentCode) else torch.as_tensor(c) for c in codes])
    codes = torch.as_tensor(codes).float()
    if codes.dim() != 2 or codes.shape[0] == 0:
        raise DataError("codes must be a nonempty (count, n_bits) array")
    if not torch.all((codes == 0) | (codes == 1)):
        raise DataError("codes must be hard (0/1)")
    return codes


def fit_ar_prior(
    codes,
    hidden: int = 128,
    n_hidden_layers: int = 2,
    epochs: int = 200,
    batch_size: int = 256,
    lr: float = 3e-3,
    weight_decay: float = 1e-4,
    seed: int = 0,
    val_fraction: float = 0.1,
    patience: int = 10,
) -> ARPrior:
    """Maximum-likelihood fit of an :class:`ARPrior` by minibatch AdamW.

    A ``val_fraction`` slice of the codes is held out; the parameters from
    the epoch with the best held-out likelihood are kept, and training stops
    after ``patience`` epochs without improvement.
    """
    z = _stack_codes(codes)
    g = torch.Generator().manual_seed(seed)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        prior = ARPrior(z.shape[1], hidden, n_hidden_layers)
    # start from the smoothed per-bit marginals
    p = (z.sum(0) + 0.5) / (z.shape[0] + 1.0)
    with torch.no_grad():
        prior.net[-1].bias.copy_(torch.log(p) - torch.log1p(-p))
    n_val = int(val_fraction * z.shape[0]) if z.shape[0] >= 20 else 0
    perm = torch.randperm(z.shape[0], generator=g)
    val, train = z[perm[:n_val]], z[perm[n_val:]]
    opt = torch.optim.AdamW(prior.parameters(), lr=lr, weight_decay=weight_decay)
    best, best_state, stale = math.inf, None, 0
    for _ in range(epochs):
        order = torch.randperm(train.shape[0], generator=g)
        for i in range(0, train.shape[0], batch_size):
            loss = -prior.log_prob(train[order[i:i + batch_size]]).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        if n_val:
            with torch.no_grad():
                val_nll = -prior.log_prob(val).mean().item()
            if val_nll < best - 1e-6:
                best, stale = val_nll, 0
                best_state = {k: v.clone() for k, v in prior.state_dict().items()}
            else:
                stale += 1
                if stale >= patience:
                    break
    if best_state is not None:
        prior.load_state_dict(best_state)
    prior.eval()
    return prior


def sample_ar_prior(prior: ARPrior, count: int = 1, generator: Optional[torch.Generator] = None) -> LatentCode:
    """Draw bits one at a time from the fitted conditionals."""
    z = torch.zeros(count, prior.n_bits)
    with torch.no_grad():
        for i in range(prior.n_bits):
            p = torch.sigmoid(prior(z)[:, i])
            z[:, i] = (torch.rand(count, generator=generator) < p).float()
    return LatentCode(z, "hard")


def bernoulli_log_prob(codes, p: float = 0.5) -> Tensor:
    z = _stack_codes(codes)
    return (z * math.log(p) + (1 - z) * math.log(1 - p)).sum(-1)


def independent_log_prob(train_codes, test_codes) -> Tensor:
    """Held-out log-likelihood under per-bit marginals fitted on ``train_codes``."""
    z_tr, z_te = _stack_codes(train_codes), _stack_codes(test_codes)
    p = ((z_tr.sum(0) + 0.5) / (z_tr.shape[0] + 1.0)).clamp(1e-6, 1 - 1e-6)
    return (z_te * torch.log(p) + (1 - z_te) * torch.log1p(-p)).sum(-1)
