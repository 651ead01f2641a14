"""Ancestral sampling with pluggable code sources and strided few-step chains."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import torch
from torch import Tensor

from .denoiser import Denoiser
from .diffusion import Schedule, posterior_step, schedule_from_arrays
from .errors import ConfigurationError, NumericError, ShapeError
from .latent import (ARPrior, Encoder, LatentCode, NormalPrior, posterior_code, sample_ar_prior,
                     sample_prior_bernoulli)


def make_stride(full: Schedule, T_sub: int) -> tuple[np.ndarray, Schedule]:
    """Evenly spaced sub-chain of ``T_sub`` steps through a ``full`` schedule.

    Selected indices are t_i = floor(i * T / T_sub), i = 1..T_sub, so the
    chain ends at T and its first step sits within one spacing of 1. The
    sub-schedule copies abar at those indices and re-derives
    beta'_i = 1 - abar_{t_i} / abar_{t_{i-1}} (abar_{t_0} = 1). Where two
    selected indices are adjacent the original beta is copied unchanged,
    which makes ``T_sub == T`` an exact identity.

    Returns the decreasing timestep sequence (in original indices) and the
    sub-schedule, whose ``timesteps`` field carries those indices.
    """
    T = full.T
    if not isinstance(T_sub, (int, np.integer)) or T_sub < 1:
        raise ConfigurationError(f"T_sub must be a positive integer, got {T_sub!r}")
    if T_sub > T:
        raise ConfigurationError(f"T_sub={T_sub} exceeds the full chain length T={T}")
    idx = (np.arange(1, T_sub + 1, dtype=np.int64) * T) // T_sub
    abar = full.alpha_bars[idx - 1].copy()
    prev_idx = np.concatenate([[0], idx[:-1]])
    prev_abar = np.concatenate([[1.0], abar[:-1]])
    betas = np.where(idx - prev_idx == 1, full.betas[idx - 1], 1.0 - abar / prev_abar)
    sub = schedule_from_arrays(full.kind, betas, abar, full.timesteps[idx - 1])
    return sub.timesteps[::-1].copy(), sub


def _code_values(z, batch: int) -> Optional[Tensor]:
    if z is None:
        return None
    if isinstance(z, LatentCode):
        if z.mode == "relaxed":
            raise ConfigurationError("sampling takes hard (or continuous) codes, not relaxed ones")
        z = z.values
    z = torch.as_tensor(z, dtype=torch.float32)
    if z.dim() == 1:
        z = z[None]
    if z.shape[0] == 1 and batch > 1:
        z = z.expand(batch, -1)
    if z.shape[0] != batch:
        raise ShapeError(f"{z.shape[0]} codes for a batch of {batch}")
    return z


def _clip_eps(x_t: Tensor, eps_hat: Tensor, abar: float) -> Tensor:
    a, b = math.sqrt(abar), math.sqrt(1.0 - abar)
    x0 = ((x_t - b * eps_hat) / a).clamp(-1.0, 1.0)
    return (x_t - a * x0) / b


@torch.no_grad()
def sample(
    model: Denoiser,
    sched: Schedule,
    z,
    x_T: Tensor,
    generator: Optional[torch.Generator] = None,
    clip_x0: bool = True,
) -> Tensor:
    """Run the reverse chain from ``x_T`` through every step of ``sched``.

    Fresh noise v comes from ``generator`` for every step except the last.
    The result is clamped to [-1, 1] once, at the end. With ``clip_x0`` (default) the
    implied prediction of x_0 is clamped to [-1, 1] and turned back into a
    noise estimate before each step; the chain states themselves stay
    unclamped. This bounds the error blow-up of the first step when
    alpha_bar_T is tiny (as with the clipped cosine schedule).
    """
    was_training = model.training
    model.eval()
    try:
        zv = _code_values(z, x_T.shape[0])
        x = x_T
        for t in range(sched.T, 0, -1):
            eps_hat = model(x, sched.model_time(t), zv)
            if not torch.isfinite(eps_hat).all():
                raise NumericError(f"non-finite noise prediction at timestep t={sched.model_time(t)}")
            if clip_x0:
                eps_hat = _clip_eps(x, eps_hat, float(sched.alpha_bars[t - 1]))
            v = torch.randn(x.shape, generator=generator, dtype=x.dtype) if t > 1 else None
            x = posterior_step(x, eps_hat, t, sched, v)
            if not torch.isfinite(x).all():
                raise NumericError(f"non-finite sample at timestep t={sched.model_time(t)}")
    finally:
        model.train(was_training)
    return x.clamp(-1.0, 1.0)


@dataclass
class DMZModel:
    """What sampling needs: the (EMA) denoiser, its encoder and the schedule."""

    denoiser: Denoiser
    encoder: Optional[Encoder]
    schedule: Schedule

    @classmethod
    def from_state(cls, state, use_ema: bool = True) -> "DMZModel":
        den, enc = state.sampling_modules(use_ema)
        return cls(den, enc, state.schedule)

    @property
    def input_shape(self) -> tuple:
        return self.denoiser.spec.input_shape

    @property
    def n_bits(self) -> int:
        return self.denoiser.spec.n_bits

    def schedule_for(self, T_sub: Optional[int] = None) -> Schedule:
        if T_sub is None or T_sub == self.schedule.T:
            return self.schedule
        return make_stride(self.schedule, T_sub)[1]

    def encode(self, x0: Tensor) -> LatentCode:
        if self.encoder is None:
            raise ConfigurationError("unconditional model has no encoder")
        return posterior_code(x0, self.encoder)


def sample_from_noise(model: DMZModel, sched: Schedule, z, count: int,
                      generator: Optional[torch.Generator] = None, clip_x0: bool = True) -> Tensor:
    """Draw x_T ~ N(0, I) from ``generator``, then run :func:`sample` with the same stream."""
    x_T = torch.randn((count, *model.input_shape), generator=generator)
    return sample(model.denoiser, sched, z, x_T, generator, clip_x0)


def draw_codes(source: str, count: int, n_bits: int, generator: Optional[torch.Generator] = None,
               prior: Union[ARPrior, NormalPrior, None] = None, codes=None) -> LatentCode:
    """Codes for generation from ``bernoulli``, ``ar``, ``normal`` or ``posterior`` sources.

    ``posterior`` takes caller-supplied ``codes`` (e.g. read from a codes
    file) and cycles through them; sampling never sees image data.
    """
    if source == "bernoulli":
        return sample_prior_bernoulli(n_bits, count, generator)
    if source == "ar":
        if not isinstance(prior, ARPrior):
            raise ConfigurationError("z-source 'ar' needs a fitted ARPrior")
        if prior.n_bits != n_bits:
            raise ConfigurationError(f"prior has {prior.n_bits} bits, model expects {n_bits}")
        return sample_ar_prior(prior, count, generator)
    if source == "normal":
        if not isinstance(prior, NormalPrior):
            raise ConfigurationError("z-source 'normal' needs a fitted NormalPrior")
        return prior.sample(count, generator)
    if source == "posterior":
        if codes is None:
            raise ConfigurationError("z-source 'posterior' needs codes")
        values = codes.values if isinstance(codes, LatentCode) else torch.as_tensor(codes, dtype=torch.float32)
        if values.shape[-1] != n_bits:
            raise ConfigurationError(f"codes have {values.shape[-1]} bits, model expects {n_bits}")
        reps = -(-count // values.shape[0])
        return LatentCode(values.repeat(reps, 1)[:count].float(), "hard")
    raise ConfigurationError(f"unknown z-source {source!r}")


def encode_then_generate(x0: Tensor, n_seeds: int, model: DMZModel,
                         generator: Optional[torch.Generator] = None,
                         T_sub: Optional[int] = None, clip_x0: bool = True) -> list[Tensor]:
    """``n_seeds`` samples per input, all sharing the input's hard posterior code."""
    if n_seeds < 1:
        raise ConfigurationError("n_seeds must be positive")
    z = model.encode(x0)
    sched = model.schedule_for(T_sub)
    return [sample_from_noise(model, sched, z, x0.shape[0], generator, clip_x0) for _ in range(n_seeds)]
