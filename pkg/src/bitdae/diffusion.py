"""Noise schedules, the forward process, reverse steps and the variational bound.

Timesteps are 1-based throughout (``1 <= t <= T``); arrays are stored 0-based,
so the value for step ``t`` lives at index ``t - 1``.

    x_t     = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps
    x_{t-1} = (x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t v
    sigma_t^2 = (1 - abar_{t-1}) / (1 - abar_t) beta_t,   sigma_1 = 0
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
import torch
from torch import Tensor

from .errors import ConfigurationError, NumericError, ShapeError, TimestepError

SCHEDULE_KINDS = ("linear", "cosine")
COSINE_OFFSET = 0.008
MAX_BETA = 0.999

Timestep = Union[int, Tensor]


@dataclass(frozen=True, eq=False)
class Schedule:
    """Per-step diffusion constants.

    ``timesteps`` holds the time index fed to the denoiser at each step. For a
    schedule built by :func:`build_schedule` it is ``1..T``; strided
    sub-schedules keep the original indices of the full chain.
    """

    kind: str
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    timesteps: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.timesteps is None:
            object.__setattr__(self, "timesteps", np.arange(1, self.T + 1, dtype=np.int64))
        for name in ("betas", "alphas", "alpha_bars", "sigmas", "timesteps"):
            arr = getattr(self, name)
            if arr.shape != (self.T,):
                raise ShapeError(f"{name} has shape {arr.shape}, expected ({self.T},)")
            arr.setflags(write=False)

    def check(self, t: Timestep) -> None:
        lo, hi = _bounds(t)
        if lo < 1 or hi > self.T:
            raise TimestepError(f"timestep out of range [1, {self.T}]: got {lo}..{hi}")

    def alpha_bar_prev(self, t: int) -> float:
        return 1.0 if t == 1 else float(self.alpha_bars[t - 2])

    def model_time(self, t: int) -> int:
        return int(self.timesteps[t - 1])

    def as_tensor(self, name: str, dtype=torch.float32, device=None) -> Tensor:
        return torch.as_tensor(np.asarray(getattr(self, name)), dtype=dtype, device=device)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "T": self.T,
            "betas": self.betas.tolist(),
            "alpha_bars": self.alpha_bars.tolist(),
            "timesteps": self.timesteps.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Schedule":
        return schedule_from_arrays(
            d["kind"], np.asarray(d["betas"], dtype=np.float64),
            np.asarray(d["alpha_bars"], dtype=np.float64),
            np.asarray(d["timesteps"], dtype=np.int64),
        )

    def equals(self, other: "Schedule") -> bool:
        return (
            self.kind == other.kind and self.T == other.T
            and all(np.array_equal(getattr(self, k), getattr(other, k))
                    for k in ("betas", "alphas", "alpha_bars", "sigmas", "timesteps"))
        )


def _bounds(t: Timestep) -> tuple[int, int]:
    if isinstance(t, Tensor):
        if t.numel() == 0:
            raise TimestepError("empty timestep tensor")
        return int(t.min()), int(t.max())
    t = int(t)
    return t, t


def posterior_sigmas(betas: np.ndarray, alpha_bars: np.ndarray) -> np.ndarray:
    sigmas = np.zeros_like(betas)
    if len(betas) > 1:
        var = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
        sigmas[1:] = np.sqrt(var)
    return sigmas


def schedule_from_arrays(kind, betas, alpha_bars, timesteps=None) -> Schedule:
    betas = np.asarray(betas, dtype=np.float64)
    alpha_bars = np.asarray(alpha_bars, dtype=np.float64)
    return Schedule(
        kind=kind, T=len(betas), betas=betas, alphas=1.0 - betas,
        alpha_bars=alpha_bars, sigmas=posterior_sigmas(betas, alpha_bars),
        timesteps=None if timesteps is None else np.asarray(timesteps, dtype=np.int64),
    )


def cosine_alpha_bar(t, T: int, s: float = COSINE_OFFSET):
    """Closed-form f(t)/f(0) with f(t) = cos^2(((t/T + s)/(1 + s)) pi/2)."""
    f = lambda u: np.cos((u / T + s) / (1 + s) * np.pi / 2) ** 2
    return f(np.asarray(t, dtype=np.float64)) / f(0.0)


def build_schedule(kind: str, T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> Schedule:
    """Build a ``linear`` or ``cosine`` schedule with ``T`` steps."""
    if not isinstance(T, (int, np.integer)) or isinstance(T, bool) or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T!r}")
    T = int(T)
    if kind == "linear":
        if not 0 < beta_start <= beta_end < 1:
            raise ConfigurationError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif kind == "cosine":
        abar = cosine_alpha_bar(np.arange(0, T + 1), T)
        betas = np.minimum(1.0 - abar[1:] / abar[:-1], MAX_BETA)
    else:
        raise ConfigurationError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    alpha_bars = np.cumprod(1.0 - betas)
    return schedule_from_arrays(kind, betas, alpha_bars)


def _coef(sched: Schedule, name: str, t: Timestep, like: Tensor) -> Union[float, Tensor]:
    arr = getattr(sched, name)
    if isinstance(t, Tensor):
        c = torch.tensor(arr, dtype=like.dtype, device=like.device)[t.long() - 1]
        return c.view(-1, *([1] * (like.dim() - 1)))
    return float(arr[int(t) - 1])


def _sqrt(c):
    return torch.sqrt(c) if isinstance(c, Tensor) else math.sqrt(c)


def q_sample(
    x0: Tensor,
    t: Timestep,
    eps: Tensor,
    sched: Schedule,
    gamma_ip: float = 0.0,
    eps_extra: Optional[Tensor] = None,
) -> Tensor:
    """Noise ``x0`` to step ``t``; ``t`` is an int or a per-row LongTensor.

    With ``gamma_ip > 0`` the noise becomes ``eps + gamma_ip * eps_extra``
    (input perturbation); the regression target stays ``eps``.
    """
    sched.check(t)
    if eps.shape != x0.shape:
        raise ShapeError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    if gamma_ip < 0:
        raise ConfigurationError(f"gamma_ip must be >= 0, got {gamma_ip}")
    if isinstance(t, Tensor) and t.dim() > 0 and t.shape[0] != x0.shape[0]:
        raise ShapeError(f"{t.shape[0]} timesteps for a batch of {x0.shape[0]}")
    noise = eps
    if gamma_ip > 0:
        if eps_extra is None or eps_extra.shape != x0.shape:
            raise ShapeError("eps_extra must be given and shaped like x0 when gamma_ip > 0")
        noise = eps + gamma_ip * eps_extra
    abar = _coef(sched, "alpha_bars", t, x0)
    return _sqrt(abar) * x0 + _sqrt(1.0 - abar) * noise


def posterior_step(x_t: Tensor, eps_hat: Tensor, t: int, sched: Schedule, v: Optional[Tensor] = None) -> Tensor:
    """One ancestral step x_t -> x_{t-1}. ``v`` is ignored at ``t == 1``."""
    sched.check(t)
    t = int(t)
    if eps_hat.shape != x_t.shape:
        raise ShapeError(f"eps_hat shape {tuple(eps_hat.shape)} != x_t shape {tuple(x_t.shape)}")
    beta = float(sched.betas[t - 1])
    alpha = float(sched.alphas[t - 1])
    abar = float(sched.alpha_bars[t - 1])
    mean = (x_t - (beta / math.sqrt(1.0 - abar)) * eps_hat) / math.sqrt(alpha)
    if t == 1 or v is None:
        return mean
    if v.shape != x_t.shape:
        raise ShapeError(f"v shape {tuple(v.shape)} != x_t shape {tuple(x_t.shape)}")
    return mean + float(sched.sigmas[t - 1]) * v


def posterior_mean_coefs(sched: Schedule, t: int) -> tuple[float, float]:
    """Coefficients (c0, ct) of the true posterior mean c0 x_0 + ct x_t."""
    beta = float(sched.betas[t - 1])
    abar = float(sched.alpha_bars[t - 1])
    abar_prev = sched.alpha_bar_prev(t)
    c0 = math.sqrt(abar_prev) * beta / (1.0 - abar)
    ct = math.sqrt(float(sched.alphas[t - 1])) * (1.0 - abar_prev) / (1.0 - abar)
    return c0, ct


def _log_sub_exp(a: Tensor, b: Tensor) -> Tensor:
    """log(exp(a) - exp(b)) for a >= b."""
    return a + torch.log(-torch.expm1(torch.clamp(b - a, max=-1e-300)))


def discretized_gaussian_log_likelihood(x0: Tensor, mean: Tensor, std: float, bins: int = 256) -> Tensor:
    """Log mass of the 8-bit bin containing ``x0`` under N(mean, std^2).

    Bins have width 2/(bins-1) on [-1, 1]; the outermost bins extend to
    infinity. Masses are floored at 1e-12.
    """
    half = 1.0 / (bins - 1)
    upper = (x0 - mean + half) / std
    lower = (x0 - mean - half) / std
    log_cdf_upper = torch.special.log_ndtr(upper)
    log_sf_lower = torch.special.log_ndtr(-lower)
    # difference of tails is taken on whichever side keeps it away from 1 - 1
    mid = torch.where(
        lower > 0,
        _log_sub_exp(log_sf_lower, torch.special.log_ndtr(-upper)),
        _log_sub_exp(log_cdf_upper, torch.special.log_ndtr(lower)),
    )
    edge = 1.0 - half / 2
    out = torch.where(x0 < -edge, log_cdf_upper, torch.where(x0 > edge, log_sf_lower, mid))
    return torch.clamp(out, min=math.log(1e-12))


EpsFn = Callable[[Tensor, int], Tensor]


def nll_terms(
    x0: Tensor,
    eps_hat_fn: EpsFn,
    sched: Schedule,
    generator: Optional[torch.Generator] = None,
) -> Tensor:
    """Per-example variational bound terms in nats, shape (B, T + 1).

    Column 0 is the decoder term at t=1, columns 1..T-1 the KL terms for
    t=2..T, and the last column the prior term at T. One x_t draw per step.
    ``eps_hat_fn`` receives the denoiser time index (``sched.timesteps``).
    """
    B = x0.shape[0]
    dims = tuple(range(1, x0.dim()))
    out = torch.zeros(B, sched.T + 1, dtype=x0.dtype, device=x0.device)

    abar_T = float(sched.alpha_bars[-1])
    mean_T = math.sqrt(abar_T) * x0
    var_T = 1.0 - abar_T
    kl_prior = 0.5 * (mean_T ** 2 + var_T - 1.0 - math.log(var_T))
    out[:, sched.T] = kl_prior.sum(dims)

    for t in range(1, sched.T + 1):
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype, device=x0.device)
        x_t = q_sample(x0, t, eps, sched)
        with torch.no_grad():
            eps_hat = eps_hat_fn(x_t, sched.model_time(t))
        mu = posterior_step(x_t, eps_hat, t, sched)
        if t == 1:
            std = math.sqrt(float(sched.betas[0]))
            term = -discretized_gaussian_log_likelihood(x0, mu, std)
        else:
            c0, ct = posterior_mean_coefs(sched, t)
            mu_true = c0 * x0 + ct * x_t
            var = float(sched.sigmas[t - 1]) ** 2
            term = (mu_true - mu) ** 2 / (2.0 * var)
        term = term.sum(dims)
        if not torch.isfinite(term).all():
            raise NumericError(f"non-finite bound term at timestep t={t}")
        out[:, t - 1] = term
    return out


def nll_bpd(
    x0: Tensor,
    eps_hat_fn: EpsFn,
    sched: Schedule,
    generator: Optional[torch.Generator] = None,
) -> float:
    """Variational upper bound on the negative log-likelihood in bits per dimension."""
    if x0.dim() < 2:
        raise ShapeError("x0 must be batched: (B, ...)")
    terms = nll_terms(x0, eps_hat_fn, sched, generator)
    dim = x0[0].numel()
    bpd = terms.sum(1).mean().item() / (dim * math.log(2.0))
    if not math.isfinite(bpd):
        raise NumericError("non-finite bits-per-dimension")
    return max(bpd, 0.0)


def gaussian_optimal_eps(m: float, s: float, sched: Schedule) -> EpsFn:
    """Exact noise predictor E[eps | x_t] for data ~ N(m, s^2).

    Returned callable takes the denoiser time index, so it also works with a
    strided sub-schedule.
    """
    def fn(x_t: Tensor, model_t: int) -> Tensor:
        abar = _full_alpha_bar(sched, model_t)
        return (x_t - math.sqrt(abar) * m) * math.sqrt(1.0 - abar) / (abar * s * s + 1.0 - abar)
    return fn


def _full_alpha_bar(sched: Schedule, model_t: int) -> float:
    idx = np.searchsorted(sched.timesteps, model_t)
    if idx >= sched.T or sched.timesteps[idx] != model_t:
        raise TimestepError(f"time index {model_t} not in schedule")
    return float(sched.alpha_bars[idx])
