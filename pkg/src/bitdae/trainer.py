"""Joint training of the denoiser and the code encoder on the diffusion loss alone."""
from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor

from . import io
from .denoiser import Denoiser, DenoiserSpec, is_z_specific
from .diffusion import Schedule, build_schedule, q_sample
from .errors import ConfigurationError, DataError, NumericError
from .latent import (Encoder, EncoderSpec, LatentCode, binarize, encode_logits, gaussian_latent,
                     relax_sample)

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # diffusion
    T: int = 1000
    schedule_kind: str = "cosine"
    # latent
    n_bits: int = 8
    latent_kind: str = "bernoulli"
    conditioning_mode: str = "cross_attention"
    temperature_start: float = 1.0
    temperature_end: float = 0.3
    anneal_iters: int = 0  # 0 -> anneal over total_iterations
    # optimisation
    batch_size: int = 32
    learning_rate: float = 1e-4
    weight_decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    total_iterations: int = 1000
    ema_decay: float = 0.9999
    gamma_ip: float = 0.1
    seed: int = 0
    # denoiser architecture
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 2)
    blocks_per_resolution: int = 1
    attention_resolutions: tuple = (8, 4)
    cross_attention_resolutions: tuple = (8,)
    mid_block_cross_attention: bool = True
    z_embed_dim: int = 64
    z_tokens: int = 4
    head_channels: int = 32
    dropout: float = 0.0
    # encoder architecture
    encoder_blocks: int = 3
    encoder_channels: tuple = (32, 64, 64)
    # bookkeeping
    checkpoint_every: int = 0
    log_every: int = 1

    def __post_init__(self):
        for f in fields(self):
            if f.type == "tuple" or isinstance(getattr(self, f.name), list):
                object.__setattr__(self, f.name, tuple(getattr(self, f.name)))
        if not 0 <= self.ema_decay < 1:
            raise ConfigurationError(f"ema_decay must lie in [0, 1), got {self.ema_decay}")
        if not self.temperature_start >= self.temperature_end > 0:
            raise ConfigurationError("need temperature_start >= temperature_end > 0")
        if self.T < 1 or self.batch_size < 1 or self.total_iterations < 0:
            raise ConfigurationError("T and batch_size must be positive, total_iterations >= 0")
        if self.learning_rate < 0 or self.gamma_ip < 0:
            raise ConfigurationError("learning_rate and gamma_ip must be non-negative")
        if self.conditioning_mode != "cross_attention":
            self.cross_attention_resolutions = ()
            self.mid_block_cross_attention = False

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)

    def temperature(self, step: int) -> float:
        span = self.anneal_iters or self.total_iterations
        frac = 1.0 if span <= 0 else min(step / span, 1.0)
        return self.temperature_start + (self.temperature_end - self.temperature_start) * frac

    @property
    def conditional(self) -> bool:
        return self.conditioning_mode != "none"

    def denoiser_spec(self, input_shape) -> DenoiserSpec:
        return DenoiserSpec(
            input_shape=tuple(input_shape), base_channels=self.base_channels,
            channel_multipliers=self.channel_multipliers,
            blocks_per_resolution=self.blocks_per_resolution,
            attention_resolutions=self.attention_resolutions,
            cross_attention_resolutions=self.cross_attention_resolutions,
            conditioning_mode=self.conditioning_mode, n_bits=self.n_bits,
            z_embed_dim=self.z_embed_dim, z_tokens=self.z_tokens,
            mid_block_cross_attention=self.mid_block_cross_attention,
            head_channels=self.head_channels, dropout=self.dropout,
        )

    def encoder_spec(self, input_shape) -> EncoderSpec:
        return EncoderSpec(input_shape=tuple(input_shape), n_bits=self.n_bits,
                           n_blocks=self.encoder_blocks, channels_per_block=self.encoder_channels,
                           latent_kind=self.latent_kind)


@dataclass
class ModelState:
    """Live networks, their EMA shadows, optimiser state and the step counter."""

    config: TrainConfig
    schedule: Schedule
    denoiser: Denoiser
    encoder: Optional[Encoder]
    ema_denoiser: Denoiser
    ema_encoder: Optional[Encoder]
    optimizer: torch.optim.Optimizer
    step: int = 0

    def named_live(self):
        yield from (("denoiser." + n, p) for n, p in self.denoiser.named_parameters())
        if self.encoder is not None:
            yield from (("encoder." + n, p) for n, p in self.encoder.named_parameters())

    def named_shadow(self):
        yield from (("denoiser." + n, p) for n, p in self.ema_denoiser.named_parameters())
        if self.ema_encoder is not None:
            yield from (("encoder." + n, p) for n, p in self.ema_encoder.named_parameters())

    def trainable(self) -> list:
        return [p for _, p in self.named_live() if p.requires_grad]

    def sampling_modules(self, use_ema: bool = True):
        if use_ema:
            return self.ema_denoiser, self.ema_encoder
        return self.denoiser, self.encoder


def _make_optimizer(params, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.AdamW(params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2),
                             weight_decay=cfg.weight_decay)


def _shadow(module):
    if module is None:
        return None
    s = copy.deepcopy(module)
    s.eval()
    for p in s.parameters():
        p.requires_grad_(False)
    return s


def init_state(cfg: TrainConfig, input_shape) -> ModelState:
    """Fresh networks from ``cfg``; initialisation is seeded by ``cfg.seed``."""
    schedule = build_schedule(cfg.schedule_kind, cfg.T)
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        denoiser = Denoiser(cfg.denoiser_spec(input_shape))
        encoder = Encoder(cfg.encoder_spec(input_shape)) if cfg.conditional else None
    state = ModelState(cfg, schedule, denoiser, encoder, _shadow(denoiser), _shadow(encoder), None)
    state.optimizer = _make_optimizer(state.trainable(), cfg)
    return state


@torch.no_grad()
def ema_update(shadow: torch.nn.Module, live: torch.nn.Module, decay: float) -> None:
    """shadow <- decay * shadow + (1 - decay) * live for trainable parameters; buffers are copied."""
    for (name, s), p in zip(shadow.named_parameters(), live.parameters()):
        if p.requires_grad:
            s.mul_(decay).add_(p.detach(), alpha=1.0 - decay)
        else:
            s.copy_(p)
    for s, b in zip(shadow.buffers(), live.buffers()):
        s.copy_(b)


def latent_for_training(x0: Tensor, encoder: Encoder, temperature: float, generator) -> LatentCode:
    """Relaxed code used inside the training graph (differentiable w.r.t. the encoder)."""
    out = encode_logits(x0, encoder)
    if encoder.spec.latent_kind == "normal":
        eps = torch.randn(out.shape[0], encoder.spec.n_bits, generator=generator, dtype=out.dtype)
        return gaussian_latent(out, encoder.spec.n_bits, eps)
    u = torch.rand(out.shape, generator=generator, dtype=out.dtype)
    u = u.clamp(1e-6, 1 - 1e-6)
    return relax_sample(out, temperature, u)


def diffusion_loss(
    x0: Tensor, t: Tensor, eps: Tensor, denoiser: Denoiser, schedule: Schedule,
    z: Optional[Tensor] = None, gamma_ip: float = 0.0, eps_extra: Optional[Tensor] = None,
) -> Tensor:
    """Mean of ||eps - eps_theta(x_t, t, z)||^2 over all elements."""
    x_t = q_sample(x0, t, eps, schedule, gamma_ip, eps_extra)
    eps_hat = denoiser(x_t, t, z)
    return ((eps - eps_hat) ** 2).mean()


def train_step(batch: Tensor, state: ModelState, cfg: Optional[TrainConfig] = None,
               generator: Optional[torch.Generator] = None) -> tuple[float, ModelState]:
    """One gradient step on the denoiser and encoder jointly, then an EMA update."""
    cfg = cfg or state.config
    B = batch.shape[0]
    state.denoiser.train()
    t = torch.randint(1, state.schedule.T + 1, (B,), generator=generator)
    eps = torch.randn(batch.shape, generator=generator, dtype=batch.dtype)
    eps_extra = torch.randn(batch.shape, generator=generator, dtype=batch.dtype) if cfg.gamma_ip > 0 else None
    z = None
    temperature = cfg.temperature(state.step)
    if state.encoder is not None:
        state.encoder.train()
        z = latent_for_training(batch, state.encoder, temperature, generator).values
    loss = diffusion_loss(batch, t, eps, state.denoiser, state.schedule, z, cfg.gamma_ip, eps_extra)
    if not torch.isfinite(loss):
        raise NumericError(
            f"non-finite loss {loss.item()} at step {state.step}: t={t.tolist()}, "
            f"temperature={temperature:.3f}, |z|mean={None if z is None else float(z.mean()):}")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    ema_update(state.ema_denoiser, state.denoiser, cfg.ema_decay)
    if state.encoder is not None:
        ema_update(state.ema_encoder, state.encoder, cfg.ema_decay)
    state.step += 1
    return loss.item(), state


class BatchStream:
    """Endless shuffled minibatches; reshuffles at every epoch boundary."""

    def __init__(self, data: Tensor, batch_size: int, seed: int):
        self.data = data
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.order = np.empty(0, dtype=np.int64)

    def next(self) -> Tensor:
        while len(self.order) < self.batch_size:
            self.order = np.concatenate([self.order, self.rng.permutation(len(self.data))])
        idx, self.order = self.order[:self.batch_size], self.order[self.batch_size:]
        return self.data[torch.from_numpy(idx)]


def _check_dataset(data: Tensor, state: ModelState) -> None:
    if data.dim() != 4 or data.shape[0] == 0:
        raise DataError("dataset must be a nonempty (N, C, H, W) tensor")
    if tuple(data.shape[1:]) != state.denoiser.spec.input_shape:
        raise ConfigurationError(
            f"dataset images {tuple(data.shape[1:])} do not match model input {state.denoiser.spec.input_shape}")


def fit(
    dataset: Tensor,
    cfg: TrainConfig,
    out_dir=None,
    state: Optional[ModelState] = None,
    clock: Callable[[], float] = time.perf_counter,
    progress: Optional[Callable[[int, float], None]] = None,
) -> ModelState:
    """Run ``cfg.total_iterations`` train steps over shuffled batches of ``dataset``.

    Writes ``metrics.jsonl`` (iteration, loss, temperature, elapsed_seconds),
    periodic ``step_XXXXXXX.ckpt`` files and ``final.ckpt`` when ``out_dir``
    is given.
    """
    if dataset.dim() != 4 or dataset.shape[0] == 0:
        raise DataError("dataset must be a nonempty (N, C, H, W) tensor")
    if state is None:
        state = init_state(cfg, dataset.shape[1:])
    _check_dataset(dataset, state)
    out_dir = Path(out_dir) if out_dir is not None else None
    metrics_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics_path = out_dir / "metrics.jsonl"
        metrics_path.write_text("")
    stream = BatchStream(dataset, cfg.batch_size, cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed + 1)
    start = clock()
    for i in range(cfg.total_iterations):
        temperature = cfg.temperature(state.step)
        loss, state = train_step(stream.next(), state, cfg, gen)
        if metrics_path is not None and (state.step % cfg.log_every == 0):
            io.append_jsonl(metrics_path, {
                "iteration": state.step, "loss": loss, "temperature": temperature,
                "elapsed_seconds": clock() - start,
            })
        if progress is not None:
            progress(state.step, loss)
        if out_dir is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
            save_state(state, out_dir / f"step_{state.step:07d}.ckpt")
    if out_dir is not None:
        save_state(state, out_dir / "final.ckpt")
    return state


def check_finetune_compatible(base: DenoiserSpec, target: DenoiserSpec) -> None:
    if base.conditional:
        raise ConfigurationError("finetuning starts from an unconditional denoiser")
    if base != target.unconditional():
        diffs = {k: (v, getattr(target.unconditional(), k)) for k, v in base.to_dict().items()
                 if v != getattr(target.unconditional(), k)}
        raise ConfigurationError(f"base checkpoint does not match config: {diffs}")


def finetune_state(base: ModelState, cfg: TrainConfig, mode: str = "all_params") -> ModelState:
    """Conditional state whose shared weights come from an unconditional ``base``.

    z-specific layers and the encoder are fresh (zero output projections);
    with ``mode='new_params_only'`` every inherited denoiser weight is frozen.
    """
    if mode not in ("all_params", "new_params_only"):
        raise ConfigurationError(f"unknown finetune mode {mode!r}")
    if not cfg.conditional:
        raise ConfigurationError("finetune target must be conditional")
    input_shape = base.denoiser.spec.input_shape
    target_spec = cfg.denoiser_spec(input_shape)
    check_finetune_compatible(base.denoiser.spec, target_spec)
    if not base.schedule.equals(build_schedule(cfg.schedule_kind, cfg.T)):
        raise ConfigurationError("base schedule differs from config schedule")
    state = init_state(cfg, input_shape)
    missing, unexpected = state.denoiser.load_state_dict(base.denoiser.state_dict(), strict=False)
    if unexpected or any(not is_z_specific(k) for k in missing):
        raise ConfigurationError(f"incompatible base weights: missing={missing} unexpected={unexpected}")
    if mode == "new_params_only":
        for name, p in state.denoiser.named_parameters():
            p.requires_grad_(is_z_specific(name))
    state.ema_denoiser = _shadow(state.denoiser)
    state.ema_encoder = _shadow(state.encoder)
    state.optimizer = _make_optimizer(state.trainable(), cfg)
    return state


def finetune(base, cfg: TrainConfig, mode: str, dataset: Tensor, out_dir=None, **kw) -> ModelState:
    """Finetune an unconditional checkpoint (path or state) into a conditional model."""
    if not isinstance(base, ModelState):
        base = load_state(base)
    state = finetune_state(base, cfg, mode)
    return fit(dataset, cfg, out_dir=out_dir, state=state, **kw)


# ---------------------------------------------------------------- persistence


def _module_tensors(prefix: str, module) -> dict:
    if module is None:
        return {}
    return {f"{prefix}/{k}": v for k, v in module.state_dict().items()}


def state_tensors(state: ModelState) -> dict:
    tensors = {}
    tensors.update(_module_tensors("denoiser", state.denoiser))
    tensors.update(_module_tensors("encoder", state.encoder))
    tensors.update(_module_tensors("ema_denoiser", state.ema_denoiser))
    tensors.update(_module_tensors("ema_encoder", state.ema_encoder))
    names = [n for n, p in state.named_live() if p.requires_grad]
    params = state.trainable()
    for name, p in zip(names, params):
        st = state.optimizer.state.get(p)
        if st:
            tensors[f"optim/{name}/exp_avg"] = st["exp_avg"]
            tensors[f"optim/{name}/exp_avg_sq"] = st["exp_avg_sq"]
            tensors[f"optim/{name}/step"] = torch.as_tensor(st["step"]).reshape(())
    return tensors


def save_state(state: ModelState, path) -> None:
    meta = {
        "kind": "model_state",
        "config": state.config.to_dict(),
        "schedule": state.schedule.to_dict(),
        "denoiser_spec": state.denoiser.spec.to_dict(),
        "encoder_spec": None if state.encoder is None else state.encoder.spec.to_dict(),
        "step": state.step,
        "frozen": [n for n, p in state.named_live() if not p.requires_grad],
    }
    io.save_checkpoint(path, state_tensors(state), meta)


def _load_module(module, prefix: str, tensors: dict) -> None:
    sd = {k[len(prefix) + 1:]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith(prefix + "/")}
    module.load_state_dict(sd, strict=True)


def state_from_checkpoint(tensors: dict, meta: dict) -> ModelState:
    if meta.get("kind") != "model_state":
        raise ConfigurationError(f"checkpoint holds {meta.get('kind')!r}, not a model state")
    cfg = TrainConfig.from_dict(meta["config"])
    dspec = DenoiserSpec(**meta["denoiser_spec"])
    espec = None if meta["encoder_spec"] is None else EncoderSpec(**meta["encoder_spec"])
    denoiser = Denoiser(dspec)
    encoder = Encoder(espec) if espec is not None else None
    _load_module(denoiser, "denoiser", tensors)
    if encoder is not None:
        _load_module(encoder, "encoder", tensors)
    frozen = set(meta.get("frozen", []))
    state = ModelState(cfg, Schedule.from_dict(meta["schedule"]), denoiser, encoder,
                       _shadow(denoiser), _shadow(encoder), None, int(meta["step"]))
    _load_module(state.ema_denoiser, "ema_denoiser", tensors)
    if encoder is not None:
        _load_module(state.ema_encoder, "ema_encoder", tensors)
    for name, p in state.named_live():
        p.requires_grad_(name not in frozen)
    state.optimizer = _make_optimizer(state.trainable(), cfg)
    names = [n for n, p in state.named_live() if p.requires_grad]
    for name, p in zip(names, state.trainable()):
        key = f"optim/{name}"
        if f"{key}/exp_avg" in tensors:
            state.optimizer.state[p] = {
                "step": torch.from_numpy(tensors[f"{key}/step"]),
                "exp_avg": torch.from_numpy(tensors[f"{key}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(tensors[f"{key}/exp_avg_sq"]),
            }
    return state


def load_state(path) -> ModelState:
    tensors, meta = io.load_checkpoint(path)
    return state_from_checkpoint(tensors, meta)
