"""Noise-prediction U-Net conditioned on the timestep and, optionally, a latent code.

Three conditioning modes:

* ``none``             unconditional; any supplied code is ignored.
* ``concat_with_t``    a learned embedding of z is added to the time embedding
                       that every residual block receives.
* ``cross_attention``  z is projected to a few tokens that feature maps attend
                       to (queries from features, keys/values from z) inside
                       the attention blocks at ``cross_attention_resolutions``
                       and, optionally, the middle block.

All z-specific layers end in a zero-initialised projection, so a freshly
added conditioning path leaves the network's output unchanged.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigurationError, ShapeError
from .latent import LatentCode

CONDITIONING_MODES = ("none", "concat_with_t", "cross_attention")
Z_SPECIFIC_MARKERS = ("cross.", "z_tokens.", "z_embed.")


@dataclass(frozen=True)
class DenoiserSpec:
    input_shape: tuple = (1, 16, 16)
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 2)
    blocks_per_resolution: int = 1
    attention_resolutions: tuple = (8, 4)
    cross_attention_resolutions: tuple = (8,)
    conditioning_mode: str = "cross_attention"
    n_bits: int = 8
    z_embed_dim: int = 64
    z_tokens: int = 4
    mid_block_cross_attention: bool = True
    head_channels: int = 32
    dropout: float = 0.0

    def __post_init__(self):
        for name in ("input_shape", "channel_multipliers", "attention_resolutions",
                     "cross_attention_resolutions"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.conditioning_mode not in CONDITIONING_MODES:
            raise ConfigurationError(f"conditioning_mode must be one of {CONDITIONING_MODES}")
        if not set(self.cross_attention_resolutions) <= set(self.attention_resolutions):
            raise ConfigurationError("cross_attention_resolutions must be a subset of attention_resolutions")
        if self.conditioning_mode != "cross_attention" and (
                self.cross_attention_resolutions or self.mid_block_cross_attention):
            raise ConfigurationError(
                f"{self.conditioning_mode!r} mode takes no cross-attention; "
                "clear cross_attention_resolutions and mid_block_cross_attention")
        C, H, W = self.input_shape
        if H != W or H % (1 << (len(self.channel_multipliers) - 1)):
            raise ConfigurationError(f"input {H}x{W} incompatible with {len(self.channel_multipliers)} levels")
        if self.base_channels < 1 or self.blocks_per_resolution < 1 or self.n_bits < 1:
            raise ConfigurationError("base_channels, blocks_per_resolution and n_bits must be positive")

    @property
    def conditional(self) -> bool:
        return self.conditioning_mode != "none"

    def unconditional(self) -> "DenoiserSpec":
        """The same network with every z-specific component removed."""
        return replace(self, conditioning_mode="none", cross_attention_resolutions=(),
                       mid_block_cross_attention=False)

    def with_mode(self, mode: str, cross_attention_resolutions=None, mid_block_cross_attention=True):
        if mode != "cross_attention":
            return replace(self, conditioning_mode=mode, cross_attention_resolutions=(),
                           mid_block_cross_attention=False)
        cross = self.attention_resolutions[:1] if cross_attention_resolutions is None else cross_attention_resolutions
        return replace(self, conditioning_mode=mode, cross_attention_resolutions=tuple(cross),
                       mid_block_cross_attention=mid_block_cross_attention)

    def to_dict(self) -> dict:
        return asdict(self)


def is_z_specific(param_name: str) -> bool:
    return any(m in param_name for m in Z_SPECIFIC_MARKERS)


def sinusoidal_embedding(t: Tensor, dim: int, max_period: float = 10000.0) -> Tensor:
    """[sin(t w_k), cos(t w_k)] with w_k = max_period^(-k/half), k = 0..half-1."""
    t = torch.as_tensor(t).reshape(-1).to(torch.float64)
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


def _zero(module: nn.Module) -> nn.Module:
    for p in module.parameters():
        nn.init.zeros_(p)
    return module


class TimeEmbedding(nn.Module):
    """Sinusoidal features followed by a two-layer MLP."""

    def __init__(self, freq_dim: int, out_dim: int):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t: Tensor) -> Tensor:
        w = self.mlp[0].weight
        return self.mlp(sinusoidal_embedding(t, self.freq_dim).to(w.dtype))


def time_embed(t, dim: int, module: Optional[TimeEmbedding] = None) -> Tensor:
    """Embedding of integer timestep(s) ``t``; raw sinusoids when no module is given."""
    t = torch.as_tensor(t)
    if module is None:
        return sinusoidal_embedding(t, dim)
    return module(t)


class ResBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, emb_dim: int, dropout: float):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(c_in), c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.norm2 = nn.GroupNorm(_groups(c_out), c_out)
        self.dropout = nn.Dropout(dropout)
        self.conv2 = _zero(nn.Conv2d(c_out, c_out, 3, padding=1))
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: Tensor, emb: Tensor) -> Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(self.dropout(F.silu(self.norm2(h))))
        return self.skip(x) + h


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int) -> tuple[Tensor, Tensor]:
    """Multi-head softmax attention on (B, L, d) inputs; returns output and weights."""
    B, Lq, d = q.shape
    Lk = k.shape[1]
    dh = d // heads
    q = q.view(B, Lq, heads, dh).transpose(1, 2)
    k = k.view(B, Lk, heads, dh).transpose(1, 2)
    v = v.view(B, Lk, heads, dh).transpose(1, 2)
    w = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = (w @ v).transpose(1, 2).reshape(B, Lq, d)
    return out, w


class SelfAttention(nn.Module):
    def __init__(self, ch: int, head_channels: int):
        super().__init__()
        self.heads = max(1, ch // head_channels)
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Linear(ch, 3 * ch)
        self.out = _zero(nn.Linear(ch, ch))

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        h = self.norm(x).flatten(2).transpose(1, 2)
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        a, _ = _attend(q, k, v, self.heads)
        return x + self.out(a).transpose(1, 2).reshape(B, C, H, W)


class CrossAttention(nn.Module):
    """features + W_o Attention(W_q norm(features), W_k z_tokens, W_v z_tokens).

    Operates on token sequences (B, L, d); :meth:`forward_map` wraps it for
    (B, C, H, W) feature maps.
    """

    def __init__(self, ch: int, z_dim: int, head_channels: int):
        super().__init__()
        self.heads = max(1, ch // head_channels)
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.q = nn.Linear(ch, ch)
        self.k = nn.Linear(z_dim, ch)
        self.v = nn.Linear(z_dim, ch)
        self.out = _zero(nn.Linear(ch, ch))
        self.last_weights: Optional[Tensor] = None

    def forward(self, features: Tensor, z_tokens: Tensor) -> Tensor:
        if features.dim() != 3 or z_tokens.dim() != 3 or features.shape[0] != z_tokens.shape[0]:
            raise ShapeError("cross-attention expects (B, L, d) features and (B, m, d_z) tokens")
        if features.shape[-1] != self.q.in_features or z_tokens.shape[-1] != self.k.in_features:
            raise ShapeError(
                f"feature/token widths {features.shape[-1]}/{z_tokens.shape[-1]} do not match "
                f"{self.q.in_features}/{self.k.in_features}")
        normed = self.norm(features.transpose(1, 2)).transpose(1, 2)
        a, w = _attend(self.q(normed), self.k(z_tokens), self.v(z_tokens), self.heads)
        self.last_weights = w.detach()
        return features + self.out(a)

    def forward_map(self, x: Tensor, z_tokens: Tensor) -> Tensor:
        B, C, H, W = x.shape
        out = self.forward(x.flatten(2).transpose(1, 2), z_tokens)
        return out.transpose(1, 2).reshape(B, C, H, W)


def cross_attention(features: Tensor, z_tokens: Tensor, attn: CrossAttention) -> Tensor:
    """Residual cross-attention of ``features`` (B, L, d) onto ``z_tokens`` (B, m, d_z)."""
    return attn(features, z_tokens)


class AttentionBlock(nn.Module):
    """Self-attention, followed by cross-attention onto z where enabled."""

    def __init__(self, ch: int, head_channels: int, z_dim: Optional[int]):
        super().__init__()
        self.attn = SelfAttention(ch, head_channels)
        self.cross = CrossAttention(ch, z_dim, head_channels) if z_dim else None

    def forward(self, x: Tensor, z_tokens: Optional[Tensor]) -> Tensor:
        x = self.attn(x)
        if self.cross is not None:
            x = self.cross.forward_map(x, z_tokens)
        return x


class Level(nn.Module):
    def __init__(self, res: ResBlock, attn: Optional[AttentionBlock]):
        super().__init__()
        self.res = res
        self.attn = attn

    def forward(self, x, emb, z_tokens):
        x = self.res(x, emb)
        return self.attn(x, z_tokens) if self.attn is not None else x


class Denoiser(nn.Module):
    """U-Net predicting eps from (x_t, t[, z])."""

    def __init__(self, spec: DenoiserSpec):
        super().__init__()
        self.spec = spec
        C, H, _ = spec.input_shape
        base = spec.base_channels
        emb_dim = 4 * base
        self.time = TimeEmbedding(base, emb_dim)
        z_dim = spec.z_embed_dim if spec.conditioning_mode == "cross_attention" else None
        if spec.conditioning_mode == "concat_with_t":
            self.z_embed = nn.Sequential(nn.Linear(spec.n_bits, emb_dim), nn.SiLU(),
                                         _zero(nn.Linear(emb_dim, emb_dim)))
        elif spec.conditioning_mode == "cross_attention":
            self.z_tokens = nn.Linear(spec.n_bits, spec.z_tokens * spec.z_embed_dim)

        def attn_at(res, ch):
            if res not in spec.attention_resolutions:
                return None
            return AttentionBlock(ch, spec.head_channels,
                                  z_dim if res in spec.cross_attention_resolutions else None)

        self.conv_in = nn.Conv2d(C, base, 3, padding=1)
        self.down = nn.ModuleList()
        self.downsample = nn.ModuleList()
        skips = [base]
        ch, res = base, H
        n_levels = len(spec.channel_multipliers)
        for level, mult in enumerate(spec.channel_multipliers):
            blocks = nn.ModuleList()
            for _ in range(spec.blocks_per_resolution):
                blocks.append(Level(ResBlock(ch, base * mult, emb_dim, spec.dropout), attn_at(res, base * mult)))
                ch = base * mult
                skips.append(ch)
            self.down.append(blocks)
            if level < n_levels - 1:
                self.downsample.append(nn.Conv2d(ch, ch, 3, stride=2, padding=1))
                skips.append(ch)
                res //= 2

        self.mid_res1 = ResBlock(ch, ch, emb_dim, spec.dropout)
        self.mid_attn = AttentionBlock(ch, spec.head_channels,
                                       z_dim if spec.mid_block_cross_attention else None)
        self.mid_res2 = ResBlock(ch, ch, emb_dim, spec.dropout)

        self.up = nn.ModuleList()
        self.upsample = nn.ModuleList()
        for level, mult in reversed(list(enumerate(spec.channel_multipliers))):
            blocks = nn.ModuleList()
            for _ in range(spec.blocks_per_resolution + 1):
                blocks.append(Level(ResBlock(ch + skips.pop(), base * mult, emb_dim, spec.dropout),
                                    attn_at(res, base * mult)))
                ch = base * mult
            self.up.append(blocks)
            if level > 0:
                self.upsample.append(nn.Conv2d(ch, ch, 3, padding=1))
                res *= 2

        self.norm_out = nn.GroupNorm(_groups(ch), ch)
        self.conv_out = _zero(nn.Conv2d(ch, C, 3, padding=1))

    def embed(self, t: Tensor, z: Optional[Tensor]) -> tuple[Tensor, Optional[Tensor]]:
        emb = self.time(t)
        tokens = None
        mode = self.spec.conditioning_mode
        if mode == "none":
            return emb, None
        if z is None:
            raise ConfigurationError(f"{mode!r} denoiser needs a latent code")
        z = z.to(emb.dtype)
        if z.shape != (emb.shape[0], self.spec.n_bits):
            raise ShapeError(f"code shape {tuple(z.shape)} != ({emb.shape[0]}, {self.spec.n_bits})")
        if mode == "concat_with_t":
            emb = emb + self.z_embed(z)
        else:
            tokens = self.z_tokens(z).view(z.shape[0], self.spec.z_tokens, self.spec.z_embed_dim)
        return emb, tokens

    def forward(self, x: Tensor, t, z: Optional[Tensor] = None) -> Tensor:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise ShapeError(f"denoiser expects {self.spec.input_shape}, got {tuple(x.shape[1:])}")
        B = x.shape[0]
        t = torch.as_tensor(t, device=x.device)
        if t.dim() == 0:
            t = t.expand(B)
        emb, tokens = self.embed(t, z)

        h = self.conv_in(x)
        hs = [h]
        for level, blocks in enumerate(self.down):
            for block in blocks:
                h = block(h, emb, tokens)
                hs.append(h)
            if level < len(self.downsample):
                h = self.downsample[level](h)
                hs.append(h)

        h = self.mid_res1(h, emb)
        h = self.mid_attn(h, tokens)
        h = self.mid_res2(h, emb)

        for i, blocks in enumerate(self.up):
            for block in blocks:
                h = block(torch.cat([h, hs.pop()], dim=1), emb, tokens)
            if i < len(self.upsample):
                h = self.upsample[i](F.interpolate(h, scale_factor=2, mode="nearest"))
        return self.conv_out(F.silu(self.norm_out(h)))

    def cross_attention_modules(self) -> list[CrossAttention]:
        return [m for m in self.modules() if isinstance(m, CrossAttention)]

    def z_specific_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if is_z_specific(n)]


def denoiser_forward(x_t: Tensor, t, z, model: Denoiser) -> Tensor:
    """eps-hat for ``x_t`` at time ``t``; ``z`` may be a LatentCode, a tensor or None."""
    if isinstance(z, LatentCode):
        z = z.values
    return model(x_t, t, z)
