"""Shared miniature configurations and oracles for the test suite."""
import torch

from bitdae.denoiser import Denoiser, DenoiserSpec
from bitdae.diffusion import build_schedule
from bitdae.latent import Encoder, EncoderSpec, relax_sample
from bitdae.trainer import TrainConfig, diffusion_loss


def mini_denoiser_spec(mode="cross_attention", n_bits=4, size=8):
    spec = DenoiserSpec(input_shape=(1, size, size), base_channels=8, channel_multipliers=(1, 2),
                        attention_resolutions=(size // 2,), cross_attention_resolutions=(),
                        conditioning_mode="none", n_bits=n_bits, z_embed_dim=8, z_tokens=2,
                        mid_block_cross_attention=False, head_channels=8)
    if mode == "none":
        return spec
    return spec.with_mode(mode, cross_attention_resolutions=(size // 2,))


def mini_config(**kw):
    base = dict(T=50, n_bits=4, base_channels=8, channel_multipliers=(1, 2), attention_resolutions=(4,),
                cross_attention_resolutions=(4,), z_embed_dim=8, z_tokens=2, head_channels=8,
                encoder_blocks=2, encoder_channels=(8, 8), batch_size=8, learning_rate=1e-3,
                total_iterations=10, ema_decay=0.99, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def randomize(module, scale=0.3, seed=0):
    """Overwrite every parameter with noise so no path is dead at zero-initialised layers."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.copy_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))


def gradient_check(n_bits=4, h=1e-6, elements_per_tensor=3, seed=0):
    """Compare autograd against central differences for every denoiser and encoder tensor.

    Returns {name: worst relative error}. Each tensor is probed along a random
    direction and at its largest-gradient elements, in float64.
    """
    torch.manual_seed(seed)
    den = Denoiser(mini_denoiser_spec("cross_attention", n_bits)).double()
    enc = Encoder(EncoderSpec((1, 8, 8), n_bits, 2, (8, 8))).double()
    randomize(den, seed=seed)
    randomize(enc, seed=seed + 1)
    sched = build_schedule("cosine", 50)
    g = torch.Generator().manual_seed(seed)
    x0 = torch.rand((3, 1, 8, 8), generator=g, dtype=torch.float64) * 2 - 1
    t = torch.tensor([3, 20, 47])
    eps = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    extra = torch.randn(x0.shape, generator=g, dtype=torch.float64)
    u = torch.rand((3, n_bits), generator=g, dtype=torch.float64).clamp(0.05, 0.95)

    def loss_fn():
        z = relax_sample(enc(x0), 0.7, u).values
        return diffusion_loss(x0, t, eps, den, sched, z, 0.1, extra)

    named = [("denoiser." + n, p) for n, p in den.named_parameters()]
    named += [("encoder." + n, p) for n, p in enc.named_parameters()]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in named])
    worst = {}
    for (name, p), grad in zip(named, grads):
        directions = [torch.randn(p.shape, generator=g, dtype=p.dtype)]
        # single elements where the gradient is largest, so round-off cannot dominate
        for idx in grad.abs().flatten().topk(min(elements_per_tensor, p.numel())).indices:
            e = torch.zeros_like(p)
            e.view(-1)[idx] = 1.0
            directions.append(e)
        errs = []
        for d in directions:
            with torch.no_grad():
                p.add_(h * d)
                up = loss_fn().item()
                p.sub_(2 * h * d)
                down = loss_fn().item()
                p.add_(h * d)
            fd = (up - down) / (2 * h)
            an = float((grad * d).sum())
            # floor: biases feeding a norm layer or softmax keys have exactly zero gradient
            scale = max(abs(fd), abs(an), 1e-5)
            errs.append(abs(fd - an) / scale)
        worst[name] = max(errs)
    return worst
