# coding: utf-8

# # Training a small model and sampling without a prior
#
# A miniature run on 8x8 shapes that finishes in a few minutes on one CPU
# core. Set BITDAE_DEMO_ITERS to train longer.

import os

import numpy as np
import torch

from bitdae.data import SyntheticSpec, generate_synthetic
from bitdae.latent import fit_ar_prior
from bitdae.latent_tools import fit_linear_probe
from bitdae.metrics import frechet_proxy, generate, latent_usage_stats, reconstruction_mse
from bitdae.sampler import DMZModel, draw_codes
from bitdae.trainer import TrainConfig, fit

torch.set_num_threads(1)
ITERS = int(os.environ.get("BITDAE_DEMO_ITERS", 1500))


# ## Data
#
# Squares and circles, outlined or filled, at four positions. Every image
# comes with its factor labels, which is what makes probing possible later.

spec = SyntheticSpec(resolution=8, count=1024, seed=0, grid=2, radii=(2.5,), stroke=1.0)
x, labels = generate_synthetic(spec)
print(x.shape, {k: int(v.max()) + 1 for k, v in labels.items()})


# ## Training
#
# The encoder and the denoiser train together on the plain noise-prediction
# loss. The code the denoiser sees is a relaxed Bernoulli sample whose
# temperature anneals from 1.0 to 0.3.

cfg = TrainConfig(T=200, n_bits=4, base_channels=16, channel_multipliers=(1, 2), attention_resolutions=(4,),
                  cross_attention_resolutions=(4,), z_embed_dim=16, z_tokens=2, head_channels=16,
                  encoder_blocks=2, encoder_channels=(16, 16), batch_size=32, learning_rate=1e-3,
                  ema_decay=0.99, total_iterations=ITERS, log_every=100)
state = fit(x, cfg, None, progress=lambda step, loss: print(f"step {step:5d}  loss {loss:.4f}")
            if step % 250 == 0 else None)
model = DMZModel.from_state(state)


# ## What the code learned
#
# The posterior code is a hard threshold of the encoder logits. Per-bit
# entropies near 1 mean every bit is in use.

z = model.encode(x)
usage = latent_usage_stats(z)
print("bit marginals", np.round(usage["marginals"], 2))
print("bit entropies", np.round(usage["entropy_bits"], 2))
for factor in ("shape", "fill", "position"):
    _, m = fit_linear_probe(z.values.numpy(), labels[factor])
    print(f"probe {factor:9s} accuracy {m['test_accuracy']:.2f}")


# ## Three ways to pick a code
#
# Posterior codes reconstruct, fair coins need no prior at all, and an
# autoregressive prior fitted to the posterior codes sits in between.

g = torch.Generator().manual_seed(0)
n = 256
ref = x[n:2 * n]
prior = fit_ar_prior(z.values, hidden=32, epochs=50)
sources = {
    "posterior": z.values[:n],
    "bernoulli": draw_codes("bernoulli", n, model.n_bits, g),
    "ar prior": draw_codes("ar", n, model.n_bits, g, prior=prior),
}
for name, codes in sources.items():
    images = generate(model, codes, n, T_sub=20, generator=g)
    print(f"{name:9s}  frechet proxy {frechet_proxy(images, ref):7.2f}")
print(f"{'data':9s}  frechet proxy {frechet_proxy(x[:n], ref):7.2f}")
print("reconstruction mse", round(reconstruction_mse(model, x[:64], 20, g), 4))
