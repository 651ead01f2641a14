# coding: utf-8

# # Noise schedules and the reverse chain
#
# No training here. We look at the two schedules, noise a few images, and run
# the sampler with a predictor we can write down exactly: when the data is a
# single image, the best possible noise estimate is known in closed form.

import numpy as np
import torch

from bitdae.diffusion import build_schedule, q_sample
from bitdae.sampler import make_stride, sample
from bitdae.data import SyntheticSpec, generate_synthetic


# ## The schedules
#
# Both are 1-based: step t uses betas[t - 1]. The cosine one keeps more signal
# in the middle of the chain and ends with a beta clipped at 0.999.

cos = build_schedule("cosine", 1000)
lin = build_schedule("linear", 1000)
for t in (1, 250, 500, 750, 1000):
    print(f"t={t:4d}  abar cosine {cos.alpha_bars[t - 1]:.3e}  linear {lin.alpha_bars[t - 1]:.3e}")


# ## Forward noising
#
# q_sample mixes an image with Gaussian noise at any step in one shot.

x, labels = generate_synthetic(SyntheticSpec(count=4, resolution=16, seed=0))
eps = torch.randn(x.shape, generator=torch.Generator().manual_seed(0))
for t in (1, 300, 700, 1000):
    xt = q_sample(x, t, eps, cos)
    corr = np.corrcoef(xt.flatten().numpy(), x.flatten().numpy())[0, 1]
    print(f"t={t:4d}  corr(x_t, x_0) = {corr:+.3f}")


# ## Strided chains
#
# A 10-step chain keeps the original timestep indices (so the denoiser sees
# the times it was trained on) and rebuilds betas from ratios of alpha_bar,
# which leaves the cumulative products untouched.

ts, sub = make_stride(cos, 10)
print("strided timesteps", ts.tolist())
print("max |abar gap|", np.abs(sub.alpha_bars - cos.alpha_bars[ts[::-1] - 1]).max())


# ## Sampling with an exact predictor
#
# For a point mass at x0 the optimal prediction is
# eps = (x_t - sqrt(abar) x0) / sqrt(1 - abar). Any sampler bug shows up as a
# miss.

class PointMass(torch.nn.Module):
    def __init__(self, x0, sched):
        super().__init__()
        self.x0, self.sched = x0, sched
        self.index = {int(t): i for i, t in enumerate(sched.timesteps)}

    def forward(self, x_t, t, z=None):
        a = float(self.sched.alpha_bars[self.index[int(t)]])
        return (x_t - np.sqrt(a) * self.x0) / np.sqrt(1 - a)


target = x[:1]
for steps, sched in (("1000", cos), ("10", sub)):
    out = sample(PointMass(target, sched), sched, None, torch.randn(4, *target.shape[1:]),
                 torch.Generator().manual_seed(1))
    print(f"{steps:>4} steps: max |sample - x0| = {(out - target).abs().max():.2e}")


# ## Why the predicted x0 is clipped
#
# abar at the last step is tiny, so the first reverse step divides by a very
# small sqrt(alpha). Whatever error a trained predictor makes there is
# multiplied by the factor below. The exact predictor above has no error to
# amplify; a learned one does, and unclipped samples from a trained model
# saturate at +-1. Sampling therefore clamps the implied x0 to [-1, 1] before
# each step (clip_x0=True, the default); the chain states stay unclamped.

for name, sched in (("full chain", cos), ("10 steps", sub)):
    print(f"{name:>10}: first-step error gain 1/sqrt(alpha) = {1 / np.sqrt(sched.alphas[-1]):.0f}")
