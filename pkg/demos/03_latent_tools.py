# coding: utf-8

# # Walking around the binary code space
#
# Bit-flip interpolation, editing along a probe's decision boundary, and
# translation between two models trained on paired domains (outlines and
# filled shapes). Set BITDAE_DEMO_ITERS to train longer.

import os

import numpy as np
import torch

from bitdae.data import SyntheticSpec, generate_synthetic
from bitdae.io import export_images
from bitdae.latent import LatentCode
from bitdae.latent_tools import classifier_translate, decision_value, fit_linear_probe, interpolate_discrete
from bitdae.sampler import DMZModel, sample
from bitdae.trainer import TrainConfig, fit
from bitdae.translate import fit_latent_map, translate_image

torch.set_num_threads(1)
ITERS = int(os.environ.get("BITDAE_DEMO_ITERS", 1000))
OUT = os.environ.get("BITDAE_DEMO_OUT", "demo_out")

cfg = TrainConfig(T=200, n_bits=4, base_channels=16, channel_multipliers=(1, 2), attention_resolutions=(4,),
                  cross_attention_resolutions=(4,), z_embed_dim=16, z_tokens=2, head_channels=16,
                  encoder_blocks=2, encoder_channels=(16, 16), batch_size=32, learning_rate=1e-3,
                  ema_decay=0.99, total_iterations=ITERS)
common = dict(resolution=8, count=512, seed=0, grid=2, radii=(2.5,), stroke=1.0)
x, labels = generate_synthetic(SyntheticSpec(**common))
model = DMZModel.from_state(fit(x, cfg, None))
z = model.encode(x).values.numpy()


def decode(codes, mode="hard", seed=0):
    # one shared x_T so that only the code changes along a row
    g = torch.Generator().manual_seed(seed)
    x_T = torch.randn((1, *model.input_shape), generator=g).expand(len(codes), -1, -1, -1).contiguous()
    return sample(model.denoiser, model.schedule_for(20), LatentCode(torch.tensor(np.array(codes)).float(), mode),
                  x_T, g)


# ## Interpolation
#
# Between two binary codes the path flips the disagreeing bits one at a time.

i, j = 0, int(np.argmax((z != z[0]).sum(1)))
path = interpolate_discrete(z[i], z[j], np.random.default_rng(0))
print("path", [p.astype(int).tolist() for p in path])
print(export_images(decode(path), f"{OUT}/interpolation.png", nrow=len(path))[0])


# ## Editing with a probe
#
# A logistic probe for "filled" defines a hyperplane in code space. Moving a
# code along the normal by delta * g(z) / |n|^2 lands on the boundary at
# delta = -1 and crosses it beyond.

probe, metrics = fit_linear_probe(z, labels["fill"])
print("fill probe accuracy", round(metrics["test_accuracy"], 2))
deltas = [0.0, -0.5, -1.0, -1.5, -2.0]
edits = classifier_translate(z[i], probe, deltas)
for d, e in zip(deltas, edits):
    print(f"delta {d:+.1f}  decision value {decision_value(probe, e):+.3f}")
print(export_images(decode(edits, "continuous"), f"{OUT}/edit.png", nrow=len(edits))[0])


# ## Translation between paired domains
#
# Two models, one per rendering style, are trained independently. A small
# MLP learns to map outline codes to filled codes from paired examples, then
# an outline image is encoded, mapped, and decoded by the filled model.

outline, lab = generate_synthetic(SyntheticSpec(style="outline", **common))
filled, _ = generate_synthetic(SyntheticSpec(style="filled", **common), labels=lab)
m_out = DMZModel.from_state(fit(outline, cfg, None))
m_fill = DMZModel.from_state(fit(filled, cfg, None))
gamma = fit_latent_map((m_out.encode(outline).values, m_fill.encode(filled).values), depth=2, width=32, epochs=100)
out, mse = translate_image(outline[:8], m_out, m_fill, gamma, torch.Generator().manual_seed(0), T_sub=20,
                           x_tgt=filled[:8])
print("translation mse per pair", np.round(mse.numpy(), 3))
print(export_images(torch.cat([outline[:8], out, filled[:8]]), f"{OUT}/translation.png", nrow=8)[0])
