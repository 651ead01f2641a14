"""Diffusion autoencoders with binary latent codes."""
from .diffusion import Schedule, build_schedule, nll_bpd, posterior_step, q_sample
from .errors import (BitDAEError, ConfigurationError, CorruptionError, DataError,
                     DegenerateClassifierError, NumericError, ShapeError, TimestepError, VersionError)
from .latent import (ARPrior, Encoder, EncoderSpec, LatentCode, binarize, encode_logits, fit_ar_prior,
                     posterior_code, relax_sample, sample_ar_prior, sample_prior_bernoulli)
from .denoiser import Denoiser, DenoiserSpec, cross_attention, denoiser_forward, time_embed
from .trainer import ModelState, TrainConfig, finetune, fit, init_state, load_state, save_state, train_step
from .sampler import DMZModel, encode_then_generate, make_stride, sample
from .latent_tools import LinearProbe, classifier_translate, fit_linear_probe, interpolate_discrete
from .metrics import frechet_proxy, latent_usage_stats, reconstruction_mse
from .data import SyntheticSpec, generate_synthetic

__version__ = "0.1.0"
