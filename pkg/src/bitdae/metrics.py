"""Sample-quality and latent-usage metrics."""
from __future__ import annotations

import math
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor

from . import io
from .diffusion import Schedule, nll_bpd
from .errors import DataError, NumericError, ShapeError
from .latent import LatentCode
from .sampler import DMZModel, sample_from_noise

SHRINKAGE = 1e-6


def _features(x, feature_fn: Optional[Callable]) -> np.ndarray:
    if feature_fn is not None:
        x = feature_fn(x)
    if isinstance(x, Tensor):
        x = x.detach().cpu().numpy()
    x = np.asarray(x, dtype=np.float64)
    return x.reshape(x.shape[0], -1)


def _sqrtm_psd(S: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def _trace_sqrt_product(A: np.ndarray, B: np.ndarray) -> float:
    """tr((A B)^{1/2}) for symmetric PSD A, B, via eig(A^{1/2} B A^{1/2})."""
    rA = _sqrtm_psd(A)
    w = np.linalg.eigvalsh(rA @ B @ rA)
    return float(np.sum(np.sqrt(np.clip(w, 0.0, None))))


def gaussian_frechet(mu_a, cov_a, mu_b, cov_b) -> float:
    """|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}); symmetric to the last bit."""
    d = mu_a - mu_b
    tr_ab = 0.5 * (_trace_sqrt_product(cov_a, cov_b) + _trace_sqrt_product(cov_b, cov_a))
    val = float(d @ d + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_ab)
    if not math.isfinite(val):
        raise NumericError("Frechet distance is not finite (degenerate covariance)")
    return max(val, 0.0)


def moments(x, feature_fn: Optional[Callable] = None) -> tuple[np.ndarray, np.ndarray]:
    f = _features(x, feature_fn)
    if f.shape[0] < 2:
        raise DataError("need at least two samples per set")
    if not np.isfinite(f).all():
        raise NumericError("non-finite features")
    cov = np.cov(f, rowvar=False).reshape(f.shape[1], f.shape[1])
    return f.mean(0), cov + SHRINKAGE * np.eye(f.shape[1])


def frechet_proxy(samples_a, samples_b, feature_fn: Optional[Callable] = None) -> float:
    """Frechet distance between Gaussian fits of two sample sets (raw pixels by default)."""
    mu_a, cov_a = moments(samples_a, feature_fn)
    mu_b, cov_b = moments(samples_b, feature_fn)
    if mu_a.shape != mu_b.shape:
        raise ShapeError(f"feature dimensions differ: {mu_a.size} vs {mu_b.size}")
    return gaussian_frechet(mu_a, cov_a, mu_b, cov_b)


def reconstruction_mse(model: DMZModel, dataset: Tensor, T_sub: Optional[int] = None,
                       generator: Optional[torch.Generator] = None, batch_size: int = 256,
                       clip_x0: bool = True) -> float:
    """Mean squared error between images and samples generated from their posterior codes."""
    if dataset.shape[0] == 0:
        raise DataError("empty dataset")
    sched = model.schedule_for(T_sub)
    total, count = 0.0, 0
    for i in range(0, dataset.shape[0], batch_size):
        x = dataset[i:i + batch_size]
        z = model.encode(x) if model.encoder is not None else None
        xh = sample_from_noise(model, sched, z, x.shape[0], generator, clip_x0)
        total += float(((xh - x) ** 2).sum())
        count += x.numel()
    return total / count


def generate(model: DMZModel, codes, count: int, T_sub: Optional[int] = None,
             generator: Optional[torch.Generator] = None, batch_size: int = 256,
             clip_x0: bool = True) -> Tensor:
    """``count`` samples in batches; ``codes`` is a LatentCode/tensor with ``count`` rows, or None."""
    sched = model.schedule_for(T_sub)
    if codes is not None and not isinstance(codes, LatentCode):
        codes = LatentCode(torch.as_tensor(codes, dtype=torch.float32), "hard")
    out = []
    for i in range(0, count, batch_size):
        n = min(batch_size, count - i)
        z = None if codes is None else LatentCode(codes.values[i:i + n], codes.mode)
        out.append(sample_from_noise(model, sched, z, n, generator, clip_x0))
    return torch.cat(out)


def model_bpd(model: DMZModel, dataset: Tensor, generator: Optional[torch.Generator] = None) -> float:
    """Bits per dimension of ``dataset`` under the model, conditioning on posterior codes."""
    den = model.denoiser
    den.eval()
    z = model.encode(dataset).values if model.encoder is not None else None
    return nll_bpd(dataset, lambda x_t, t: den(x_t, t, z), model.schedule, generator)


def latent_usage_stats(codes) -> dict:
    """Per-bit marginals and entropies (bits), and the bit correlation matrix.

    Constant bits have no defined correlation; their off-diagonal entries are
    reported as 0 and the diagonal stays 1.
    """
    if isinstance(codes, LatentCode):
        codes = codes.values
    if hasattr(codes, "detach"):
        codes = codes.detach().cpu().numpy()
    z = np.asarray(codes, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise DataError("codes must be a nonempty (count, n_bits) array")
    p = z.mean(0)
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -(np.where(p > 0, p * np.log2(p), 0.0) + np.where(p < 1, (1 - p) * np.log2(1 - p), 0.0))
    centred = z - p
    sd = np.sqrt((centred ** 2).mean(0))
    cov = centred.T @ centred / z.shape[0]
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = cov / np.outer(sd, sd)
    corr[~np.isfinite(corr)] = 0.0
    corr = np.clip(0.5 * (corr + corr.T), -1.0, 1.0)
    np.fill_diagonal(corr, 1.0)
    return {"marginals": p, "entropy_bits": np.clip(h, 0.0, 1.0) + 0.0, "correlation": corr}


def write_metric_report(path, rows: list[dict]) -> None:
    """Tabular report; each row needs ``metric`` and ``value`` and may carry counts and seed."""
    for r in rows:
        if "metric" not in r or "value" not in r:
            raise DataError("report rows need 'metric' and 'value'")
    io.write_report(path, rows)
