import numpy as np
import pytest
import torch
from scipy import linalg

from bitdae import io
from bitdae.errors import DataError, NumericError
from bitdae.metrics import (frechet_proxy, gaussian_frechet, generate, latent_usage_stats, reconstruction_mse,
                            write_metric_report)
from bitdae.sampler import DMZModel, sample_from_noise
from bitdae.trainer import fit, init_state

from helpers import mini_config, randomize


# ---------------------------------------------------------------- Frechet proxy


def test_frechet_identical_sets():
    x = np.random.default_rng(0).normal(size=(500, 20))
    assert frechet_proxy(x, x) == pytest.approx(0.0, abs=1e-8)


def test_frechet_mean_gap():
    rng = np.random.default_rng(1)
    d = 1.5
    a = rng.normal(size=(10_000, 4))
    b = rng.normal(size=(10_000, 4))
    b[:, 0] += d
    assert frechet_proxy(a, b) == pytest.approx(d * d, rel=0.1)


def test_frechet_symmetric_exactly():
    rng = np.random.default_rng(2)
    a = rng.normal(size=(200, 10)) @ rng.normal(size=(10, 10))
    b = rng.normal(size=(150, 10)) * 2
    assert frechet_proxy(a, b) == frechet_proxy(b, a)


def test_gaussian_frechet_against_scipy_sqrtm():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(6, 6))
    B = rng.normal(size=(6, 6))
    Sa, Sb = A @ A.T + 0.1 * np.eye(6), B @ B.T + 0.1 * np.eye(6)
    ma, mb = rng.normal(size=6), rng.normal(size=6)
    ref = np.sum((ma - mb) ** 2) + np.trace(Sa + Sb - 2 * linalg.sqrtm(Sa @ Sb).real)
    assert gaussian_frechet(ma, Sa, mb, Sb) == pytest.approx(ref, rel=1e-8)


def test_frechet_more_features_than_samples():
    rng = np.random.default_rng(4)
    val = frechet_proxy(rng.normal(size=(20, 256)), rng.normal(size=(20, 256)))
    assert np.isfinite(val) and val > 0


def test_frechet_disjoint_halves_shrink_with_count():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(20_000, 8)) * rng.uniform(0.5, 2, 8)
    small = frechet_proxy(x[:100], x[100:200])
    large = frechet_proxy(x[:10_000], x[10_000:])
    assert large < small / 10


def test_frechet_errors():
    with pytest.raises(DataError):
        frechet_proxy(np.zeros((1, 3)), np.zeros((5, 3)))
    with pytest.raises(NumericError):
        frechet_proxy(np.full((5, 3), np.nan), np.zeros((5, 3)))


def test_frechet_takes_image_tensors_and_feature_fn():
    x = torch.rand(50, 1, 4, 4)
    assert frechet_proxy(x, x) == pytest.approx(0.0, abs=1e-8)
    val = frechet_proxy(x, x + 1, feature_fn=lambda t: t.mean(dim=(1, 2, 3), keepdim=True))
    assert val == pytest.approx(1.0, rel=1e-3)


# ---------------------------------------------------------------- latent usage


def test_usage_all_zero():
    s = latent_usage_stats(np.zeros((100, 5)))
    assert np.all(s["marginals"] == 0) and np.all(s["entropy_bits"] == 0)
    np.testing.assert_array_equal(s["correlation"], np.eye(5))


def test_usage_fair_bits():
    z = np.random.default_rng(0).integers(0, 2, (100_000, 8))
    s = latent_usage_stats(z)
    assert np.all(s["entropy_bits"] > 0.999)


def test_usage_duplicated_column():
    z = np.random.default_rng(1).integers(0, 2, (1000, 4))
    z[:, 3] = z[:, 1]
    c = latent_usage_stats(z)["correlation"]
    assert c[1, 3] == pytest.approx(1.0) and c[3, 1] == pytest.approx(1.0)
    assert np.array_equal(c, c.T) and np.all(np.diag(c) == 1)


def test_usage_empty():
    with pytest.raises(DataError):
        latent_usage_stats(np.zeros((0, 4)))


# ---------------------------------------------------------------- reconstruction


def _random_model():
    state = init_state(mini_config(), (1, 8, 8))
    randomize(state.ema_denoiser, scale=0.05)
    randomize(state.ema_encoder, scale=0.3, seed=1)
    return DMZModel.from_state(state)


def test_reconstruction_deterministic():
    model = _random_model()
    data = torch.rand(6, 1, 8, 8) * 2 - 1
    a = reconstruction_mse(model, data, 10, torch.Generator().manual_seed(0))
    b = reconstruction_mse(model, data, 10, torch.Generator().manual_seed(0))
    assert a == b
    with pytest.raises(DataError):
        reconstruction_mse(model, data[:0], 10)


@pytest.mark.slow
def test_reconstruction_overfit_single_image():
    cfg = mini_config(learning_rate=2e-3, batch_size=32, ema_decay=0.0, total_iterations=1000, gamma_ip=0.0)
    g = torch.Generator().manual_seed(0)
    target = (torch.rand(1, 1, 8, 8, generator=g) > 0.5).float() * 1.6 - 0.8
    model = DMZModel.from_state(fit(target.repeat(32, 1, 1, 1), cfg, None))
    assert reconstruction_mse(model, target, None, torch.Generator().manual_seed(1)) < 0.05


def test_reconstruction_untrained_no_better_than_noise_chain():
    model = _random_model()
    data = torch.rand(64, 1, 8, 8) * 2 - 1
    mse = reconstruction_mse(model, data, 10, torch.Generator().manual_seed(0))
    # null: the same chain with a fresh Bernoulli code knows nothing of the data
    z = torch.randint(0, 2, (64, 4), generator=torch.Generator().manual_seed(1)).float()
    ref = sample_from_noise(model, model.schedule_for(10), z, 64, torch.Generator().manual_seed(2))
    null = float(((ref - data) ** 2).mean())
    assert mse >= 0.9 * null


def test_generate_batches_match_single_call():
    model = _random_model()
    z = torch.randint(0, 2, (5, 4)).float()
    a = generate(model, z, 5, 10, torch.Generator().manual_seed(0), batch_size=5)
    b = generate(model, z, 5, 10, torch.Generator().manual_seed(0), batch_size=5)
    assert torch.equal(a, b) and a.shape == (5, 1, 8, 8)


def test_metric_report_round_trip(tmp_path):
    rows = [{"metric": "frechet_proxy", "value": 1.25, "n_a": 100, "n_b": 100, "seed": 3}]
    write_metric_report(tmp_path / "r.tsv", rows)
    assert io.read_report(tmp_path / "r.tsv") == rows
    with pytest.raises(DataError):
        write_metric_report(tmp_path / "bad.tsv", [{"value": 1}])
