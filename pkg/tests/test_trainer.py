import copy
import itertools

import numpy as np
import pytest
import torch

from bitdae import io
from bitdae.denoiser import is_z_specific
from bitdae.errors import ConfigurationError, DataError, NumericError
from bitdae.trainer import (TrainConfig, diffusion_loss, ema_update, finetune, finetune_state, fit,
                            init_state, load_state, save_state, train_step)

from helpers import mini_config


def images(n=64, seed=0, size=8):
    g = torch.Generator().manual_seed(seed)
    return torch.rand((n, 1, size, size), generator=g) * 2 - 1


def fake_clock():
    counter = itertools.count()
    return lambda: float(next(counter))


def params_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


# ---------------------------------------------------------------- config


def test_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(ema_decay=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(temperature_start=0.2, temperature_end=0.3)
    with pytest.raises(ConfigurationError):
        TrainConfig(temperature_end=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"not_a_field": 1})


def test_temperature_anneals_linearly():
    cfg = TrainConfig(total_iterations=100)
    assert cfg.temperature(0) == 1.0
    assert cfg.temperature(50) == pytest.approx(0.65)
    assert cfg.temperature(100) == pytest.approx(0.3)
    assert cfg.temperature(10_000) == pytest.approx(0.3)


def test_non_cross_modes_drop_cross_attention_fields():
    cfg = TrainConfig(conditioning_mode="concat_with_t")
    spec = cfg.denoiser_spec((1, 16, 16))
    assert spec.cross_attention_resolutions == () and not spec.mid_block_cross_attention


# ---------------------------------------------------------------- train_step


def test_lr_zero_is_stationary():
    cfg = mini_config(learning_rate=0.0, ema_decay=0.9)
    state = init_state(cfg, (1, 8, 8))
    before = copy.deepcopy(state.denoiser)
    data = images(8)
    g = torch.Generator().manual_seed(0)
    losses = np.array([train_step(data, state, cfg, g)[0] for _ in range(400)])
    assert params_equal(before, state.denoiser)
    a, b = losses[:200], losses[200:]
    se = np.sqrt(a.var() / 200 + b.var() / 200)
    assert abs(a.mean() - b.mean()) < 4 * se


@pytest.mark.slow
def test_overfit_single_image():
    cfg = mini_config(conditioning_mode="none", learning_rate=2e-3, batch_size=64, ema_decay=0.0)
    data = images(1).repeat(64, 1, 1, 1)
    state = init_state(cfg, (1, 8, 8))

    def eval_loss():
        g = torch.Generator().manual_seed(123)
        t = torch.randint(1, cfg.T + 1, (512,), generator=g)
        x0 = data[:1].repeat(512, 1, 1, 1)
        eps = torch.randn(x0.shape, generator=g)
        with torch.no_grad():
            return diffusion_loss(x0, t, eps, state.denoiser, state.schedule).item()

    initial = eval_loss()
    g = torch.Generator().manual_seed(0)
    for _ in range(2000):
        train_step(data, state, cfg, g)
    assert eval_loss() < 0.25 * initial


def test_ema_zero_decay_tracks_live():
    cfg = mini_config(ema_decay=0.0)
    state = init_state(cfg, (1, 8, 8))
    g = torch.Generator().manual_seed(0)
    for _ in range(3):
        train_step(images(8), state, cfg, g)
        assert params_equal(state.denoiser, state.ema_denoiser)
        assert params_equal(state.encoder, state.ema_encoder)


def test_ema_matches_brute_force_on_scalars():
    decay = 0.8
    live = torch.nn.Linear(1, 1, bias=False)
    shadow = copy.deepcopy(live)
    s0 = shadow.weight.item()
    values = [0.3, -1.2, 0.5, 2.0, 0.1]
    for v in values:
        with torch.no_grad():
            live.weight.fill_(v)
        ema_update(shadow, live, decay)
    n = len(values)
    expected = decay ** n * s0 + (1 - decay) * sum(decay ** (n - 1 - i) * v for i, v in enumerate(values))
    assert shadow.weight.item() == pytest.approx(expected, rel=1e-6)


def test_encoder_receives_gradient():
    cfg = mini_config()
    state = init_state(cfg, (1, 8, 8))
    g = torch.Generator().manual_seed(0)
    data = images(8)
    # the output conv and the attention output projection start at zero and sit in
    # series on the z path, so the encoder gradient is exactly zero for two steps
    for _ in range(2):
        train_step(data, state, cfg, g)
    before = copy.deepcopy(state.encoder)
    train_step(data, state, cfg, g)
    changed = [not torch.equal(a, b) for a, b in zip(before.parameters(), state.encoder.parameters())]
    assert any(changed)


def test_loss_invariant_to_batch_permutation():
    cfg = mini_config()
    state = init_state(cfg, (1, 8, 8))
    x0 = images(8)
    g = torch.Generator().manual_seed(0)
    t = torch.randint(1, cfg.T + 1, (8,), generator=g)
    eps = torch.randn(x0.shape, generator=g)
    z = torch.rand(8, cfg.n_bits, generator=g)
    perm = torch.randperm(8, generator=g)
    state.denoiser.eval()
    a = diffusion_loss(x0, t, eps, state.denoiser, state.schedule, z)
    b = diffusion_loss(x0[perm], t[perm], eps[perm], state.denoiser, state.schedule, z[perm])
    assert a.item() == pytest.approx(b.item(), rel=1e-6)


def test_nan_loss_aborts_with_diagnostics():
    cfg = mini_config()
    state = init_state(cfg, (1, 8, 8))
    bad = images(8)
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(NumericError, match="step 0.*t="):
        train_step(bad, state, cfg, torch.Generator().manual_seed(0))


# ---------------------------------------------------------------- fit


def test_fit_zero_iterations_returns_initialisation(tmp_path):
    cfg = mini_config(total_iterations=0)
    state = fit(images(16), cfg, tmp_path)
    fresh = init_state(cfg, (1, 8, 8))
    assert params_equal(state.denoiser, fresh.denoiser)
    assert params_equal(state.encoder, fresh.encoder)
    loaded = load_state(tmp_path / "final.ckpt")
    assert params_equal(loaded.denoiser, fresh.denoiser) and loaded.step == 0


def test_fit_is_deterministic(tmp_path):
    cfg = mini_config(total_iterations=12, checkpoint_every=5)
    fit(images(32), cfg, tmp_path / "a", clock=fake_clock())
    fit(images(32), cfg, tmp_path / "b", clock=fake_clock())
    a = (tmp_path / "a" / "metrics.jsonl").read_bytes()
    b = (tmp_path / "b" / "metrics.jsonl").read_bytes()
    assert a == b
    records = io.read_jsonl(tmp_path / "a" / "metrics.jsonl")
    assert [r["iteration"] for r in records] == list(range(1, 13))
    assert set(records[0]) == {"iteration", "loss", "temperature", "elapsed_seconds"}
    assert (tmp_path / "a" / "step_0000005.ckpt").exists() and (tmp_path / "a" / "step_0000010.ckpt").exists()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()


def test_unconditional_baseline_differs_only_in_z_components():
    cond = init_state(mini_config(), (1, 8, 8))
    unc = fit(images(16), mini_config(conditioning_mode="none", total_iterations=3), None)
    assert unc.encoder is None and unc.step == 3
    cond_names = {n for n, _ in cond.denoiser.named_parameters()}
    unc_names = {n for n, _ in unc.denoiser.named_parameters()}
    assert unc_names <= cond_names
    assert all(is_z_specific(n) for n in cond_names - unc_names)


def test_fit_rejects_mismatched_data():
    state = init_state(mini_config(), (1, 8, 8))
    with pytest.raises(ConfigurationError):
        fit(images(8, size=16), mini_config(), None, state=state)
    with pytest.raises(DataError):
        fit(torch.zeros(0, 1, 8, 8), mini_config(), None)


# ---------------------------------------------------------------- finetune


@pytest.fixture(scope="module")
def base_ckpt(tmp_path_factory):
    path = tmp_path_factory.mktemp("base")
    fit(images(32), mini_config(conditioning_mode="none", total_iterations=20), path)
    return path / "final.ckpt"


def test_finetune_freeze_zero_iterations(base_ckpt):
    base = load_state(base_ckpt)
    state = finetune(base_ckpt, mini_config(total_iterations=0), "new_params_only", images(16))
    base_sd = base.denoiser.state_dict()
    for name, value in state.denoiser.state_dict().items():
        if not is_z_specific(name):
            assert torch.equal(value, base_sd[name]), name


def test_finetune_freeze_after_training(base_ckpt):
    base = load_state(base_ckpt)
    state = finetune(base, mini_config(total_iterations=15), "new_params_only", images(16))
    base_sd = base.denoiser.state_dict()
    moved = False
    for name, value in state.denoiser.state_dict().items():
        if is_z_specific(name):
            moved |= not torch.equal(value, init_state(mini_config(), (1, 8, 8)).denoiser.state_dict()[name])
        else:
            assert torch.equal(value, base_sd[name]), name
    assert moved


def test_finetune_all_params_moves_shared_weights(base_ckpt):
    base = load_state(base_ckpt)
    state = finetune(base, mini_config(total_iterations=5), "all_params", images(16))
    assert not params_equal(state.denoiser.time, base.denoiser.time)


@pytest.mark.parametrize("mode", ["all_params", "new_params_only"])
def test_finetune_identity_at_init(base_ckpt, mode):
    base = load_state(base_ckpt)
    state = finetune_state(base, mini_config(), mode)
    x = images(4)
    t = torch.tensor([1, 5, 20, 50])
    z = torch.tensor([[0, 1, 1, 0], [1, 1, 1, 1], [0, 0, 0, 0], [1, 0, 1, 0]]).float()
    base.denoiser.eval()
    state.denoiser.eval()
    with torch.no_grad():
        assert torch.equal(state.denoiser(x, t, z), base.denoiser(x, t))


def test_finetune_rejects_mismatch(base_ckpt):
    base = load_state(base_ckpt)
    with pytest.raises(ConfigurationError):
        finetune_state(base, mini_config(base_channels=16), "all_params")
    with pytest.raises(ConfigurationError):
        finetune_state(base, mini_config(T=60), "all_params")
    with pytest.raises(ConfigurationError):
        finetune_state(base, mini_config(), "everything")
    cond = fit(images(16), mini_config(total_iterations=0), None)
    with pytest.raises(ConfigurationError):
        finetune_state(cond, mini_config(), "all_params")


def test_finetune_rejects_other_resolution(base_ckpt):
    base = load_state(base_ckpt)
    with pytest.raises(ConfigurationError):
        finetune(base, mini_config(total_iterations=1), "all_params", images(4, size=16))


# ---------------------------------------------------------------- persistence


def test_state_round_trip_with_optimizer(tmp_path):
    cfg = mini_config(total_iterations=4)
    state = fit(images(16), cfg, None)
    save_state(state, tmp_path / "s.ckpt")
    loaded = load_state(tmp_path / "s.ckpt")
    assert loaded.step == state.step and loaded.config == state.config
    assert loaded.schedule.equals(state.schedule)
    for a, b in [(state.denoiser, loaded.denoiser), (state.encoder, loaded.encoder),
                 (state.ema_denoiser, loaded.ema_denoiser), (state.ema_encoder, loaded.ema_encoder)]:
        assert params_equal(a, b)
    # continuing from the loaded state matches continuing in memory
    g1, g2 = torch.Generator().manual_seed(9), torch.Generator().manual_seed(9)
    data = images(8)
    l1, _ = train_step(data, state, cfg, g1)
    l2, _ = train_step(data, loaded, cfg, g2)
    assert l1 == l2
    assert params_equal(state.denoiser, loaded.denoiser)
