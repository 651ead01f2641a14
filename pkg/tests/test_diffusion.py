import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
import torch
from scipy import stats

from bitdae.diffusion import (build_schedule, cosine_alpha_bar, discretized_gaussian_log_likelihood,
                              gaussian_optimal_eps, nll_bpd, posterior_mean_coefs, posterior_step,
                              q_sample)
from bitdae.errors import ConfigurationError, NumericError, ShapeError, TimestepError


# ---------------------------------------------------------------- schedules


def test_linear_single_step():
    s = build_schedule("linear", 1, beta_start=0.02, beta_end=0.02)
    assert s.alphas.tolist() == [0.98]
    assert s.alpha_bars.tolist() == [0.98]
    assert s.sigmas.tolist() == [0.0]


def test_cosine_matches_closed_form():
    s = build_schedule("cosine", 1000)
    assert s.alpha_bars[-1] < 1e-4
    assert np.all(np.diff(s.alpha_bars) < 0)
    # independent evaluation of f(t)/f(0); only the last beta can hit the clip
    t = np.arange(1, 1000)
    f = np.cos(((t / 1000 + 0.008) / 1.008) * np.pi / 2) ** 2
    f0 = np.cos((0.008 / 1.008) * np.pi / 2) ** 2
    np.testing.assert_allclose(s.alpha_bars[:-1], f / f0, rtol=1e-10)
    assert np.all(s.betas <= 0.999)


def test_linear_product_against_extended_precision_loop():
    s = build_schedule("linear", 1000)
    getcontext().prec = 50
    prod = Decimal(1)
    for b in np.linspace(1e-4, 0.02, 1000):
        prod *= Decimal(1) - Decimal(float(b))
    assert abs(float(prod) - s.alpha_bars[-1]) / float(prod) < 1e-12


@pytest.mark.parametrize("kind", ["linear", "cosine"])
@pytest.mark.parametrize("T", [1, 2, 10, 1000])
def test_schedule_invariants(kind, T):
    s = build_schedule(kind, T)
    np.testing.assert_array_equal(s.alphas, 1.0 - s.betas)
    assert s.alpha_bars[0] == s.alphas[0]
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert s.sigmas[0] == 0.0
    if T > 1:
        expect = (1 - s.alpha_bars[:-1]) / (1 - s.alpha_bars[1:]) * s.betas[1:]
        np.testing.assert_allclose(s.sigmas[1:] ** 2, expect, rtol=1e-12)
        assert np.all((s.sigmas[1:] > 0) & (s.sigmas[1:] < 1))
    for arr in (s.betas, s.alphas, s.alpha_bars, s.sigmas):
        assert np.all(np.isfinite(arr))
    assert np.all((s.betas > 0) & (s.betas < 1))


@pytest.mark.parametrize("T", [0, -3, 2.5, True])
def test_invalid_T(T):
    with pytest.raises(ConfigurationError):
        build_schedule("linear", T)


def test_unknown_kind():
    with pytest.raises(ConfigurationError):
        build_schedule("sigmoid", 10)


def test_schedule_is_immutable_and_round_trips():
    s = build_schedule("cosine", 50)
    with pytest.raises(ValueError):
        s.betas[0] = 0.5
    assert type(s).from_dict(s.to_dict()).equals(s)


def test_marginal_consistency_two_step():
    # q(x_t | x_{t-1}) = N(sqrt(alpha_t) x_{t-1}, beta_t) composed with the closed-form marginal at t-1
    s = build_schedule("cosine", 10)
    for t in range(2, 11):
        ab_prev, a, b = s.alpha_bars[t - 2], s.alphas[t - 1], s.betas[t - 1]
        mean_coef = math.sqrt(a) * math.sqrt(ab_prev)
        var = a * (1 - ab_prev) + b
        assert mean_coef == pytest.approx(math.sqrt(s.alpha_bars[t - 1]), rel=1e-12)
        assert var == pytest.approx(1 - s.alpha_bars[t - 1], rel=1e-12)


# ---------------------------------------------------------------- forward process


def test_q_sample_degenerate_cases():
    s = build_schedule("linear", 100)
    x0 = torch.randn(4, 1, 3, 3, dtype=torch.float64)
    eps = torch.randn_like(x0)
    zero = torch.zeros_like(x0)
    t = 37
    assert torch.equal(q_sample(x0, t, zero, s), math.sqrt(s.alpha_bars[t - 1]) * x0)
    assert torch.equal(q_sample(zero, t, eps, s), math.sqrt(1 - s.alpha_bars[t - 1]) * eps)


def test_q_sample_input_perturbation():
    s = build_schedule("cosine", 20)
    x0, eps, extra = (torch.randn(2, 5, dtype=torch.float64) for _ in range(3))
    ab = s.alpha_bars[4]
    out = q_sample(x0, 5, eps, s, gamma_ip=0.1, eps_extra=extra)
    torch.testing.assert_close(out, math.sqrt(ab) * x0 + math.sqrt(1 - ab) * (eps + 0.1 * extra))


def test_q_sample_per_row_timesteps():
    s = build_schedule("cosine", 20)
    x0, eps = torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
    t = torch.tensor([1, 7, 20])
    out = q_sample(x0, t, eps, s)
    for i, ti in enumerate(t.tolist()):
        torch.testing.assert_close(out[i], q_sample(x0[i:i + 1], ti, eps[i:i + 1], s)[0])


@pytest.mark.parametrize("t", [0, 11, -1])
def test_q_sample_out_of_range(t):
    s = build_schedule("linear", 10)
    x = torch.zeros(1, 2)
    with pytest.raises(TimestepError):
        q_sample(x, t, x, s)
    assert issubclass(TimestepError, IndexError)


def test_q_sample_shape_mismatch():
    s = build_schedule("linear", 10)
    with pytest.raises(ShapeError):
        q_sample(torch.zeros(2, 3), 1, torch.zeros(2, 4), s)


def test_q_sample_monte_carlo_marginal():
    s = build_schedule("cosine", 1000)
    g = torch.Generator().manual_seed(0)
    x0 = torch.full((10_000, 1), 0.7, dtype=torch.float64)
    t = 400
    xt = q_sample(x0, t, torch.randn(x0.shape, generator=g, dtype=torch.float64), s)
    mean, sd = math.sqrt(s.alpha_bars[t - 1]) * 0.7, math.sqrt(1 - s.alpha_bars[t - 1])
    assert abs(xt.mean().item() - mean) < 3 * sd / 100
    assert abs(xt.std().item() / sd - 1) < 0.02


# ---------------------------------------------------------------- reverse step


def test_posterior_step_inverts_single_step():
    s = build_schedule("linear", 1, beta_start=0.02, beta_end=0.02)
    x0 = torch.randn(8, 3, dtype=torch.float64)
    eps = torch.randn_like(x0)
    xt = q_sample(x0, 1, eps, s)
    out = posterior_step(xt, eps, 1, s, v=torch.randn_like(x0))  # v ignored at t=1
    assert torch.max(torch.abs(out - x0) / torch.abs(x0).clamp_min(1e-3)).item() < 1e-10


def test_posterior_step_linearity_zero():
    s = build_schedule("cosine", 10)
    z = torch.zeros(2, 3)
    assert torch.equal(posterior_step(z, z, 5, s, z), z)


def test_posterior_step_adds_sigma_noise():
    s = build_schedule("cosine", 10)
    x, e, v = (torch.randn(2, 3, dtype=torch.float64) for _ in range(3))
    torch.testing.assert_close(posterior_step(x, e, 5, s, v) - posterior_step(x, e, 5, s), s.sigmas[4] * v)


def test_posterior_step_shape_mismatch():
    s = build_schedule("cosine", 10)
    with pytest.raises(ShapeError):
        posterior_step(torch.zeros(2, 3), torch.zeros(2, 2), 3, s)


def test_analytic_chain_recovers_gaussian():
    m, sd = 0.3, 0.5
    s = build_schedule("cosine", 100)
    fn = gaussian_optimal_eps(m, sd, s)
    g = torch.Generator().manual_seed(1)
    x = torch.randn(10_000, 1, generator=g, dtype=torch.float64)
    for t in range(100, 0, -1):
        v = torch.randn(x.shape, generator=g, dtype=torch.float64) if t > 1 else None
        x = posterior_step(x, fn(x, t), t, s, v)
    assert abs(x.mean().item() - m) < 0.05 * abs(m)
    assert abs(x.std().item() / sd - 1) < 0.10


# ---------------------------------------------------------------- likelihood bound


def _quadrature_bound_bits(m, sd, sched):
    """Exact expectation of the same bound for 1-D N(m, sd^2) data and the optimal predictor.

    For t >= 2 the mean error is linear in (x0, eps), so its second moment is
    closed-form; the decoder term uses 2-D Gauss-Hermite quadrature.
    """
    ab = sched.alpha_bars
    total = 0.0
    for t in range(2, sched.T + 1):
        a, b = math.sqrt(ab[t - 1]), math.sqrt(1 - ab[t - 1])
        c0, ct = posterior_mean_coefs(sched, t)
        k = b / (ab[t - 1] * sd * sd + 1 - ab[t - 1])
        beta, alpha = sched.betas[t - 1], sched.alphas[t - 1]
        g = (1 - beta / b * k) / math.sqrt(alpha)
        h = beta / b * k * a * m / math.sqrt(alpha)
        mean = c0 * m + (ct - g) * a * m - h
        second = mean ** 2 + ((c0 + (ct - g) * a) * sd) ** 2 + ((ct - g) * b) ** 2
        total += second / (2 * sched.sigmas[t - 1] ** 2)
    abT = ab[-1]
    total += 0.5 * (abT * (m * m + sd * sd) + (1 - abT) - 1 - math.log(1 - abT))
    nodes, w = np.polynomial.hermite_e.hermegauss(80)
    w = w / w.sum()
    U, E = np.meshgrid(nodes, nodes, indexing="ij")
    x0 = m + sd * U
    a, b = math.sqrt(ab[0]), math.sqrt(1 - ab[0])
    xt = a * x0 + b * E
    eh = (xt - a * m) * b / (ab[0] * sd * sd + 1 - ab[0])
    mu = (xt - sched.betas[0] / b * eh) / math.sqrt(sched.alphas[0])
    ll = discretized_gaussian_log_likelihood(torch.tensor(x0), torch.tensor(mu), math.sqrt(sched.betas[0]))
    total += -float((np.outer(w, w) * ll.numpy()).sum())
    return total / math.log(2)


def _discrete_entropy_bits(m, sd):
    upper = np.linspace(-1, 1, 256)[:-1] + 1 / 255
    cdf = np.concatenate([[0.0], stats.norm.cdf((upper - m) / sd), [1.0]])
    p = np.diff(cdf)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


@pytest.mark.parametrize("kind", ["linear", "cosine"])
def test_bpd_matches_quadrature_oracle(kind):
    m, sd = 0.0, 0.25
    s = build_schedule(kind, 1000)
    g = torch.Generator().manual_seed(0)
    x = m + sd * torch.randn(4000, 1, generator=g, dtype=torch.float64)
    mc = nll_bpd(x, gaussian_optimal_eps(m, sd, s), s, g)
    ref = _quadrature_bound_bits(m, sd, s)
    assert abs(mc / ref - 1) < 0.05
    # a valid bound never undercuts the entropy of the 8-bit discretised data
    assert ref > _discrete_entropy_bits(m, sd)


def test_bpd_zero_predictor_is_worse():
    s = build_schedule("cosine", 200)
    g = torch.Generator().manual_seed(0)
    x = 0.25 * torch.randn(2000, 1, generator=g, dtype=torch.float64)
    opt = nll_bpd(x, gaussian_optimal_eps(0.0, 0.25, s), s, torch.Generator().manual_seed(1))
    zero = nll_bpd(x, lambda xt, t: torch.zeros_like(xt), s, torch.Generator().manual_seed(1))
    assert zero > opt >= 0.0


def test_bpd_is_per_dimension():
    s = build_schedule("cosine", 100)
    fn = gaussian_optimal_eps(0.0, 0.25, s)
    g = torch.Generator().manual_seed(0)
    x1 = 0.25 * torch.randn(4000, 1, generator=g, dtype=torch.float64)
    x2 = 0.25 * torch.randn(4000, 2, generator=g, dtype=torch.float64)
    b1 = nll_bpd(x1, fn, s, torch.Generator().manual_seed(1))
    b2 = nll_bpd(x2, fn, s, torch.Generator().manual_seed(2))
    assert abs(b1 / b2 - 1) < 0.02


def test_bpd_monotone_in_predictor_quality():
    s = build_schedule("cosine", 100)
    opt = gaussian_optimal_eps(0.0, 0.25, s)
    x = 0.25 * torch.randn(2000, 1, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    values = []
    for lam in (0.0, 0.5, 0.9, 1.0):
        fn = lambda xt, t, lam=lam: lam * opt(xt, t)
        values.append(nll_bpd(x, fn, s, torch.Generator().manual_seed(3)))
    assert values == sorted(values, reverse=True)


def test_bpd_reports_offending_timestep():
    s = build_schedule("cosine", 20)

    def bad(xt, t):
        return torch.full_like(xt, float("nan")) if t == 7 else torch.zeros_like(xt)

    with pytest.raises(NumericError, match="t=7"):
        nll_bpd(torch.zeros(2, 1, dtype=torch.float64), bad, s)
