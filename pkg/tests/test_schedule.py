import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from dualcond.schedule import build_schedule, forward_diffuse


def product_oracle(betas):
    out = []
    for t in range(1, len(betas) + 1):
        p = 1.0
        for b in betas[:t]:
            p *= 1.0 - b
        out.append(p)
    return np.array(out)


def test_default_schedule_endpoints():
    s = build_schedule(1000, 0.0015, 0.0195)
    assert s.betas[0] == 0.0015
    assert s.betas[999] == pytest.approx(0.0195, abs=1e-15)
    assert s.T == 1000


def test_single_step_schedule():
    s = build_schedule(1, 0.1, 0.1)
    np.testing.assert_allclose(s.betas, [0.1])
    np.testing.assert_allclose(s.alphas, [0.9])
    np.testing.assert_allclose(s.alpha_bars, [0.9])


def test_three_step_alpha_bars():
    s = build_schedule(3, 0.1, 0.3)
    np.testing.assert_allclose(s.alpha_bars, [0.9, 0.72, 0.504], rtol=1e-12)


@pytest.mark.parametrize("args", [(0, 0.1, 0.2), (-3, 0.1, 0.2), (10, 0.0, 0.2), (10, 0.3, 0.2),
                                  (10, 0.1, 1.0), (2.5, 0.1, 0.2)])
def test_rejects_bad_parameters(args):
    with pytest.raises(ValueError):
        build_schedule(*args)


def test_schedule_invariants():
    s = build_schedule(1000, 0.0015, 0.0195)
    assert np.all((s.betas > 0) & (s.betas < 1))
    assert np.all(np.diff(s.betas) >= 0)
    assert np.all(np.diff(s.alpha_bars) < 0)
    assert np.all((s.alpha_bars > 0) & (s.alpha_bars < 1))
    assert s.alpha_bars[0] == s.alphas[0]
    np.testing.assert_allclose(s.alpha_bars[1:], s.alpha_bars[:-1] * s.alphas[1:], rtol=1e-15)
    assert s.alpha_bars[-1] < 0.01
    assert s.alpha_bar(0) == 1.0


def test_incremental_matches_direct_product():
    s = build_schedule(1000, 0.0015, 0.0195)
    direct = product_oracle(list(s.betas))
    rel = np.abs(s.alpha_bars - direct) / direct
    assert rel.max() <= 1e-10


def test_schedule_is_immutable():
    s = build_schedule(5, 0.1, 0.2)
    with pytest.raises(ValueError):
        s.betas[0] = 0.5


def test_forward_zero_noise_is_mean():
    s = build_schedule(1000, 0.0015, 0.0195)
    z0 = torch.randn(3, 4, 4, dtype=torch.float64)
    out = forward_diffuse(s, z0, 250, torch.zeros_like(z0))
    torch.testing.assert_close(out, math.sqrt(s.alpha_bar(250)) * z0)


def test_forward_scalar_arithmetic():
    s = build_schedule(1, 0.1, 0.1)
    out = forward_diffuse(s, torch.tensor(1.0, dtype=torch.float64), 1, torch.tensor(1.0, dtype=torch.float64))
    assert out.item() == pytest.approx(math.sqrt(0.9) + math.sqrt(0.1), abs=1e-12)
    assert out.item() == pytest.approx(1.26491, abs=1e-5)


def test_forward_monte_carlo_marginal():
    s = build_schedule(1000, 0.0015, 0.0195)
    t, z0, n = 300, 0.7, 100_000
    g = torch.Generator().manual_seed(0)
    noise = torch.randn(n, generator=g, dtype=torch.float64)
    zt = forward_diffuse(s, torch.full((n,), z0, dtype=torch.float64), t, noise)
    ab = s.alpha_bar(t)
    mean, var = math.sqrt(ab) * z0, 1 - ab
    assert abs(zt.mean().item() - mean) <= 3 * math.sqrt(var / n)
    # standard error of the sample variance of a Gaussian: var * sqrt(2 / (n - 1))
    assert abs(zt.var().item() - var) <= 3 * var * math.sqrt(2 / (n - 1))


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, 5), t=st.integers(1, 1000), seed=st.integers(0, 2**16))
def test_forward_is_linear(a, t, seed):
    s = build_schedule(1000, 0.0015, 0.0195)
    g = torch.Generator().manual_seed(seed)
    z0 = torch.randn(2, 3, 3, generator=g, dtype=torch.float64)
    n = torch.randn(2, 3, 3, generator=g, dtype=torch.float64)
    torch.testing.assert_close(forward_diffuse(s, a * z0, t, a * n), a * forward_diffuse(s, z0, t, n))


def test_forward_per_sample_timesteps():
    s = build_schedule(100, 0.01, 0.02)
    z0 = torch.ones(2, 1, 2, 2, dtype=torch.float64)
    out = forward_diffuse(s, z0, torch.tensor([1, 100]), torch.zeros_like(z0))
    assert out[0, 0, 0, 0].item() == pytest.approx(math.sqrt(s.alpha_bar(1)))
    assert out[1, 0, 0, 0].item() == pytest.approx(math.sqrt(s.alpha_bar(100)))


@pytest.mark.parametrize("t", [0, 1001, -1])
def test_forward_rejects_bad_t(t):
    s = build_schedule(1000, 0.0015, 0.0195)
    z = torch.zeros(2)
    with pytest.raises(ValueError):
        forward_diffuse(s, z, t, z)


def test_forward_rejects_shape_mismatch():
    s = build_schedule(10, 0.01, 0.02)
    with pytest.raises(ValueError):
        forward_diffuse(s, torch.zeros(2, 2), 1, torch.zeros(2, 3))
