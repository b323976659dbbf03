import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from lumen.checks import case_flash_chain, run_case
from lumen.diffcore import RngStream
from lumen.flash import (
    ClusterCenters,
    FlashEncoder,
    FlashParams,
    apply_flash,
    cluster_stats,
    flash_encode,
    flash_intensity,
    simulate_flash,
    soft_assign,
)

D = torch.float64


def test_soft_assign_symmetric_midpoint():
    a = soft_assign(torch.full((1, 1, 2, 2), 0.5, dtype=D), torch.tensor([0.0, 1.0], dtype=D), 0.1)
    assert torch.allclose(a, torch.full_like(a, 0.5))


def test_soft_assign_scalar_case():
    a = soft_assign(torch.zeros(1, 1, 1, 1, dtype=D), torch.tensor([0.0, 1.0], dtype=D), 0.1)
    expected = 1.0 / (1.0 + math.exp(-10.0))
    assert a[0, 0, 0, 0].item() == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.9999546, abs=1e-7)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 9), st.floats(0.01, 1.0))
def test_soft_assign_rows_sum_to_one(seed, k, tau):
    g = torch.Generator().manual_seed(seed)
    depth = torch.rand(2, 1, 5, 5, generator=g)
    mu = torch.rand(k, generator=g) * 2 - 0.5
    a = soft_assign(depth, mu, tau)
    assert torch.allclose(a.sum(1), torch.ones(2, 5, 5), atol=1e-5)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10_000), st.booleans())
def test_soft_assign_monotone_toward_center(seed, upward):
    g = torch.Generator().manual_seed(seed)
    mu = torch.rand(4, generator=g, dtype=D)
    k = int(torch.randint(4, (1,), generator=g))
    s = 1.0 if upward else -1.0
    far = mu[k].item() + s * 0.3
    near = mu[k].item() + s * 0.15
    a_far = soft_assign(torch.tensor(far, dtype=D).view(1, 1, 1, 1), mu, 0.1)[0, k].item()
    a_near = soft_assign(torch.tensor(near, dtype=D).view(1, 1, 1, 1), mu, 0.1)[0, k].item()
    # strict unless every other centre is on mu_k's side of the pixel, where
    # all distances shrink equally and the softmax ratio is unchanged
    beyond = any(s * (mu[j].item() - near) > 0 for j in range(4) if j != k)
    if beyond:
        assert a_near > a_far
    else:
        assert a_near == pytest.approx(a_far, rel=1e-12)


def test_cluster_stats_examples():
    a = torch.softmax(torch.randn(1, 3, 4, 4, dtype=D), 1)
    gray = torch.full((1, 3, 4, 4), 0.5, dtype=D)
    mean_i, max_r = cluster_stats(gray, a)
    assert torch.allclose(mean_i, torch.full_like(mean_i, 0.5), atol=1e-6)
    assert torch.allclose(max_r, torch.full_like(max_r, 0.5), atol=1e-6)
    mean_i, max_r = cluster_stats(torch.zeros_like(gray), a)
    assert torch.count_nonzero(mean_i) == 0 and torch.count_nonzero(max_r) == 0
    img = torch.tensor([0.2, 0.4, 0.6], dtype=D).view(1, 3, 1, 1).expand(1, 3, 4, 4)
    mean_i, max_r = cluster_stats(img, a)
    assert torch.allclose(mean_i, torch.full_like(mean_i, 0.4), atol=1e-6)
    assert torch.allclose(max_r, torch.full_like(max_r, 0.6), atol=1e-6)


def test_cluster_stats_zero_mass_cluster():
    a = torch.zeros(1, 2, 3, 3, dtype=D)
    a[:, 0] = 1.0
    mean_i, max_r = cluster_stats(torch.full((1, 3, 3, 3), 0.7, dtype=D), a)
    assert mean_i[0, 1].item() == 0.0 and max_r[0, 1].item() == 0.0


def test_flash_intensity_substitutions():
    z, o = torch.zeros(1, 2, dtype=D), torch.ones(1, 2, dtype=D)
    assert torch.allclose(flash_intensity(z, z), torch.full((1, 2), 1.5, dtype=D))
    assert torch.allclose(flash_intensity(o, o), torch.full((1, 2), 0.3, dtype=D))


def test_flash_noise_train_only_and_seeded():
    z = torch.zeros(2, 8)
    assert torch.equal(flash_intensity(z, z, mode="eval", rng=RngStream(1)), torch.full((2, 8), 1.5))
    a = flash_intensity(z, z, mode="train", rng=RngStream(1))
    b = flash_intensity(z, z, mode="train", rng=RngStream(1))
    c = flash_intensity(z, z, mode="train", rng=RngStream(2))
    assert torch.equal(a, b) and not torch.equal(a, c)
    # one draw per cluster per image
    assert a.shape == (2, 8) and len(set(a.flatten().tolist())) == 16


def test_apply_flash_examples():
    a = torch.zeros(1, 3, 4, 4, dtype=D)
    a[:, 1] = 1.0
    phi = torch.tensor([[0.0, 1.5, 0.0]], dtype=D)
    assert torch.equal(apply_flash(torch.zeros(1, 3, 4, 4, dtype=D), phi, a), torch.ones(1, 3, 4, 4, dtype=D))
    white = torch.ones(1, 3, 4, 4, dtype=D)
    assert torch.equal(apply_flash(white, phi, a), white)
    img = torch.rand(1, 3, 4, 4, dtype=D)
    assert torch.equal(apply_flash(img, torch.zeros(1, 3, dtype=D), a), img)


def test_flash_adds_same_field_to_every_channel():
    g = torch.Generator().manual_seed(0)
    img = 0.2 * torch.rand(1, 3, 8, 8, generator=g, dtype=D)
    a = torch.softmax(torch.randn(1, 4, 8, 8, generator=g, dtype=D), 1)
    phi = 0.1 * torch.rand(1, 4, generator=g, dtype=D)
    delta = apply_flash(img, phi, a) - img
    assert torch.allclose(delta[:, 0], delta[:, 1]) and torch.allclose(delta[:, 1], delta[:, 2])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.0, 3.0), st.floats(0.0, 1.0), st.sampled_from(["train", "eval"]))
def test_simulate_flash_range_and_brightening(seed, alpha, beta, mode):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(1, 3, 4, 4, generator=g)
    depth = torch.rand(1, 1, 4, 4, generator=g)
    centers = ClusterCenters(3)
    params = FlashParams(alpha=alpha, beta=beta)
    out, _, phi = simulate_flash(img, depth, centers, params, mode, RngStream(seed))
    assert out.min() >= 0 and out.max() <= 1
    if mode == "eval":
        assert (phi >= 0).all() and (out >= img).all()


def test_center_clamp():
    c = ClusterCenters(3)
    with torch.no_grad():
        c.mu.copy_(torch.tensor([-3.0, 0.5, 9.0]))
    c.clamp_()
    assert c.mu.tolist() == [-0.5, 0.5, 1.5]


def test_flash_encoder_shapes_and_determinism():
    enc = FlashEncoder(4)
    x = torch.rand(1, 3, 64, 64)
    feats = flash_encode(x, enc, "eval")
    assert [tuple(f.shape) for f in feats] == [(1, 4 * 2 ** i, 64 >> i, 64 >> i) for i in range(5)]
    again = flash_encode(x, enc, "eval")
    assert all(torch.equal(a, b) for a, b in zip(feats, again))
    with pytest.raises(ValueError):
        enc(torch.rand(1, 3, 40, 40))


def test_flash_chain_gradients():
    _, results = run_case(case_flash_chain)
    for r in results:
        assert r.passed, r
