import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stev.data import ConfigError
from stev.flat import flatten
from stev.focal import (AugmentConfig, Projection, augment, candidate_mask, drift,
                        focal_contrastive_loss, focal_temperatures, forecast_mae, jitter,
                        joint_loss, mixup, mixup_partners, naive_contrastive_loss, quantize,
                        similarity)
from stev.numerics import Rng

from conftest import random_windows

D = torch.float64


def test_quantize_example():
    x = np.array([[0.0, 0.3, 0.7, 1.0]])
    np.testing.assert_array_equal(quantize(x, 2), [[0.0, 0.0, 1.0, 1.0]])


def test_quantize_constant_row_unchanged():
    x = np.full((1, 5), 3.3)
    np.testing.assert_array_equal(quantize(x, 7), x)


def test_drift_peak_and_jitter_scale():
    rng = Rng(0)
    x = rng.np.normal(size=(50, 12))
    d = drift(x, 0.1, rng) - x
    np.testing.assert_allclose(np.abs(d).max(1), 0.1 * x.std(1), rtol=1e-12)
    j = jitter(np.tile(x, (1, 200)), 0.1, Rng(1)) - np.tile(x, (1, 200))
    np.testing.assert_allclose(j.std(1), 0.1 * x.std(1), rtol=0.15)


def test_augment_deterministic_and_shape_preserving():
    flat = flatten(random_windows(np.random.default_rng(0), [3, 4]), range(8))
    for method in ("jitter", "mixup", "hybrid"):
        cfg = AugmentConfig(method=method)
        a, b = augment(flat, cfg, Rng(4)), augment(flat, cfg, Rng(4))
        assert a.shape == flat.rows.shape and np.array_equal(a, b)


def test_mixup_partners_stay_in_subgraph():
    flat = flatten(random_windows(np.random.default_rng(1), [3, 4, 2]), range(8))
    p = mixup_partners(flat, Rng(2))
    assert (flat.subgraph_id[p] == flat.subgraph_id).all()
    x = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(mixup(x, np.arange(3), 0.2, Rng(3)), x)


def test_projection_trivial_cases():
    proj = Projection(3, 3)
    h = torch.randn(4, 3, dtype=D)
    with torch.no_grad():
        proj.weight.zero_()
        proj.bias.copy_(torch.tensor([1.0, 2.0, 3.0]))
    assert torch.equal(proj(h), proj.bias.expand(4, 3))
    with torch.no_grad():
        proj.weight.copy_(torch.eye(3))
        proj.bias.zero_()
    assert torch.equal(proj(h), h)


def test_temperatures():
    t = focal_temperatures([True, False], 0.5, 0.3)
    assert t[0].item() == pytest.approx(0.15, abs=1e-15) and t[1].item() == 0.5
    assert (focal_temperatures([True, False], 0.5, 1.0) == 0.5).all()
    for alpha in (0.0, 1.5):
        with pytest.raises(ConfigError):
            focal_temperatures([True], 0.5, alpha)
    with pytest.raises(ConfigError):
        focal_temperatures([True], 0.0, 0.5)


def test_hand_loss_two_rows():
    sim = torch.eye(2, dtype=D)
    loss = focal_contrastive_loss(sim, torch.ones(2, dtype=D), [0, 1])
    assert loss.item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)
    assert loss.item() == pytest.approx(0.31326169, abs=1e-8)


def test_single_subgraph_loss_is_zero_with_zero_gradient():
    sim = torch.randn(4, 4, dtype=D, requires_grad=True)
    loss = focal_contrastive_loss(sim, torch.full((4,), 0.5, dtype=D), [0, 0, 0, 0])
    loss.backward()
    assert loss.item() == 0.0
    assert (sim.grad == 0).all()


def test_candidate_mask():
    m = candidate_mask([0, 0, 1])
    assert m.tolist() == [[True, False, True], [False, True, True], [True, True, True]]
    assert candidate_mask([0, 0, 1], filter_negatives=False).all()


def test_similarity_is_dot_product():
    z, za = torch.randn(3, 5, dtype=D), torch.randn(3, 5, dtype=D)
    s = similarity(z, za)
    assert s[1, 2].item() == pytest.approx(float(z[1] @ za[2]), abs=1e-14)
    c = similarity(z, za, cosine=True)
    assert c.abs().max() <= 1 + 1e-12


def test_large_similarities_do_not_overflow():
    sim = torch.tensor([[1000.0, 999.0], [0.0, 2000.0]], dtype=D)
    loss = focal_contrastive_loss(sim, torch.full((2,), 0.1, dtype=D), [0, 1])
    assert math.isfinite(loss.item())


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 6), seed=st.integers(0, 2 ** 31), alpha=st.floats(0.05, 1.0),
       filt=st.booleans())
def test_stabilized_matches_naive(n, seed, alpha, filt):
    rng = np.random.default_rng(seed)
    sim = torch.tensor(rng.normal(size=(n, n)), dtype=D)
    sub = np.sort(rng.integers(0, 3, size=n))
    tau = focal_temperatures(rng.uniform(size=n) < 0.4, 0.5, alpha)
    got = focal_contrastive_loss(sim, tau, sub, filt).item()
    assert got == pytest.approx(naive_contrastive_loss(sim, tau, sub, filt), abs=1e-10)
    assert got >= 0


def test_smaller_alpha_sharpens_expanding_rows():
    # expanding row 0 with a wrong-signed negative: sharper temperature grows its penalty
    sim = torch.tensor([[0.2, 0.9], [0.1, 0.5]], dtype=D)
    losses = [focal_contrastive_loss(sim, focal_temperatures([True, False], 0.5, a), [0, 1]).item()
              for a in (1.0, 0.6, 0.3, 0.1)]
    assert losses == sorted(losses)


def test_forecast_mae_and_joint_loss():
    y = torch.randn(4, 3, dtype=D)
    assert joint_loss(y, y, torch.tensor(0.7, dtype=D)).item() == pytest.approx(0.7)
    assert joint_loss(y + 1, y, torch.tensor(0.0, dtype=D)).item() == pytest.approx(1.0, abs=1e-15)
    mask = np.array([True, True, False, False])
    yh = y.clone()
    yh[2:] += 100
    assert forecast_mae(yh, y, mask).item() == 0.0
    l_cl = torch.tensor(0.3, dtype=D)
    yh = torch.randn(4, 3, dtype=D)
    manual = 0.3 + sum(abs(float(yh[i, q] - y[i, q])) for i in range(4) for q in range(3)) / 12
    assert joint_loss(yh, y, l_cl).item() == pytest.approx(manual, abs=1e-12)


def test_projection_gradient_check():
    from stev.numerics import finite_diff_check
    proj = Projection(4, 3, Rng(0))
    h = torch.randn(5, 4, dtype=D)
    target = torch.randn(5, 3, dtype=D)
    params = dict(proj.named_parameters())
    loss = lambda: ((proj(h) - target) ** 2).sum()
    grads = dict(zip(params, torch.autograd.grad(loss(), list(params.values()))))
    assert finite_diff_check(lambda: loss().item(), params, grads).passed


def test_joint_loss_gradient_suite():
    from gradsuite import joint_loss_gradcheck
    _, report, analytic = joint_loss_gradcheck()
    assert report.passed, str(report)
    assert analytic["graph.E"].abs().max() > 0
    assert analytic["proj.weight"].abs().max() > 0
