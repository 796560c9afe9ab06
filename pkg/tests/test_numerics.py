import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from stev.numerics import AdamState, NonFiniteError, Rng, adam_step, dilated_conv1d, finite_diff_check


def conv_by_definition(x, w, d):
    c_out, c_in, k = w.shape
    t_out = x.shape[1] - d * (k - 1)
    out = np.zeros((c_out, t_out))
    for o in range(c_out):
        for t in range(t_out):
            out[o, t] = sum(w[o, c, j] * x[c, t + j * d] for c in range(c_in) for j in range(k))
    return out


def test_conv_output_length():
    y = dilated_conv1d(torch.zeros(3, 12, dtype=torch.float64), torch.zeros(5, 3, 2, dtype=torch.float64), 1)
    assert y.shape == (5, 11)


def test_conv_identity_impulse():
    x = torch.randn(4, 9, dtype=torch.float64)
    w = torch.eye(4, dtype=torch.float64)[:, :, None]
    assert torch.equal(dilated_conv1d(x, w, 3), x)


def test_conv_hand_example():
    x = torch.tensor([[1.0, 2.0, 3.0, 4.0]], dtype=torch.float64)
    w = torch.tensor([[[1.0, 1.0]]], dtype=torch.float64)
    assert dilated_conv1d(x, w, 2).tolist() == [[4.0, 6.0]]


@pytest.mark.parametrize("d,k", [(1, 2), (2, 2), (3, 3), (1, 1)])
def test_conv_matches_definition(d, k):
    rng = np.random.default_rng(d * 10 + k)
    x, w = rng.normal(size=(3, 14)), rng.normal(size=(2, 3, k))
    got = dilated_conv1d(torch.tensor(x), torch.tensor(w), d).numpy()
    np.testing.assert_allclose(got, conv_by_definition(x, w, d), atol=1e-12)


def test_conv_channels_last_agrees():
    x = torch.randn(5, 3, 10, dtype=torch.float64)
    w = torch.randn(4, 3, 2, dtype=torch.float64)
    a = dilated_conv1d(x, w, 2)
    b = dilated_conv1d(x.transpose(1, 2), w, 2, channels_last=True).transpose(1, 2)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-13)


def test_conv_errors():
    with pytest.raises(ValueError, match="input channels"):
        dilated_conv1d(torch.zeros(2, 8, dtype=torch.float64), torch.zeros(1, 3, 2, dtype=torch.float64))
    with pytest.raises(ValueError, match="block3.layer2"):
        dilated_conv1d(torch.zeros(1, 2, dtype=torch.float64), torch.zeros(1, 1, 2, dtype=torch.float64),
                       2, name="block3.layer2")


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_conv_bilinear(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    x, y = (torch.randn(2, 11, generator=g, dtype=torch.float64) for _ in range(2))
    w, v = (torch.randn(3, 2, 2, generator=g, dtype=torch.float64) for _ in range(2))
    lhs = dilated_conv1d(a * x + b * y, w, 2)
    rhs = a * dilated_conv1d(x, w, 2) + b * dilated_conv1d(y, w, 2)
    torch.testing.assert_close(lhs, rhs, rtol=0, atol=1e-12)
    lhs = dilated_conv1d(x, a * w + b * v, 2)
    rhs = a * dilated_conv1d(x, w, 2) + b * dilated_conv1d(x, v, 2)
    torch.testing.assert_close(lhs, rhs, rtol=0, atol=1e-12)


def test_adam_zero_gradient_is_fixed_point():
    p = {"w": torch.randn(3, 4, dtype=torch.float64)}
    before = p["w"].clone()
    state = adam_step(p, {"w": torch.zeros(3, 4, dtype=torch.float64)}, AdamState(), lr=0.1)
    assert torch.equal(p["w"], before)
    assert state.step == 1


def test_adam_first_step_by_hand():
    # m = 0.1, v = 0.001 -> bias-corrected m_hat = 1, v_hat = 1
    p = {"p": torch.tensor([1.0], dtype=torch.float64)}
    adam_step(p, {"p": torch.tensor([1.0], dtype=torch.float64)}, AdamState(), lr=0.1)
    assert p["p"].item() == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-15)
    assert p["p"].item() == pytest.approx(0.9, abs=1e-8)


def test_adam_two_steps_differ_from_doubled_lr():
    g = {"p": torch.tensor([0.3], dtype=torch.float64)}
    a = {"p": torch.tensor([1.0], dtype=torch.float64)}
    b = {"p": torch.tensor([1.0], dtype=torch.float64)}
    sa = AdamState()
    adam_step(a, g, sa, lr=0.1)
    adam_step(a, g, sa, lr=0.1)
    adam_step(b, g, AdamState(), lr=0.2)
    assert a["p"].item() != b["p"].item()
    assert sa.step == 2


def test_adam_rejects_nonfinite_gradient():
    p = {"head.w1": torch.zeros(2, dtype=torch.float64)}
    with pytest.raises(NonFiniteError, match="head.w1"):
        adam_step(p, {"head.w1": torch.tensor([0.0, float("nan")], dtype=torch.float64)}, AdamState())


def test_gradcheck_quadratic_passes():
    p = {"a": torch.randn(5, dtype=torch.float64), "b": torch.randn(2, 3, dtype=torch.float64)}
    loss = lambda: sum((t ** 2).sum() for t in p.values())
    report = finite_diff_check(loss, p, {k: 2 * v for k, v in p.items()}, rel_tol=1e-6)
    assert report.passed, str(report)


def test_gradcheck_detects_scaled_gradient():
    p = {"a": torch.randn(5, dtype=torch.float64)}
    report = finite_diff_check(lambda: (p["a"] ** 2).sum(), p, {"a": 2.02 * p["a"]})
    assert not report.passed


def test_gradcheck_subsamples_large_groups():
    p = {"a": torch.randn(500, dtype=torch.float64)}
    report = finite_diff_check(lambda: (p["a"] ** 2).sum(), p, {"a": 2 * p["a"]}, max_entries=64)
    assert report.n_checked["a"] == 64 and report.passed


def test_rng_streams_are_independent_of_draw_order():
    a = Rng(5)
    a.stream("x").np.normal(size=100)
    first = a.stream("y").np.normal(size=3)
    second = Rng(5).stream("y").np.normal(size=3)
    assert np.array_equal(first, second)
    assert not np.array_equal(Rng(5).stream("z").np.normal(size=3), second)
