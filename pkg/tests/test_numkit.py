import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from latentrx import numkit
from latentrx.numkit import Adam, AdamMoments, TwoHotCodec, adam_step, clip_by_global_norm, grad_check, symexp, symlog


def test_symlog_fixed_points():
    assert symlog(0.0) == 0.0
    assert symlog(math.e - 1) == pytest.approx(1.0, abs=1e-15)
    assert symexp(symlog(-37.25)) == pytest.approx(-37.25, abs=1e-12)


@pytest.mark.parametrize("bad", [float("nan"), float("inf"), -float("inf")])
def test_symlog_rejects_non_finite(bad):
    with pytest.raises(ValueError):
        symlog(bad)
    with pytest.raises(ValueError):
        symexp(torch.tensor([1.0, bad]))


def test_symlog_roundtrip_wide_range(f64):
    x = torch.linspace(-1e6, 1e6, 20001, dtype=torch.float64)
    assert float((symexp(symlog(x)) - x).abs().max()) < 1e-12 * 1e6
    small = torch.linspace(-10, 10, 2001, dtype=torch.float64)
    assert float((symexp(symlog(small)) - small).abs().max()) < 1e-12


def test_symlog_numpy_and_tensor_agree(f64):
    x = np.array([-3.0, -0.5, 0.0, 2.0, 100.0])
    np.testing.assert_allclose(symlog(x), symlog(torch.as_tensor(x)).numpy(), rtol=0, atol=1e-15)


def test_codec_grid_properties():
    c = TwoHotCodec()
    assert c.bucket_count == 255
    assert np.all(np.diff(c.centers) > 0)
    np.testing.assert_allclose(c.centers, -c.centers[::-1], atol=1e-15)
    lo, hi = c.value_range
    assert lo == pytest.approx(-20.0) and hi == pytest.approx(20.0)
    with pytest.raises(ValueError):
        TwoHotCodec(bucket_count=1)


def test_encode_at_center_is_one_hot(f64):
    c = TwoHotCodec()
    v = symexp(float(c.centers[100]))
    p = c.encode(v)
    assert float(p[100]) == pytest.approx(1.0, abs=1e-12)
    assert int((p > 1e-12).sum()) == 1


def test_encode_midpoint_is_half_half(f64):
    c = TwoHotCodec()
    y = 0.5 * (c.centers[40] + c.centers[41])
    p = c.encode(symexp(float(y)))
    assert float(p[40]) == pytest.approx(0.5, abs=1e-9)
    assert float(p[41]) == pytest.approx(0.5, abs=1e-9)


def test_encode_clamps_out_of_range(f64):
    c = TwoHotCodec()
    p = c.encode(torch.tensor([1e4, -1e4]))
    assert float(p[0, -1]) == pytest.approx(1.0)
    assert float(p[1, 0]) == pytest.approx(1.0)


def test_twohot_roundtrip_sweep(f64):
    c = TwoHotCodec()
    v = torch.as_tensor(np.random.default_rng(0).uniform(-20, 20, 1000))
    err = (c.decode(c.encode(v)) - v).abs().max()
    assert float(err) < 1e-9


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50, allow_nan=False))
def test_encode_is_two_adjacent_probability(v):
    with numkit.precision("float64"):
        p = TwoHotCodec().encode(v)
        assert abs(float(p.sum()) - 1.0) < 1e-12
        assert float(p.min()) >= 0
        nz = torch.nonzero(p > 0).flatten()
        assert len(nz) <= 2
        if len(nz) == 2:
            assert int(nz[1] - nz[0]) == 1


def test_decode_rejects_unnormalized():
    c = TwoHotCodec()
    with pytest.raises(ValueError):
        c.decode(torch.full((255,), 1.0 / 254))
    with pytest.raises(ValueError):
        c.decode(torch.ones(10) / 10)


def test_cross_entropy_zero_on_matching_one_hot(f64):
    c = TwoHotCodec()
    target = torch.tensor([symexp(float(c.centers[7]))])
    logits = torch.full((1, 255), -1e4, dtype=torch.float64)
    logits[0, 7] = 0.0
    assert float(c.cross_entropy(logits, target)[0]) == pytest.approx(0.0, abs=1e-12)


def test_grad_check_square(f64):
    x = torch.tensor([3.0], requires_grad=True)
    assert grad_check(lambda: (x * x).sum(), [x]) < 1e-8
    (g,) = torch.autograd.grad((x * x).sum(), [x])
    assert float(g) == pytest.approx(6.0)


def test_grad_check_constant_function(f64):
    x = torch.randn(4, requires_grad=True)
    assert grad_check(lambda: torch.tensor(2.5) + 0 * x.sum(), [x]) == 0.0


def test_grad_check_rejects_nondeterministic(f64):
    x = torch.randn(3, requires_grad=True)
    with pytest.raises(RuntimeError):
        grad_check(lambda: (x * torch.randn(3)).sum(), [x])


def test_grad_check_requires_float64():
    x = torch.randn(3, dtype=torch.float32, requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: x.sum(), [x])


def test_grad_check_codec_and_symlog(f64):
    torch.manual_seed(0)
    logits = torch.randn(3, 255, requires_grad=True)
    x = torch.randn(5, requires_grad=True)
    c = TwoHotCodec()
    targets = torch.tensor([0.3, -2.0, 7.5])
    assert grad_check(lambda: c.cross_entropy(logits, targets).sum(), [logits]) < 1e-4
    assert grad_check(lambda: c.decode_logits(logits).sum(), [logits]) < 1e-4
    assert grad_check(lambda: symlog(x).pow(2).sum(), [x]) < 1e-4


def test_adam_zero_gradient_leaves_params(f64):
    p = torch.randn(5)
    before = p.clone()
    adam_step([p], [torch.zeros(5)], AdamMoments.zeros_like([p]), lr=1e-3)
    assert torch.equal(p, before)


def test_adam_first_step_moves_by_lr(f64):
    # bias-corrected first step: m_hat = g, v_hat = g^2 -> delta = lr * g / (|g| + eps)
    p = torch.tensor([0.5])
    adam_step([p], [torch.tensor([1.0])], AdamMoments.zeros_like([p]), lr=1e-3)
    assert float(p) == pytest.approx(0.5 - 1e-3 / (1 + 1e-8), abs=1e-15)


def test_adam_shape_mismatch():
    p = torch.zeros(3)
    with pytest.raises(ValueError):
        adam_step([p], [torch.zeros(4)], AdamMoments.zeros_like([p]), lr=1e-3)


def test_clip_rescales_to_ten_percent(f64):
    g = torch.tensor([600.0, 800.0])  # norm 1000
    (clipped,), norm = clip_by_global_norm([g], 100.0)
    assert norm == pytest.approx(1000.0)
    torch.testing.assert_close(clipped, g * 0.1)


def test_adam_wrapper_optimizes_quadratic(f64):
    w = torch.tensor([5.0, -3.0], requires_grad=True)
    opt = Adam([w], lr=0.1)
    for _ in range(500):
        opt.zero_grad()
        (w**2).sum().backward()
        opt.step()
    assert float(w.abs().max()) < 1e-2


def test_seeded_sampling_reproducible():
    a = torch.randn(5, generator=numkit.torch_generator(3))
    b = torch.randn(5, generator=numkit.torch_generator(3))
    assert torch.equal(a, b)


def test_precision_context():
    assert numkit.get_precision() == "float32"
    with numkit.precision("float64"):
        assert torch.zeros(1).dtype == torch.float64
    assert torch.zeros(1).dtype == torch.float32
    with pytest.raises(ValueError):
        numkit.set_precision("float16")
