import math

import numpy as np
import pytest
import torch

from sentseg.errors import ConfigError, InputError, NumericError
from sentseg.loss import (
    downsample_mask,
    grad_check,
    mask_pyramid,
    pixel_loss,
    total_loss,
)


def loop_downsample(mask, r):
    k = mask.shape[0] // r
    out = np.zeros((r, r), dtype=np.int8)
    for i in range(r):
        for j in range(r):
            block = mask[i * k:(i + 1) * k, j * k:(j + 1) * k]
            fg = sum(1 for v in block.ravel() if v > 0)
            out[i, j] = 1 if fg * 2 >= block.size else -1
    return out


def test_downsample_hand_case_with_tie():
    mask = np.array([
        [1, 1, 0, 0],
        [0, 1, 0, 0],
        [0, 0, 1, 1],
        [1, 0, 1, 1],
    ])
    got = downsample_mask(mask, 2)
    # Bottom-left block is exactly half foreground: the tie goes to +1.
    assert got.tolist() == [[1, -1], [-1, 1]]
    assert got.dtype == np.int8


def test_downsample_matches_loop_oracle_on_random_masks():
    rng = np.random.default_rng(3)
    for r in (1, 2, 4, 8):
        mask = (rng.random((16, 16)) > 0.6).astype(np.uint8)
        np.testing.assert_array_equal(downsample_mask(mask, r), loop_downsample(mask, r))


def test_downsample_identity_at_full_resolution():
    mask = np.array([[1, 0], [0, 1]])
    assert downsample_mask(mask, 2).tolist() == [[1, -1], [-1, 1]]


def test_downsample_validation():
    with pytest.raises(InputError):
        downsample_mask(np.zeros((4, 6)), 2)
    with pytest.raises(InputError):
        downsample_mask(np.zeros((4, 4)), 3)
    with pytest.raises(InputError):
        downsample_mask(np.zeros((4, 4)), 0)


def test_mask_pyramid_keys_and_consistency():
    mask = (np.random.default_rng(0).random((16, 16)) > 0.5).astype(np.uint8)
    pyr = mask_pyramid(mask, (4, 16))
    assert set(pyr) == {4, 16}
    np.testing.assert_array_equal(pyr[4], downsample_mask(mask, 4))


def test_pixel_loss_known_values():
    assert float(pixel_loss(0.0, 1.0)) == pytest.approx(math.log(2.0), rel=1e-12)
    assert float(pixel_loss(-2.0, 1.0)) == pytest.approx(math.log1p(math.exp(2.0)), rel=1e-12)
    assert float(pixel_loss(2.0, -1.0)) == pytest.approx(math.log1p(math.exp(2.0)), rel=1e-12)
    # Deep in the correct regime the loss is exp(-s*y), far below float32 reach.
    assert float(pixel_loss(100.0, 1.0)) == pytest.approx(math.exp(-100.0), rel=1e-10)
    # Deep in the wrong regime it grows linearly instead of overflowing.
    assert float(pixel_loss(-100.0, 1.0)) == pytest.approx(100.0, rel=1e-15)
    assert math.isfinite(float(pixel_loss(-1e6, 1.0)))


def test_pixel_loss_gradients_finite_and_correct_at_extremes():
    s = torch.tensor([-50.0, 0.0, 50.0], dtype=torch.float64, requires_grad=True)
    y = torch.ones(3)
    pixel_loss(s, y).sum().backward()
    assert torch.isfinite(s.grad).all()
    # dL/ds = -y * sigmoid(-s*y)
    expected = -torch.sigmoid(-s.detach())
    np.testing.assert_allclose(s.grad.numpy(), expected.numpy(), atol=1e-12)


def test_pixel_loss_is_convex_and_monotone_in_the_margin():
    s = np.linspace(-5, 5, 101)
    vals = pixel_loss(torch.from_numpy(s), torch.ones(101)).numpy()
    assert np.all(np.diff(vals) < 0)  # larger margin, smaller loss
    assert np.all(np.diff(vals, 2) > -1e-12)  # convex along s


def loop_total_loss(responses, labels, weights):
    total = 0.0
    for r, s in responses.items():
        acc = 0.0
        for i in range(r):
            for j in range(r):
                z = -s[i, j] * labels[r][i, j]
                acc += math.log1p(math.exp(z)) if z <= 30 else z + math.log1p(math.exp(-z))
        total += weights[r] * acc / (r * r)
    return total


def test_total_loss_matches_triple_loop_oracle():
    rng = np.random.default_rng(11)
    responses = {r: rng.standard_normal((r, r)) * 3 for r in (2, 4, 8)}
    labels = {r: rng.choice([-1, 1], size=(r, r)) for r in (2, 4, 8)}
    weights = {2: 0.5, 4: 1.0, 8: 2.0}
    got = float(total_loss({r: torch.from_numpy(s) for r, s in responses.items()},
                           labels, weights))
    want = loop_total_loss(responses, labels, weights)
    assert got == pytest.approx(want, rel=1e-10)


def test_total_loss_batched_is_batch_mean():
    rng = np.random.default_rng(2)
    batched = {2: torch.from_numpy(rng.standard_normal((3, 2, 2)))}
    labels = {2: torch.from_numpy(rng.choice([-1.0, 1.0], size=(3, 2, 2)))}
    weights = {2: 1.5}
    got = float(total_loss(batched, labels, weights))
    per_sample = [float(total_loss({2: batched[2][b]}, {2: labels[2][b]}, weights))
                  for b in range(3)]
    assert got == pytest.approx(np.mean(per_sample), rel=1e-12)


def test_zero_weight_terms_are_exactly_dropped():
    rng = np.random.default_rng(5)
    responses = {2: torch.from_numpy(rng.standard_normal((2, 2))),
                 8: torch.from_numpy(rng.standard_normal((8, 8)))}
    labels = {2: rng.choice([-1, 1], size=(2, 2)), 8: rng.choice([-1, 1], size=(8, 8))}
    masked = total_loss(responses, labels, {2: 0.0, 8: 1.0})
    only = total_loss({8: responses[8]}, {8: labels[8]}, {8: 1.0})
    assert float(masked) == float(only)


def test_scaling_all_weights_scales_the_loss():
    rng = np.random.default_rng(6)
    responses = {4: torch.from_numpy(rng.standard_normal((4, 4)))}
    labels = {4: rng.choice([-1, 1], size=(4, 4))}
    base = float(total_loss(responses, labels, {4: 1.0}))
    scaled = float(total_loss(responses, labels, {4: 3.0}))
    assert scaled == pytest.approx(3.0 * base, rel=1e-12)


def test_scaling_weights_keeps_gradient_direction():
    rng = np.random.default_rng(7)
    s = torch.tensor(rng.standard_normal((4, 4)), requires_grad=True)
    labels = {4: rng.choice([-1, 1], size=(4, 4))}
    total_loss({4: s}, labels, {4: 1.0}).backward()
    g1 = s.grad.clone()
    s.grad = None
    total_loss({4: s}, labels, {4: 5.0}).backward()
    g5 = s.grad
    np.testing.assert_allclose((g1 / g1.norm()).numpy(), (g5 / g5.norm()).numpy(), atol=1e-6)


def test_total_loss_validation():
    s = {2: torch.zeros(2, 2)}
    y = {2: np.ones((2, 2))}
    with pytest.raises(ConfigError):
        total_loss(s, {4: np.ones((4, 4))}, {2: 1.0})
    with pytest.raises(ConfigError):
        total_loss(s, y, {2: -1.0})
    with pytest.raises(ConfigError):
        total_loss(s, y, {2: 0.0})
    with pytest.raises(ConfigError):
        total_loss({2: torch.zeros(3, 3)}, y, {2: 1.0})
    with pytest.raises(ConfigError):
        total_loss({}, {}, {})


def test_grad_check_passes_a_linear_model():
    a = torch.tensor([1.0, -2.0, 3.0], dtype=torch.float64)
    w = torch.zeros(3, dtype=torch.float64, requires_grad=True)
    report = grad_check(lambda: (w * a).sum(), {"w": w}, eps=1e-3, tol=1e-8)
    assert report.passed
    assert set(report.block_errors) == {"w"}
    assert report.block_errors["w"] < 1e-10


class _DoubledGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return x.clone()

    @staticmethod
    def backward(ctx, g):
        return 2.0 * g


def test_grad_check_catches_a_corrupted_block():
    a = torch.tensor([1.0, 2.0], dtype=torch.float64)
    bad = torch.ones(2, dtype=torch.float64, requires_grad=True)
    good = torch.ones(2, dtype=torch.float64, requires_grad=True)

    def closure():
        return (_DoubledGrad.apply(bad) * a).sum() + (good * a).sum()

    report = grad_check(closure, {"bad": bad, "good": good}, eps=1e-3, tol=1e-2)
    assert not report.passed
    assert report.worst_block == "bad"
    assert report.block_errors["bad"] == pytest.approx(0.5, abs=1e-6)
    assert report.block_errors["good"] < 1e-8
    lines = report.lines()
    assert any(line.startswith("FAIL") and "bad" in line for line in lines)
    assert any(line.startswith("ok") and "good" in line for line in lines)


def test_grad_check_subsamples_large_blocks():
    a = torch.ones(100, dtype=torch.float64)
    w = torch.zeros(100, dtype=torch.float64, requires_grad=True)
    calls = 0

    def closure():
        nonlocal calls
        calls += 1
        return (w * a).sum()

    report = grad_check(closure, {"w": w}, eps=1e-3, tol=1e-6, max_entries_per_block=5)
    assert report.passed
    assert calls == 1 + 2 * 5  # one backward pass plus two probes per entry


def test_grad_check_rejects_non_finite_loss():
    w = torch.zeros(1, dtype=torch.float64, requires_grad=True)

    def closure():
        return (w / 0.0).sum()

    with pytest.raises(NumericError):
        grad_check(closure, {"w": w})
