import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from neuroseg.losses import (
    ClDiceParams, ContourParams, FocalParams, HybridWeights, LossConfig, TverskyParams,
    boundary_loss, cldice_loss, contour_weight_map, focal_loss, gradcheck, hybrid_loss,
    soft_skeleton, tversky_loss,
)

from conftest import random_mask, tie_free_probs

f64 = dict(dtype=torch.float64)


def rand_pair(seed, shape=(1, 1, 8, 8)):
    g = torch.Generator().manual_seed(seed)
    pred = torch.rand(shape, generator=g, **f64) * 0.98 + 0.01
    gt = (torch.rand(shape, generator=g, **f64) < 0.4).double()
    return pred, gt


# ---------------------------------------------------------------- Tversky

def test_tversky_perfect_prediction():
    gt = random_mask(0, (1, 1, 8, 8))
    p = TverskyParams()
    assert tversky_loss(gt.clone(), gt, p).item() < 10 * p.epsilon


def test_tversky_hand_example():
    pred = torch.tensor([[1.0, 0.0], [0.0, 0.0]], **f64)
    gt = torch.tensor([[1.0, 1.0], [0.0, 0.0]], **f64)
    loss = tversky_loss(pred, gt, TverskyParams(0.3, 0.7, epsilon=1e-12))
    assert loss.item() == pytest.approx(1 - 1 / 1.7, abs=1e-9)
    assert loss.item() == pytest.approx(0.41176, abs=1e-5)


@pytest.mark.parametrize("seed", range(10))
def test_tversky_half_half_is_soft_dice(seed):
    pred, gt = rand_pair(seed)
    eps = 1e-6
    tp = float((pred * gt).sum())
    fp = float((pred * (1 - gt)).sum())
    fn = float(((1 - pred) * gt).sum())
    dice = 1 - (2 * tp + 2 * eps) / (2 * tp + fp + fn + 2 * eps)
    assert tversky_loss(pred, gt, TverskyParams(0.5, 0.5, eps)).item() == pytest.approx(dice, abs=1e-9)


def test_tversky_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        tversky_loss(torch.zeros(2, 2), torch.zeros(2, 3))


@given(seed=st.integers(0, 10_000), idx=st.integers(0, 63), bump=st.floats(0.0, 0.5))
@settings(max_examples=60, deadline=None)
def test_tversky_monotone_in_foreground_pred(seed, idx, bump):
    pred, gt = rand_pair(seed)
    gt.view(-1)[idx] = 1.0
    raised = pred.clone()
    raised.view(-1)[idx] = min(1.0, pred.view(-1)[idx].item() + bump)
    assert tversky_loss(raised, gt).item() <= tversky_loss(pred, gt).item() + 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_tversky_complement_symmetry(seed):
    # on (1-p, 1-g) the FP/FN roles exchange, so swapping alpha and beta
    # gives the formula with TN in place of TP
    pred, gt = rand_pair(seed, (1, 1, 6, 6))
    a, b, eps = 0.3, 0.7, 1e-6
    tn = float(((1 - pred) * (1 - gt)).sum())
    fp = float((pred * (1 - gt)).sum())
    fn = float(((1 - pred) * gt).sum())
    expected = 1 - (tn + eps) / (tn + b * fn + a * fp + eps)
    got = tversky_loss(1 - pred, 1 - gt, TverskyParams(alpha=b, beta=a, epsilon=eps)).item()
    assert got == pytest.approx(expected, abs=1e-12)


def test_tversky_params_validation():
    with pytest.raises(ValueError):
        TverskyParams(alpha=0, beta=0)
    with pytest.raises(ValueError):
        TverskyParams(epsilon=0)


# ---------------------------------------------------------------- focal

@pytest.mark.parametrize("seed", range(10))
def test_focal_reduces_to_bce(seed):
    pred, gt = rand_pair(seed)
    bce = torch.nn.functional.binary_cross_entropy(pred, gt).item()
    assert focal_loss(pred, gt, FocalParams(gamma=0.0, alpha_t=1.0)).item() == pytest.approx(bce, abs=1e-9)


def test_focal_single_pixel_closed_form():
    loss = focal_loss(torch.tensor([0.9], **f64), torch.tensor([1.0], **f64), FocalParams(3.0, 0.8))
    assert loss.item() == pytest.approx(0.8 * 0.1 ** 3 * -math.log(0.9), rel=1e-12)
    assert loss.item() == pytest.approx(8.4294e-5, rel=1e-3)


def test_focal_easy_examples_vanish_monotonically():
    ps = torch.linspace(0.5, 1.0 - 1e-9, 200, **f64)
    vals = [focal_loss(p[None], torch.ones(1, **f64)).item() for p in ps]
    assert all(b <= a for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-20


def test_focal_params_validation():
    with pytest.raises(ValueError):
        FocalParams(alpha_t=0.0)
    with pytest.raises(ValueError):
        FocalParams(gamma=-1)


# ---------------------------------------------------------------- contour weights

def _contour_oracle(mask, wb, radius):
    h, w = mask.shape
    get = lambda r, c: mask[r, c] if 0 <= r < h and 0 <= c < w else 0
    edge = set()
    for r in range(h):
        for c in range(w):
            if mask[r, c] and not all(get(r + dr, c + dc) for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1))):
                edge.add((r, c))
    out = np.ones((h, w))
    for r in range(h):
        for c in range(w):
            if any((r + dr, c + dc) in edge for dr in range(-radius, radius + 1)
                   for dc in range(-radius, radius + 1)):
                out[r, c] = wb
    return out


def test_contour_all_zero():
    w = contour_weight_map(torch.zeros(1, 1, 9, 9))
    assert torch.equal(w, torch.ones(1, 1, 9, 9))


def test_contour_square():
    m = np.zeros((11, 11))
    m[3:8, 3:8] = 1
    w = contour_weight_map(torch.tensor(m)).numpy()
    expected = _contour_oracle(m, 5.0, 1)
    np.testing.assert_array_equal(w, expected)
    # ring + 1-px surround = 7x7 block minus the square's centre
    assert (w == 5.0).sum() == 48 and w[5, 5] == 1.0


def test_contour_all_one_edges_at_border():
    m = np.ones((8, 10))
    w = contour_weight_map(torch.tensor(m), ContourParams(boundary_radius=1)).numpy()
    np.testing.assert_array_equal(w, _contour_oracle(m, 5.0, 1))
    assert (w[2:-2, 2:-2] == 1).all() and (w[0] == 5).all() and (w[1, 1:-1] == 5).all()


@given(seed=st.integers(0, 2**31), radius=st.integers(1, 2))
@settings(max_examples=30, deadline=None)
def test_contour_matches_oracle(seed, radius):
    m = (np.random.default_rng(seed).random((7, 9)) < 0.5).astype(float)
    w = contour_weight_map(torch.tensor(m), ContourParams(3.0, radius)).numpy()
    np.testing.assert_array_equal(w, _contour_oracle(m, 3.0, radius))


# ---------------------------------------------------------------- boundary

def test_boundary_perfect_prediction():
    gt = random_mask(1, (1, 1, 8, 8))
    assert boundary_loss(gt.clone(), gt).item() < 1e-5


def test_boundary_hand_example():
    pred = torch.tensor([[0.8, 0.2]], **f64)
    gt = torch.tensor([[1.0, 0.0]], **f64)
    w = torch.tensor([[5.0, 1.0]], **f64)
    eps = 1e-6
    wbce = -(5 * math.log(0.8) + math.log(0.8)) / 2
    wdice = 1 - (8 + eps) / (8.24 + eps)
    assert wbce == pytest.approx(0.6694, abs=1e-4)
    assert wdice == pytest.approx(0.02913, abs=1e-5)
    assert boundary_loss(pred, gt, ContourParams(epsilon=eps), weights=w).item() == pytest.approx(wbce + wdice, abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_boundary_unit_weights_reduce_to_plain_terms(seed):
    pred, gt = rand_pair(seed)
    eps = 1e-6
    dice = 1 - (2 * (pred * gt).sum() + eps) / ((pred ** 2).sum() + (gt ** 2).sum() + eps)
    bce = torch.nn.functional.binary_cross_entropy(pred, gt)
    got = boundary_loss(pred, gt, ContourParams(epsilon=eps), weights=torch.ones_like(pred))
    assert got.item() == pytest.approx((bce + dice).item(), abs=1e-9)


# ---------------------------------------------------------------- soft skeleton / clDice

def test_skeleton_empty():
    assert soft_skeleton(torch.zeros(1, 1, 7, 7)).abs().sum() == 0


def test_skeleton_thin_line_is_itself():
    x = torch.zeros(5, 9, **f64)
    x[2, 1:8] = 1
    torch.testing.assert_close(soft_skeleton(x), x, rtol=0, atol=0)


def test_skeleton_of_disk_is_interior_and_smaller():
    yy, xx = np.mgrid[:11, :11]
    disk = ((yy - 5) ** 2 + (xx - 5) ** 2 <= 3.0 ** 2).astype(float)  # 7-px diameter
    sk = soft_skeleton(torch.tensor(disk)).numpy()
    support = sk > 0
    assert support.any()
    assert np.all(disk[support] == 1)
    assert support.sum() < disk.sum()


@given(seed=st.integers(0, 2**31))
@settings(max_examples=40, deadline=None)
def test_skeleton_contained_in_binary_structure(seed):
    m = torch.tensor((np.random.default_rng(seed).random((12, 12)) < 0.6).astype(float))
    sk = soft_skeleton(m)
    assert torch.all(sk <= m + 1e-12)
    assert torch.all((sk >= 0) & (sk <= 1))


def _line_masks():
    gt = torch.zeros(1, 1, 9, 31, **f64)
    gt[0, 0, 3:6, 1:30] = 1  # 3-px tube
    broken = gt.clone()
    broken[0, 0, :, 11:21] = 0
    return gt, broken


def test_cldice_perfect_on_tube():
    gt, _ = _line_masks()
    assert cldice_loss(gt.clone(), gt).item() < 10 * 1e-6


def test_cldice_penalises_break():
    gt, broken = _line_masks()
    params = ClDiceParams()
    from neuroseg.losses import topology_precision_recall
    t_prec, _ = topology_precision_recall(broken, gt, params)
    assert t_prec.item() < 1
    assert cldice_loss(broken, gt).item() > 0
    assert cldice_loss(broken, gt).item() > cldice_loss(gt.clone(), gt).item()


def test_cldice_both_empty():
    z = torch.zeros(1, 1, 8, 8, **f64)
    assert cldice_loss(z, z).item() == pytest.approx(0.0, abs=1e-12)


# ---------------------------------------------------------------- hybrid

def test_hybrid_projection_is_tversky():
    pred, gt = rand_pair(3)
    total, terms = hybrid_loss(pred, gt, LossConfig(weights=HybridWeights(1, 0, 0, 0)))
    assert total.item() == tversky_loss(pred, gt).item()


def test_hybrid_perfect_prediction():
    gt, _ = _line_masks()
    total, _ = hybrid_loss(gt.clone(), gt)
    assert total.item() < 1e-5


def test_hybrid_total_is_weighted_sum_of_independent_terms():
    pred, gt = rand_pair(42)
    total, terms = hybrid_loss(pred, gt)
    parts = (tversky_loss(pred, gt).item(), boundary_loss(pred, gt).item(),
             focal_loss(pred, gt).item(), cldice_loss(pred, gt).item())
    expected = 0.4 * parts[0] + 0.2 * parts[1] + 0.3 * parts[2] + 0.1 * parts[3]
    assert total.item() == pytest.approx(expected, abs=1e-9)
    assert [terms[k].item() for k in ("tversky", "boundary", "focal", "cldice")] == pytest.approx(parts, abs=0)


@pytest.mark.parametrize("seed", range(5))
def test_hybrid_linear_in_weights(seed):
    pred, gt = rand_pair(seed)
    full, _ = hybrid_loss(pred, gt)
    half, _ = hybrid_loss(pred, gt, LossConfig(weights=HybridWeights(0.2, 0.1, 0.15, 0.05)))
    assert half.item() == pytest.approx(full.item() / 2, abs=1e-9)


def test_presets():
    assert HybridWeights.preset("default") == HybridWeights()
    assert HybridWeights.preset("contour_heavy") == HybridWeights(0.4, 0.3, 0.2, 0.1)
    with pytest.raises(ValueError):
        HybridWeights.preset("nope")
    with pytest.raises(ValueError):
        HybridWeights(0, 0, 0, 0)


@given(seed=st.integers(0, 2**31))
@settings(max_examples=30, deadline=None)
def test_all_losses_nonnegative_and_bounded(seed):
    pred, gt = rand_pair(seed % 100_000)
    t, b, f, c = (tversky_loss(pred, gt), boundary_loss(pred, gt), focal_loss(pred, gt), cldice_loss(pred, gt))
    for v in (t, b, f, c):
        assert v.item() >= -1e-12
    assert t.item() <= 1 + 1e-9 and c.item() <= 1 + 1e-9


# ---------------------------------------------------------------- gradcheck

def test_gradcheck_tversky():
    assert gradcheck(tversky_loss, tie_free_probs(0), random_mask(0)) < 1e-5


def test_gradcheck_focal():
    assert gradcheck(focal_loss, tie_free_probs(1), random_mask(1)) < 1e-5


def test_gradcheck_hybrid():
    assert gradcheck(lambda p, g: hybrid_loss(p, g)[0], tie_free_probs(2), random_mask(2)) < 1e-4


def test_gradcheck_detects_wrong_gradient():
    class Wrong(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return (x ** 2).sum()

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * x  # should be 2x

    assert gradcheck(lambda p, g: Wrong.apply(p), tie_free_probs(3), random_mask(3)) > 0.4


def test_gradcheck_nonfinite_raises():
    with pytest.raises(FloatingPointError):
        gradcheck(lambda p, g: (p * float("nan")).sum(), tie_free_probs(0), random_mask(0))
