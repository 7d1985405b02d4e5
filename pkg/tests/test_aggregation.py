import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from tdsr.aggregation import (
    aggregate_eps,
    gaussian_weight,
    grid_tiles,
    plan_patches,
    progressive_sample,
    seam_score,
)
from tdsr.diffusion import make_schedule, sample
from tdsr.encoder import Condition


def test_gaussian_weight_scalar_values():
    w = gaussian_weight(16, 4.0)
    assert w.shape == (16, 16)
    assert w[7, 7] == w[8, 8] == pytest.approx(math.exp(-2 * 0.5 ** 2 / 32), rel=1e-15)
    assert w[0, 0] == pytest.approx(math.exp(-2 * 7.5 ** 2 / 32), rel=1e-15)
    np.testing.assert_array_equal(w, w.T)
    np.testing.assert_array_equal(w, w[::-1, ::-1])
    with pytest.raises(ValueError):
        gaussian_weight(4, 0.0)


def test_layout_37_with_terminal_shift():
    lay = plan_patches(37, 37, 16, 8)
    starts = sorted({r for r, _ in lay.origins})
    assert starts == [0, 8, 16, 21]
    assert lay.M == 16
    cov = lay.coverage()
    assert cov.min() >= 1
    assert cov[0, 0] == 1 and cov[20, 20] == 4 and cov[22, 22] == 9


def test_single_patch_layout():
    lay = plan_patches(16, 16, 16, 8)
    assert lay.origins == [(0, 0)]
    assert np.all(lay.normalized[0] == 1.0)


@pytest.mark.parametrize("args", [(8, 8, 16, 4), (32, 32, 16, 0), (32, 32, 16, 16)])
def test_layout_rejects_bad_arguments(args):
    with pytest.raises(ValueError):
        plan_patches(*args)


def test_partition_of_unity_random_layouts():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        p = int(rng.integers(2, 17))
        h, w = (int(v) for v in rng.integers(p, 60, size=2))
        overlap = int(rng.integers(1, p))
        sigma = float(rng.uniform(0.5, 8.0))
        lay = plan_patches(h, w, p, overlap, sigma)
        assert lay.coverage().min() >= 1
        worst = max(worst, float(np.abs(lay.weight_sum() - 1).max()))
    assert worst < 1e-6


@settings(max_examples=50, deadline=None)
@given(
    p=st.integers(2, 12),
    extra_h=st.integers(0, 30),
    extra_w=st.integers(0, 30),
    frac=st.floats(0.05, 0.95),
    c=st.floats(-5, 5),
)
def test_constant_field_is_preserved(p, extra_h, extra_w, frac, c):
    overlap = min(p - 1, max(1, int(p * frac)))
    lay = plan_patches(p + extra_h, p + extra_w, p, overlap)
    preds = [torch.full((1, 2, p, p), c, dtype=torch.float64) for _ in lay.origins]
    out = aggregate_eps(preds, lay)
    torch.testing.assert_close(out, torch.full_like(out, c), rtol=0, atol=1e-12)


def test_single_patch_aggregation_is_bitwise():
    lay = plan_patches(8, 8, 8, 4)
    pred = torch.randn(2, 4, 8, 8)
    assert torch.equal(aggregate_eps([pred], lay), pred)


def test_two_patch_brute_force():
    """Two 4-wide patches on a 4x6 grid, weights summed by hand."""
    lay = plan_patches(4, 6, 4, 2, sigma=1.0)
    assert lay.origins == [(0, 0), (0, 2)]
    a = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    b = torch.randn(1, 1, 4, 4, dtype=torch.float64)
    out = aggregate_eps([a, b], lay).numpy()
    g = [math.exp(-((i - 1.5) ** 2) / 2) for i in range(4)]
    for r in range(4):
        for c in range(6):
            wa = g[r] * g[c] if c < 4 else 0.0
            wb = g[r] * g[c - 2] if c >= 2 else 0.0
            va = float(a[0, 0, r, c]) if c < 4 else 0.0
            vb = float(b[0, 0, r, c - 2]) if c >= 2 else 0.0
            assert out[0, 0, r, c] == pytest.approx((wa * va + wb * vb) / (wa + wb), abs=1e-12)


def test_aggregate_rejects_mismatch():
    lay = plan_patches(8, 12, 8, 4)
    with pytest.raises(ValueError):
        aggregate_eps([torch.zeros(1, 4, 8, 8)], lay)
    with pytest.raises(ValueError):
        aggregate_eps([torch.zeros(1, 4, 8, 8), torch.zeros(1, 4, 8, 4)], lay)


def _toy_predictor(z, t, cond):
    # depends on both state and conditioning, with spatially varying response
    return torch.tanh(0.5 * z + cond.lr_latent) * 0.3


def test_single_patch_progressive_equals_sample():
    s = make_schedule()
    cond = Condition(torch.randn(1, 4, 8, 8, generator=torch.Generator().manual_seed(3)))
    lay = plan_patches(8, 8, 8, 4)
    for seed in range(10):
        a = progressive_sample(_toy_predictor, cond, lay, s, 20, seed)
        b = sample(_toy_predictor, cond, s, 20, seed, tuple(cond.lr_latent.shape))
        assert torch.equal(a, b)


def test_batched_patches_match_sequential():
    s = make_schedule()
    cond = Condition(torch.randn(1, 4, 8, 16, generator=torch.Generator().manual_seed(4)))
    lay = plan_patches(8, 16, 8, 4)
    a = progressive_sample(_toy_predictor, cond, lay, s, 10, 0)
    b = progressive_sample(_toy_predictor, cond, lay, s, 10, 0, batch_patches=True)
    torch.testing.assert_close(a, b, rtol=0, atol=1e-6)


def test_progressive_rejects_bad_shape():
    lay = plan_patches(8, 8, 8, 4)
    with pytest.raises(ValueError):
        progressive_sample(_toy_predictor, Condition(torch.zeros(1, 4, 8, 8)), lay, make_schedule(), 5, 0, (1, 4, 8, 12))


def test_seam_score_and_grid_tiles():
    z = torch.zeros(1, 1, 4, 8)
    z[..., 4:] = 2.0
    assert seam_score(z, 4) == 2.0 and seam_score(z, 3) == 0.0
    lay = grid_tiles(8, 16, 8)
    assert lay.origins == [(0, 0), (0, 8)]
    np.testing.assert_array_equal(lay.weight_sum(), np.ones((8, 16)))
    with pytest.raises(ValueError):
        grid_tiles(8, 12, 8)
