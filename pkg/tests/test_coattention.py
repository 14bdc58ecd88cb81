import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cafcn import oracles
from cafcn.coattention import (CoAttentionParams, affinity, attend, coattention_backward,
                               coattention_forward, group_average_attention)
from cafcn.selftest import attention_algebra, coattention_gradient_errors
from cafcn.tensor import DimensionError


def _setup(rng, side=3, c=8, gammas=(0.6, -0.3)):
    x = rng.standard_normal((side, side, c))
    y = rng.standard_normal((side, side, c))
    p = CoAttentionParams.init(c, rng).copy(gamma1=gammas[0], gamma2=gammas[1])
    return x, y, p


def test_affinity_matches_loops(rng):
    x, y, p = _setup(rng)
    np.testing.assert_allclose(affinity(x, y, p), oracles.affinity_loops(x, y, p.wf, p.wg),
                               rtol=0, atol=1e-12)


def test_forward_matches_loops(rng):
    x, y, p = _setup(rng)
    xw, yw = coattention_forward(x, y, p)
    oxw, oyw, ax, ay = oracles.coattention_loops(x, y, p.wf, p.wg, p.wh1, p.wh2, p.gamma1, p.gamma2)
    np.testing.assert_allclose(xw, oxw, atol=1e-12)
    np.testing.assert_allclose(yw, oyw, atol=1e-12)
    att = attend(x, y, p)
    np.testing.assert_allclose(att.alpha_x.alpha, ax, atol=1e-14)
    np.testing.assert_allclose(att.alpha_y.alpha, ay, atol=1e-14)


def test_slices_sum_to_one(rng):
    x, y, p = _setup(rng, side=4, c=16)
    att = attend(x * 5.0, y * 5.0, p)
    np.testing.assert_allclose(att.alpha_x.slice_sums(), 1.0, atol=1e-9)
    np.testing.assert_allclose(att.alpha_y.slice_sums(), 1.0, atol=1e-9)
    assert att.alpha_x.axis == 1 and att.alpha_y.axis == 0


def test_zero_key_projection_gives_uniform_attention(rng):
    x, y, p = _setup(rng, side=2)
    p = p.copy(wf=np.zeros_like(p.wf))
    att = attend(x, y, p)
    np.testing.assert_allclose(att.alpha_x.alpha, 0.25)
    np.testing.assert_allclose(att.alpha_y.alpha, 0.25)
    # every position of x receives the mean projected value of y
    xw, _ = coattention_forward(x, y, p)
    expected = x + p.gamma1 * (y.reshape(-1, 8) @ p.wh2).mean(axis=0)
    np.testing.assert_allclose(xw, expected, atol=1e-13)


def test_zero_gamma_is_bitwise_identity(rng):
    x, y, p = _setup(rng, gammas=(0.0, 0.0))
    xw, yw = coattention_forward(x, y, p)
    assert np.array_equal(xw, x) and np.array_equal(yw, y)


def test_swap_symmetry_is_bitwise(rng):
    x, y, p = _setup(rng, side=4)
    xw, yw = coattention_forward(x, y, p)
    yw2, xw2 = coattention_forward(y, x, p.swapped())
    assert np.array_equal(xw, xw2) and np.array_equal(yw, yw2)


def test_attention_algebra_suite():
    worst, identity_ok, swap_ok = attention_algebra(seed=11)
    assert worst <= 1e-9 and identity_ok and swap_ok


def test_gradients_c8_n4():
    errors = coattention_gradient_errors(np.random.default_rng(2), channels=8, side=2)
    assert max(errors.values()) < 1e-5, errors


def test_backward_zero_gamma_passes_gradient_straight(rng):
    x, y, p = _setup(rng, gammas=(0.0, 0.0))
    gx_up = rng.standard_normal(x.shape)
    gy_up = rng.standard_normal(y.shape)
    gx, gy, gp = coattention_backward(x, y, p, gx_up, gy_up)
    np.testing.assert_array_equal(gx, gx_up)
    np.testing.assert_array_equal(gy, gy_up)
    assert not gp.wf.any() and not gp.wh1.any()


def test_group_of_two_is_pairwise(rng):
    x, y, p = _setup(rng)
    g = group_average_attention([x, y], p)
    xw, yw = coattention_forward(x, y, p)
    assert np.array_equal(g.weighted[0], xw) and np.array_equal(g.weighted[1], yw)
    assert np.array_equal(g.partners[0], yw) and np.array_equal(g.partners[1], xw)


@pytest.mark.parametrize("n", [3, 5])
def test_group_of_identical_features_matches_self_pair(rng, n):
    x, _, p = _setup(rng)
    p = p.copy(gamma2=p.gamma1)
    g = group_average_attention([x] * n, p)
    xw, yw = coattention_forward(x, x, p)
    for w in g.weighted:
        np.testing.assert_allclose(w, xw, atol=1e-12)
    np.testing.assert_allclose(g.shared, yw, atol=1e-12)


def test_group_shapes_and_errors(rng):
    x, y, p = _setup(rng)
    g = group_average_attention([x, y, x + y, x - y], p)
    assert len(g.weighted) == len(g.partners) == len(g.attention) == 4
    assert all(q is g.shared for q in g.partners)
    with pytest.raises(ValueError):
        group_average_attention([x], p)
    with pytest.raises(DimensionError):
        group_average_attention([x, y[:2]], p)


def test_dimension_checks(rng):
    x, y, p = _setup(rng)
    with pytest.raises(DimensionError):
        coattention_forward(x, y[:, :2], p)
    with pytest.raises(DimensionError):
        coattention_forward(x[..., :4], y[..., :4], p)
    with pytest.raises(DimensionError):
        CoAttentionParams(np.zeros((8, 1)), np.zeros((8, 2)), np.zeros((8, 8)), np.zeros((8, 8)))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 20.0))
def test_attention_rows_are_distributions(seed, scale):
    r = np.random.default_rng(seed)
    x, y, p = _setup(r, side=3)
    att = attend(scale * x, scale * y, p)
    for amap in (att.alpha_x, att.alpha_y):
        assert np.all(amap.alpha >= 0.0)
        np.testing.assert_allclose(amap.slice_sums(), 1.0, atol=1e-9)
