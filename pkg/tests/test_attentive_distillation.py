import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from cafseg import autodiff as ad
from cafseg.attentive_distillation import (SEWeights, ad_channel, ad_combine, ad_spatial, loss_ad,
                                           se_reduction)
from cafseg.autodiff import Tensor
from cafseg.errors import DimensionError


def _se(c, seed=0):
    return SEWeights.init("se", c, np.random.default_rng(seed))


def _np(se):
    return [p.data for p in se.parameters()]


def test_se_reduction():
    assert se_reduction(3) == 1 and se_reduction(8) == 2 and se_reduction(32) == 8


def test_ad_channel_zero_weights_is_half():
    out = ad_channel(Tensor(np.random.default_rng(0).normal(size=(4, 2, 2))), SEWeights.zeros("se", 4)).data
    assert np.all(out == 0.5)


@given(st.integers(0, 10_000), st.floats(0.1, 100))
def test_ad_channel_in_unit_interval(seed, scale):
    rng = np.random.default_rng(seed)
    out = ad_channel(Tensor(rng.normal(0, scale, (4, 3, 3))), _se(4, seed)).data
    assert np.all((out > 0) & (out < 1))


def test_ad_channel_matches_chain():
    se = _se(4, 1)
    m = np.random.default_rng(1).normal(size=(4, 3, 2))
    np.testing.assert_allclose(ad_channel(Tensor(m), se).data, oracles.ad_channel(m, *_np(se)), atol=1e-12)


def test_ad_spatial_all_ones_is_half():
    np.testing.assert_allclose(ad_spatial(Tensor(np.ones((4, 2, 2)))).data, 0.5, atol=1e-15)


def test_ad_spatial_single_pixel():
    m = np.zeros((3, 3, 3))
    m[:, 1, 2] = [1.0, -2.0, 0.5]
    out = ad_spatial(Tensor(m)).data
    expect = np.zeros((3, 3))
    expect[1, 2] = 1.0
    np.testing.assert_allclose(out, expect, atol=1e-15)


def test_ad_spatial_matches_loop_and_unit_norm():
    m = np.random.default_rng(2).normal(size=(3, 4, 4))
    out = ad_spatial(Tensor(m)).data
    np.testing.assert_allclose(out, oracles.ad_spatial(m), atol=1e-12)
    assert abs(np.linalg.norm(out) - 1.0) <= 1e-12


def test_ad_spatial_degenerate_flag():
    out, flag = ad_spatial(Tensor(np.zeros((2, 3, 3))), with_flag=True)
    assert np.all(out.data == 0) and bool(flag)


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_ad_spatial_scale_and_permutation_invariant(seed, alpha):
    rng = np.random.default_rng(seed)
    m = rng.normal(size=(4, 3, 3))
    base = ad_spatial(Tensor(m)).data
    np.testing.assert_allclose(ad_spatial(Tensor(alpha * m)).data, base, atol=1e-12)
    np.testing.assert_allclose(ad_spatial(Tensor(-alpha * m)).data, base, atol=1e-12)
    np.testing.assert_allclose(ad_spatial(Tensor(m[rng.permutation(4)])).data, base, atol=1e-12)


def test_ad_combine_examples():
    se = _se(3)
    assert np.all(ad_combine(Tensor(np.zeros((3, 2, 2))), se).data == 0)
    m = np.random.default_rng(3).normal(size=(3, 2, 2))
    np.testing.assert_allclose(ad_combine(Tensor(m), se).data, oracles.ad_combine(m, _np(se)), atol=1e-12)
    zero_se = SEWeights.zeros("z", 3)
    expect = (0.5 * oracles.ad_spatial(m)[None] + 1.0) * m
    np.testing.assert_allclose(ad_combine(Tensor(m), zero_se).data, expect, atol=1e-12)


def test_loss_ad_zero_for_identical_pairs():
    rng = np.random.default_rng(4)
    z, h = rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 3, 3))
    assert loss_ad(Tensor(z), Tensor(z), Tensor(h), Tensor(h), _se(2), _se(2, 1)).item() == 0.0


def test_loss_ad_single_element_difference():
    # all-zero features make the spatial map degenerate, so AD is the identity
    c, w, h = 2, 3, 3
    z_old = np.zeros((c, w, h))
    z_new = z_old.copy()
    z_new[1, 0, 2] = 0.0
    delta = 1e-7
    z_new[1, 0, 2] = delta
    hh = np.zeros((c, w, h))
    # a 1e-7 entry squares to 1e-14 energy, whose norm 1e-14 is below the guard
    val = loss_ad(Tensor(z_new), Tensor(z_old), Tensor(hh), Tensor(hh), _se(c), _se(c, 1)).item()
    assert abs(val - delta**2 / (c * w * h)) <= 1e-9 * delta**2


def test_loss_ad_matches_literal_script():
    rng = np.random.default_rng(5)
    arrs = [rng.normal(size=(2, 3, 3)) for _ in range(4)]
    se_z, se_h = _se(2, 6), _se(2, 7)
    got = loss_ad(*(Tensor(a) for a in arrs), se_z, se_h).item()
    assert abs(got - oracles.loss_ad(*arrs, _np(se_z), _np(se_h))) <= 1e-12


def test_loss_ad_batch_is_mean_of_samples():
    rng = np.random.default_rng(8)
    arrs = [rng.normal(size=(3, 2, 3, 3)) for _ in range(4)]
    se_z, se_h = _se(2), _se(2, 1)
    batched = loss_ad(*(Tensor(a) for a in arrs), se_z, se_h).item()
    per = [loss_ad(*(Tensor(a[i]) for a in arrs), se_z, se_h).item() for i in range(3)]
    assert abs(batched - np.mean(per)) <= 1e-12


@given(st.integers(0, 10_000))
def test_loss_ad_nonnegative(seed):
    rng = np.random.default_rng(seed)
    arrs = [Tensor(rng.normal(size=(2, 2, 2))) for _ in range(4)]
    assert loss_ad(*arrs, _se(2, seed), _se(2, seed + 1)).item() >= 0.0


def test_loss_ad_old_branch_gets_no_gradient():
    rng = np.random.default_rng(9)
    z_new, h_new = Tensor(rng.normal(size=(2, 3, 3)), True), Tensor(rng.normal(size=(2, 3, 3)), True)
    z_old, h_old = Tensor(rng.normal(size=(2, 3, 3)), True), Tensor(rng.normal(size=(2, 3, 3)), True)
    for t in (z_new, h_new, z_old, h_old):
        t.grad = np.zeros(t.shape)
    ad.backward(loss_ad(z_new, z_old, h_new, h_old, _se(2), _se(2, 1)))
    assert np.all(z_old.grad == 0) and np.all(h_old.grad == 0)
    assert np.any(z_new.grad != 0) and np.any(h_new.grad != 0)


def test_loss_ad_shape_mismatch():
    with pytest.raises(DimensionError):
        loss_ad(Tensor(np.ones((2, 3, 3))), Tensor(np.ones((2, 2, 3))), Tensor(np.ones((2, 3, 3))),
                Tensor(np.ones((2, 3, 3))), _se(2), _se(2))
