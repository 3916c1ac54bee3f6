import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bodynerf import autodiff as ad
from bodynerf.autodiff import Parameter, Tensor
from bodynerf.render import (CameraLatentCodes, ColorHead, DensityHead, TemporalAttention, composite,
                             photometric_loss, positional_encode)


# -- attention ------------------------------------------------------------------------

def test_identical_frame_features_attend_to_projected_value():
    rng = np.random.default_rng(0)
    att = TemporalAttention(4, 3, rng, d_k=5)
    f_v = Tensor(rng.normal(size=(6, 4)))
    g = rng.normal(size=(6, 3))
    frames = Tensor(np.repeat(g[None], 4, 0))
    out, a = att(f_v, frames, np.zeros((4, 6), bool))
    np.testing.assert_allclose(a.data.sum(1), 1.0, atol=1e-12)
    np.testing.assert_allclose(out.data, f_v.data + att.v(Tensor(g)).data, atol=1e-12)


def test_all_masked_returns_volume_feature():
    rng = np.random.default_rng(1)
    att = TemporalAttention(4, 3, rng)
    f_v = Tensor(rng.normal(size=(5, 4)))
    mask = np.zeros((3, 5), bool)
    mask[:, [1, 3]] = True
    out, _ = att(f_v, Tensor(rng.normal(size=(3, 5, 3))), mask)
    np.testing.assert_array_equal(out.data[[1, 3]], f_v.data[[1, 3]])
    assert not np.allclose(out.data[0], f_v.data[0])


def test_two_frame_attention_by_hand():
    att = TemporalAttention(1, 1, np.random.default_rng(2), d_k=1)
    att.q.weight.data[:] = 2.0
    att.k.weight.data[:] = 1.0
    att.v.weight.data[:] = 3.0
    f_v = Tensor(np.array([[0.5]]))
    frames = Tensor(np.array([[[1.0]], [[-1.0]]]))
    out, a = att(f_v, frames, np.zeros((2, 1), bool))
    # q = 1; k = (1, -1); v = (3, -3); logits / sqrt(1)
    w = np.exp([1.0, -1.0]) / np.exp([1.0, -1.0]).sum()
    np.testing.assert_allclose(a.data[0], w, atol=1e-15)
    np.testing.assert_allclose(out.data[0, 0], 0.5 + w @ [3.0, -3.0], atol=1e-15)


def test_masked_frame_gets_zero_weight():
    rng = np.random.default_rng(3)
    att = TemporalAttention(4, 3, rng)
    mask = np.array([[False], [True], [False]])
    _, a = att(Tensor(rng.normal(size=(1, 4))), Tensor(rng.normal(size=(3, 1, 3))), mask)
    assert a.data[0, 1] == 0.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 5))
def test_attention_permutation_invariant(seed, T):
    rng = np.random.default_rng(seed)
    att = TemporalAttention(4, 3, rng, d_k=6)
    f_v = Tensor(rng.normal(size=(5, 4)))
    feats = rng.normal(size=(T, 5, 3))
    mask = rng.random((T, 5)) > 0.7
    perm = rng.permutation(T)
    out, _ = att(f_v, Tensor(feats), mask)
    out_p, _ = att(f_v, Tensor(feats[perm]), mask[perm])
    np.testing.assert_allclose(out_p.data, out.data, atol=1e-12)


def test_attention_gradient():
    rng = np.random.default_rng(4)
    att = TemporalAttention(3, 2, rng, d_k=4)
    f_v = Parameter(rng.normal(size=(4, 3)))
    feats = Parameter(rng.normal(size=(3, 4, 2)))
    mask = np.zeros((3, 4), bool)
    mask[1, 2] = True
    f = lambda: ad.tsum(att(f_v, feats, mask)[0] ** 2)
    assert ad.grad_check(f, [f_v, feats] + att.parameters()) < 1e-5


# -- positional encoding ----------------------------------------------------------------

def test_encoding_length():
    assert positional_encode(np.array([[0.0, 0.0, 1.0]])).shape == (1, 27)


def test_encoding_parity_and_range():
    rng = np.random.default_rng(5)
    d = rng.normal(size=(20, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    a, b = positional_encode(d), positional_encode(-d)
    assert np.abs(a).max() <= 1.0
    for level in range(4):
        s = slice(3 + 6 * level, 6 + 6 * level)
        c = slice(6 + 6 * level, 9 + 6 * level)
        np.testing.assert_allclose(b[:, s], -a[:, s], atol=1e-12)
        np.testing.assert_allclose(b[:, c], a[:, c], atol=1e-12)


# -- heads --------------------------------------------------------------------------------

def test_zero_last_density_is_log_two():
    head = DensityHead(6, np.random.default_rng(6))
    sigma = head(Tensor(np.random.default_rng(7).normal(size=(9, 6)))).data
    np.testing.assert_allclose(sigma, np.log(2.0), atol=1e-15)
    assert f"{sigma[0]:.4f}" == "0.6931"


def test_density_non_negative_and_differentiable():
    rng = np.random.default_rng(8)
    head = DensityHead(4, rng, width=8)
    head.mlp.out.weight.data = rng.normal(0, 5, head.mlp.out.weight.shape)
    x = rng.normal(0, 3, (50, 4))
    assert (head(Tensor(x)).data >= 0).all()
    assert ad.grad_check(lambda: ad.tsum(head(Tensor(x[:6])) ** 2), head.parameters()) < 1e-4


def test_color_in_unit_range_and_deterministic():
    rng = np.random.default_rng(9)
    head = ColorHead(4, 27, 3, rng, width=8)
    x = Tensor(rng.normal(0, 10, (30, 4)))
    d = positional_encode(np.tile([0.0, 0.0, 1.0], (30, 1)))
    lat = Tensor(rng.normal(size=3))
    c1, c2 = head(x, d, lat).data, head(x, d, lat).data
    assert (c1 >= 0).all() and (c1 <= 1).all()
    assert c1.tobytes() == c2.tobytes()


def test_unknown_camera_uses_mean_latent(caplog):
    codes = CameraLatentCodes([3, 1], 4, np.random.default_rng(10))
    assert codes.ids == [1, 3]
    with caplog.at_level(logging.WARNING):
        lat = codes.lookup(7)
    np.testing.assert_allclose(lat.data, codes.table.data.mean(0))
    assert "unknown camera_id 7" in caplog.text
    np.testing.assert_array_equal(codes.lookup(3).data, codes.table.data[1])


def test_camera_latent_matters_after_training():
    rng = np.random.default_rng(11)
    codes = CameraLatentCodes([0, 1], 4, rng)
    head = ColorHead(2, 27, 4, rng, width=16)
    x = Tensor(rng.normal(size=(16, 2)))
    d = positional_encode(np.tile([0.0, 0.0, 1.0], (16, 1)))
    targets = {0: np.full((16, 3), 0.2), 1: np.full((16, 3), 0.8)}
    params = codes.parameters() + head.parameters()
    for _ in range(300):
        for cid, y in targets.items():
            photometric_loss(head(x, d, codes.lookup(cid)), y).backward()
        ad.adam_step(params, 1e-2)
    with ad.no_grad():
        c0 = head(x, d, codes.lookup(0)).data
        c1 = head(x, d, codes.lookup(1)).data
    assert np.abs(c1 - c0).mean() > 0.3


# -- compositing ----------------------------------------------------------------------------

def test_zero_density_renders_black():
    rgb, w = composite(np.zeros((2, 5)), np.ones((2, 5, 3)), np.full((2, 5), 0.1))
    assert not rgb.data.any() and not w.data.any()


def test_constant_medium_matches_transmittance_integral():
    n, L, sigma = 256, 2.0, 0.5
    c = np.array([0.3, 0.6, 0.9])
    rgb, _ = composite(np.full((1, n), sigma), np.broadcast_to(c, (1, n, 3)), np.full((1, n), L / n))
    expected = c * (1 - np.exp(-sigma * L))
    np.testing.assert_allclose(rgb.data[0], expected, rtol=0.01)


def test_opaque_front_sample_dominates():
    color = np.array([[[0.2, 0.4, 0.6], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]])
    rgb, _ = composite(np.array([[200.0, 5.0, 5.0]]), color, np.array([[0.1, 0.1, 0.1]]))
    np.testing.assert_allclose(rgb.data[0], [0.2, 0.4, 0.6], atol=1e-8)


def test_invalid_samples_contribute_nothing():
    valid = np.array([[True, False, True]])
    rgb, w = composite(np.ones((1, 3)), np.ones((1, 3, 3)), np.full((1, 3), 0.5), valid)
    assert w.data[0, 1] == 0
    ref, _ = composite(np.ones((1, 2)), np.ones((1, 2, 3)), np.full((1, 2), 0.5))
    np.testing.assert_allclose(rgb.data, ref.data, atol=1e-15)


def test_background_fills_residual_transmittance():
    rgb, w = composite(np.full((1, 2), 0.5), np.zeros((1, 2, 3)), np.full((1, 2), 1.0), background=[1.0, 1.0, 1.0])
    np.testing.assert_allclose(rgb.data[0], np.exp(-1.0), atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_weights_bounded_and_color_in_hull(seed):
    rng = np.random.default_rng(seed)
    S = rng.integers(1, 12)
    sigma = rng.exponential(3.0, (4, S))
    color = rng.random((4, S, 3))
    rgb, w = composite(sigma, color, rng.uniform(0.01, 0.5, (4, S)))
    assert (w.data >= 0).all() and (w.data.sum(1) <= 1 + 1e-12).all()
    assert (rgb.data >= -1e-12).all() and (rgb.data <= color.max(1) + 1e-12).all()


@settings(max_examples=40, deadline=None)
@given(st.floats(0.01, 10), st.floats(0.01, 1), st.floats(0.05, 0.95))
def test_splitting_constant_segment_is_invariant(sigma, delta, frac):
    c = np.array([0.1, 0.5, 0.9])
    one, _ = composite(np.array([[sigma]]), c[None, None], np.array([[delta]]))
    two, _ = composite(np.array([[sigma, sigma]]), np.broadcast_to(c, (1, 2, 3)),
                       np.array([[delta * frac, delta * (1 - frac)]]))
    np.testing.assert_allclose(two.data, one.data, atol=1e-12)


# -- loss ---------------------------------------------------------------------------------

def test_identical_images_zero_loss():
    x = np.random.default_rng(12).random((7, 3))
    assert photometric_loss(x, x).item() == 0.0


def test_single_ray_unit_loss():
    assert photometric_loss(np.array([[1.0, 0, 0]]), np.zeros((1, 3))).item() == 1.0


def test_loss_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        photometric_loss(np.zeros((2, 3)), np.zeros((3, 3)))


def test_loss_gradient_through_heads_on_two_rays():
    rng = np.random.default_rng(13)
    density = DensityHead(3, rng, width=6)
    density.mlp.out.weight.data = rng.normal(0, 0.5, density.mlp.out.weight.shape)
    color = ColorHead(3, 27, 2, rng, width=6)
    feats = rng.normal(size=(2 * 4, 3))
    dirs = positional_encode(np.tile([0.0, 0.6, 0.8], (8, 1)))
    lat = Tensor(rng.normal(size=2))
    deltas = rng.uniform(0.05, 0.2, (2, 4))
    ref = rng.random((2, 3))

    def f():
        sig = ad.reshape(density(Tensor(feats)), (2, 4))
        col = ad.reshape(color(Tensor(feats), dirs, lat), (2, 4, 3))
        return photometric_loss(composite(sig, col, deltas)[0], ref)

    assert ad.grad_check(f, density.parameters() + color.parameters(), max_coords=15) < 1e-4
