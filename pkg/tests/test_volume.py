import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bodynerf import autodiff as ad
from bodynerf.autodiff import Parameter, Tensor
from bodynerf.volume import (OFFSETS, SparseConv3d, SparseFeatureVolume, VolumeDiffuser, aggregate_vertex_features,
                             dilating_rulebook, downsample, query_volume, scatter_to_voxels, volume_grid)


def make_volume(coords, feats, dims=(6, 6, 6), voxel=0.1, origin=(0.0, 0.0, 0.0)):
    return SparseFeatureVolume(np.asarray(coords, dtype=np.int64), Tensor(np.asarray(feats, dtype=float)),
                               np.asarray(origin, dtype=float), voxel, tuple(dims), 1)


def dense_conv_oracle(coords, feats, weight, bias, dims):
    """Dense zero-padded 3x3x3 correlation: out[x] = b + sum_k in[x - o_k] w[k]."""
    C = feats.shape[1]
    grid = np.zeros(tuple(d + 2 for d in dims) + (C,))
    grid[tuple((coords + 1).T)] = feats
    out = np.zeros(tuple(dims) + (weight.shape[2],))
    for k, o in enumerate(OFFSETS):
        sl = tuple(slice(1 - o[a], 1 - o[a] + dims[a]) for a in range(3))
        out += grid[sl] @ weight[k]
    return out + bias


# -- visibility-weighted aggregation ---------------------------------------------------

def test_single_visible_frame_passes_through():
    f = np.random.default_rng(0).normal(size=(1, 4, 3))
    out, never = aggregate_vertex_features(f, np.ones((1, 4), bool))
    np.testing.assert_array_equal(out.data, f[0])
    assert not never.any()


def test_weighted_mean_uses_visible_frames_only():
    f = np.random.default_rng(1).normal(size=(3, 2, 5))
    vis = np.array([[1, 1], [0, 1], [1, 1]], bool)
    out, _ = aggregate_vertex_features(f, vis)
    np.testing.assert_allclose(out.data[0], (f[0, 0] + f[2, 0]) / 2, atol=1e-15)
    np.testing.assert_allclose(out.data[1], f[:, 1].mean(0), atol=1e-15)


def test_never_visible_vertex_gets_plain_mean_and_flag():
    f = np.random.default_rng(2).normal(size=(3, 2, 4))
    vis = np.array([[0, 1], [0, 0], [0, 0]], bool)
    out, never = aggregate_vertex_features(f, vis)
    np.testing.assert_allclose(out.data[0], f[:, 0].mean(0), atol=1e-15)
    np.testing.assert_array_equal(out.data[1], f[0, 1])
    assert never.tolist() == [True, False]


def test_visibility_shape_mismatch_rejected():
    with pytest.raises(ad.ShapeError):
        aggregate_vertex_features(np.zeros((2, 3, 4)), np.ones((3, 2), bool))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(1, 6))
def test_aggregation_permutation_invariant_and_in_hull(seed, T):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(T, 7, 3))
    vis = rng.random((T, 7)) > 0.4
    out, never = aggregate_vertex_features(f, vis)
    perm = rng.permutation(T)
    out_p, _ = aggregate_vertex_features(f[perm], vis[perm])
    np.testing.assert_allclose(out_p.data, out.data, atol=1e-12)
    for v in range(7):
        rows = f[:, v][vis[:, v]] if not never[v] else f[:, v]
        assert (out.data[v] >= rows.min(0) - 1e-12).all() and (out.data[v] <= rows.max(0) + 1e-12).all()


# -- scattering ----------------------------------------------------------------------

def test_one_vertex_per_voxel_passes_through():
    verts = np.array([[0.05, 0.05, 0.05], [0.25, 0.15, 0.35], [0.55, 0.55, 0.05]])
    f = np.random.default_rng(3).normal(size=(3, 4))
    vol = scatter_to_voxels(f, verts, np.zeros(3), 0.1, (6, 6, 6))
    order = np.argsort(vol.linear())
    lookup = {tuple(c): vol.features.data[i] for i, c in enumerate(vol.coords)}
    np.testing.assert_array_equal(lookup[(0, 0, 0)], f[0])
    np.testing.assert_array_equal(lookup[(2, 1, 3)], f[1])
    np.testing.assert_array_equal(lookup[(5, 5, 0)], f[2])
    assert len(order) == 3


def test_shared_voxel_holds_mean():
    verts = np.array([[0.21, 0.21, 0.21], [0.29, 0.28, 0.22]])
    f = np.array([[1.0, 2.0], [3.0, -2.0]])
    vol = scatter_to_voxels(f, verts, np.zeros(3), 0.1, (6, 6, 6))
    assert vol.coords.tolist() == [[2, 2, 2]]
    np.testing.assert_allclose(vol.features.data[0], [2.0, 0.0])


def test_scatter_occupancy_bounded_and_unique():
    rng = np.random.default_rng(4)
    verts = rng.uniform(0, 1, (300, 3))
    origin, dims = volume_grid(verts, 0.1, 0.05)
    vol = scatter_to_voxels(rng.normal(size=(300, 2)), verts, origin, 0.1, dims)
    assert len(vol.coords) <= 300
    assert len(np.unique(vol.linear())) == len(vol.coords)
    assert (vol.coords >= 0).all() and (vol.coords < np.array(dims)).all()


def test_scatter_then_query_reproduces_vertex_feature():
    verts = np.array([[0.25, 0.35, 0.45]])  # exactly at a voxel center
    f = np.array([[0.7, -1.5, 2.0]])
    vol = scatter_to_voxels(f, verts, np.zeros(3), 0.1, (6, 6, 6))
    out, outside = query_volume(vol, verts)
    np.testing.assert_allclose(out.data[0], f[0], atol=1e-15)
    assert not outside[0]


# -- diffusion ------------------------------------------------------------------------

def test_sparse_conv_matches_dense_oracle():
    rng = np.random.default_rng(5)
    dims = (5, 6, 4)
    lin = rng.choice(np.prod(dims), 9, replace=False)
    coords = np.stack(np.unravel_index(np.sort(lin), dims), 1)
    feats = rng.normal(size=(9, 3))
    conv = SparseConv3d(3, 2, rng)
    conv.bias.data = rng.normal(size=2)
    out = conv(make_volume(coords, feats, dims))
    dense = dense_conv_oracle(coords, feats, conv.weight.data, conv.bias.data, dims)
    np.testing.assert_allclose(out.features.data, dense[tuple(out.coords.T)], atol=1e-12)
    # sites outside the dilated set only see the bias
    mask = np.ones(dims, bool)
    mask[tuple(out.coords.T)] = False
    np.testing.assert_allclose(dense[mask], np.broadcast_to(conv.bias.data, dense[mask].shape), atol=1e-12)


def test_single_voxel_dilates_to_neighborhood():
    vol = make_volume([[3, 3, 3]], [[1.0, 2.0]])
    rb = dilating_rulebook(vol.coords, vol.dims)
    assert sorted(map(tuple, rb.out_coords)) == sorted(map(tuple, OFFSETS + 3))
    diff = VolumeDiffuser(2, np.random.default_rng(6), channels=4)(vol)
    assert sorted(map(tuple, diff.conv_coords[0])) == sorted(map(tuple, OFFSETS + 3))


def test_zero_features_diffuse_to_zero():
    coords = np.array([[1, 1, 1], [2, 1, 1], [4, 4, 4]])
    vol = make_volume(coords, np.zeros((3, 5)))
    out = VolumeDiffuser(5, np.random.default_rng(7), channels=8)(vol)
    assert len(out.levels) == 4
    assert [l.stride for l in out.levels] == [2, 4, 8, 16]
    for lvl in out.levels:
        assert not lvl.features.data.any()


def test_diffusion_gradient_matches_finite_differences():
    rng = np.random.default_rng(8)
    coords = np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [3, 2, 1], [2, 2, 2]])
    x = Parameter(rng.normal(size=(5, 2)))
    diff = VolumeDiffuser(2, rng, channels=3)
    readout = rng.normal(size=(7, 12))
    pts = rng.uniform(0.0, 0.5, (7, 3))

    def f():
        vol = SparseFeatureVolume(coords, x, np.zeros(3), 0.1, (5, 5, 5), 1)
        out, _ = query_volume(diff(vol), pts)
        return ad.tsum(out * readout)

    params = [x, diff.convs[0].weight, diff.convs[2].weight]
    assert ad.grad_check(f, params, max_coords=20) < 1e-4


def test_diffused_occupancy_stays_within_dilation_radius():
    rng = np.random.default_rng(9)
    dims = (16, 16, 16)
    coords = np.unique(rng.integers(4, 12, (12, 3)), axis=0)
    vol = make_volume(coords, rng.normal(size=(len(coords), 2)), dims)
    out = VolumeDiffuser(2, rng, channels=2)(vol)
    # block b's conv output (in its own level's coords) sits within one cell of its input occupancy
    prev = coords
    for b, conv in enumerate(out.conv_coords):
        d = np.abs(conv[:, None, :] - prev[None, :, :]).max(-1).min(1)
        assert d.max() <= 1
        assert len(np.unique(conv, axis=0)) == len(conv)
        prev = out.levels[b].coords


def test_downsample_averages_children():
    vol = make_volume([[0, 0, 0], [1, 1, 1], [2, 0, 0]], [[1.0], [3.0], [5.0]], dims=(5, 5, 5))
    down = downsample(vol)
    assert down.dims == (3, 3, 3) and down.stride == 2
    got = {tuple(c): down.features.data[i, 0] for i, c in enumerate(down.coords)}
    assert got == {(0, 0, 0): 2.0, (1, 0, 0): 5.0}


def test_rulebook_cache_reused():
    vol = make_volume([[2, 2, 2], [3, 2, 2]], [[1.0], [2.0]])
    diff = VolumeDiffuser(1, np.random.default_rng(10), channels=2)
    cache = {}
    a = diff(vol, cache)
    assert sorted(cache) == [0, 1, 2, 3]
    b = diff(vol, cache)
    for la, lb in zip(a.levels, b.levels):
        np.testing.assert_array_equal(la.features.data, lb.features.data)


# -- query ----------------------------------------------------------------------------

def test_query_at_isolated_voxel_center():
    vol = make_volume([[2, 3, 1]], [[4.0, -1.0]])
    out, _ = query_volume(vol, vol.centers())
    np.testing.assert_allclose(out.data[0], [4.0, -1.0], rtol=1e-15)


def test_query_far_outside_is_zero_and_flagged():
    vol = make_volume([[0, 0, 0]], [[4.0, -1.0]])
    out, outside = query_volume(vol, np.array([[5.0, 5.0, 5.0], [-1.0, 0.0, 0.0]]))
    assert outside.all() and not out.data.any()


def test_query_midway_between_centers_is_mean():
    vol = make_volume([[1, 2, 2], [2, 2, 2]], [[1.0, 4.0], [3.0, 0.0]])
    mid = vol.centers().mean(0)
    out, _ = query_volume(vol, mid[None])
    np.testing.assert_allclose(out.data[0], [2.0, 2.0], atol=1e-15)


def test_multilevel_query_concatenates_levels():
    rng = np.random.default_rng(11)
    coords = np.unique(rng.integers(0, 8, (20, 3)), axis=0)
    vol = make_volume(coords, rng.normal(size=(len(coords), 3)), dims=(8, 8, 8))
    diff = VolumeDiffuser(3, rng, channels=5)
    out, _ = query_volume(diff(vol), rng.uniform(0, 0.8, (6, 3)))
    assert out.shape == (6, diff.out_channels) == (6, 20)
