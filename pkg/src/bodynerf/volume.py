"""Visibility-weighted vertex features, sparse voxel volumes and their diffusion."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import Module

OFFSETS = np.array([(i, j, k) for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64)


def aggregate_vertex_features(frame_features, visibility: np.ndarray):
    """Visibility-weighted mean over frames.

    frame_features: (T, V, C) per-frame vertex features; visibility: (T, V)
    bool.  Vertices never visible fall back to the unweighted mean and are
    flagged.  Returns ((V, C) Tensor, never_visible (V,)).
    """
    f = ad.as_tensor(frame_features)
    b = np.asarray(visibility, dtype=np.float64)
    if b.shape != f.shape[:2]:
        raise ad.ShapeError(f"aggregate_vertex_features: visibility {b.shape} vs features {f.shape}")
    total = b.sum(0)
    never = total == 0
    T = b.shape[0]
    weights = np.where(never[None, :], 1.0 / T, b / np.where(never, 1.0, total)[None, :])
    return ad.tsum(f * weights[..., None], axis=0), never


@dataclass
class SparseFeatureVolume:
    coords: np.ndarray  # (M, 3) int voxel coords at this level
    features: Tensor  # (M, C)
    origin: np.ndarray  # world corner of the fine grid
    voxel_size: float  # fine voxel edge
    dims: tuple  # grid extents at this level
    stride: int = 1

    @property
    def cell(self) -> float:
        return self.voxel_size * self.stride

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def linear(self, coords: np.ndarray | None = None) -> np.ndarray:
        c = self.coords if coords is None else coords
        return (c[:, 0] * self.dims[1] + c[:, 1]) * self.dims[2] + c[:, 2]

    def centers(self) -> np.ndarray:
        return self.origin + (self.coords + 0.5) * self.cell


def volume_grid(vertices: np.ndarray, voxel_size: float, margin: float):
    """Fine grid covering the mesh bounding box -> (origin, dims)."""
    lo = vertices.min(0) - margin
    hi = vertices.max(0) + margin
    dims = tuple(int(d) for d in np.ceil((hi - lo) / voxel_size).astype(np.int64))
    return lo, dims


def scatter_to_voxels(vertex_features, vertices: np.ndarray, origin: np.ndarray, voxel_size: float,
                      dims: tuple) -> SparseFeatureVolume:
    """Each non-empty voxel holds the mean feature of the vertices inside it."""
    f = ad.as_tensor(vertex_features)
    idx = np.floor((vertices - origin) / voxel_size).astype(np.int64)
    idx = np.clip(idx, 0, np.array(dims) - 1)
    lin = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    uniq, inverse, counts = np.unique(lin, return_inverse=True, return_counts=True)
    summed = ad.scatter_add(f, inverse, len(uniq))
    feats = summed * (1.0 / counts)[:, None]
    coords = np.stack(np.unravel_index(uniq, dims), axis=1)
    return SparseFeatureVolume(coords, feats, np.asarray(origin, float), float(voxel_size), tuple(dims), 1)


@dataclass
class Rulebook:
    out_coords: np.ndarray
    pairs: list = field(default_factory=list)  # per offset: (in_idx, out_idx)


def dilating_rulebook(coords: np.ndarray, dims: tuple) -> Rulebook:
    """3x3x3 convolution whose output sites are the input sites dilated by one voxel."""
    dims_a = np.array(dims)
    cand = (coords[None, :, :] + OFFSETS[:, None, :]).reshape(-1, 3)
    ok = ((cand >= 0) & (cand < dims_a)).all(1)
    lin = (cand[:, 0] * dims[1] + cand[:, 1]) * dims[2] + cand[:, 2]
    out_lin = np.unique(lin[ok])
    out_coords = np.stack(np.unravel_index(out_lin, dims), axis=1)
    n_in = len(coords)
    pairs = []
    for k in range(len(OFFSETS)):
        sl = slice(k * n_in, (k + 1) * n_in)
        valid = ok[sl]
        in_idx = np.nonzero(valid)[0]
        out_idx = np.searchsorted(out_lin, lin[sl][valid])
        pairs.append((in_idx, out_idx))
    return Rulebook(out_coords, pairs)


def downsample(vol: SparseFeatureVolume) -> SparseFeatureVolume:
    """Stride-2 average pooling over occupied children."""
    dims = tuple(int(-(-d // 2)) for d in vol.dims)
    c = vol.coords // 2
    lin = (c[:, 0] * dims[1] + c[:, 1]) * dims[2] + c[:, 2]
    uniq, inverse, counts = np.unique(lin, return_inverse=True, return_counts=True)
    feats = ad.scatter_add(vol.features, inverse, len(uniq)) * (1.0 / counts)[:, None]
    coords = np.stack(np.unravel_index(uniq, dims), axis=1)
    return SparseFeatureVolume(coords, feats, vol.origin, vol.voxel_size, dims, vol.stride * 2)


class SparseConv3d(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        bound = np.sqrt(6.0 / (27 * c_in))
        self.weight = Parameter(rng.uniform(-bound, bound, (27, c_in, c_out)))
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, vol: SparseFeatureVolume, rulebook: Rulebook | None = None) -> SparseFeatureVolume:
        rb = rulebook or dilating_rulebook(vol.coords, vol.dims)
        out = ad.sparse_conv(vol.features, self.weight, self.bias, rb.pairs, len(rb.out_coords))
        return SparseFeatureVolume(rb.out_coords, out, vol.origin, vol.voxel_size, vol.dims, vol.stride)


@dataclass
class DiffusedVolume:
    levels: list  # SparseFeatureVolume at strides 2, 4, 8, 16
    conv_coords: list  # occupancy of each block's conv output (before pooling)

    @property
    def channels(self) -> int:
        return sum(l.channels for l in self.levels)


class VolumeDiffuser(Module):
    """Four blocks of (sparse 3x3x3 conv, ReLU, stride-2 average pool)."""

    def __init__(self, c_in: int, rng: np.random.Generator, channels: int = 32, n_blocks: int = 4):
        dims = [c_in] + [channels] * n_blocks
        self.convs = [SparseConv3d(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def out_channels(self) -> int:
        return sum(c.weight.shape[2] for c in self.convs)

    def __call__(self, vol: SparseFeatureVolume, cache: dict | None = None) -> DiffusedVolume:
        levels, conv_coords = [], []
        h = vol
        for i, conv in enumerate(self.convs):
            rb = None
            if cache is not None:
                rb = cache.get(i)
                if rb is None:
                    rb = cache[i] = dilating_rulebook(h.coords, h.dims)
            h = conv(h, rb)
            h = SparseFeatureVolume(h.coords, ad.relu(h.features), h.origin, h.voxel_size, h.dims, h.stride)
            conv_coords.append(h.coords)
            h = downsample(h)
            levels.append(h)
        return DiffusedVolume(levels, conv_coords)


def query_level(vol: SparseFeatureVolume, points: np.ndarray) -> Tensor:
    """Trilinear interpolation between cell centers; empty cells count as zero."""
    n = int(np.prod(vol.dims))
    dense = ad.reshape(ad.scatter_add(vol.features, vol.linear(), n), tuple(vol.dims) + (vol.channels,))
    coords = (np.asarray(points, float) - vol.origin) / vol.cell - 0.5
    return ad.trilinear_sample3d(dense, coords)


def query_volume(volume, points: np.ndarray):
    """Volume feature at points -> ((P, sum C) Tensor, outside flag); points outside the grid get zeros."""
    levels = volume.levels if isinstance(volume, DiffusedVolume) else [volume]
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    base = levels[0]
    extent = base.origin + np.array(levels[0].dims) * base.cell
    outside = ((points < base.origin) | (points > extent)).any(1)
    feats = ad.concat([query_level(l, points) for l in levels], axis=1) if len(levels) > 1 else query_level(levels[0], points)
    return feats * (~outside)[:, None].astype(np.float64), outside
