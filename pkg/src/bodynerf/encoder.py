"""Small convolutional image encoder producing pixel-aligned feature maps."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import Module


@dataclass
class FeatureMap:
    data: Tensor  # (B, C, Hf, Wf)
    stride: int
    image_size: tuple  # (width, height) of the un-padded input

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    def to_grid(self, uv: np.ndarray) -> np.ndarray:
        """Image coords -> continuous feature-grid coords (cell i is centered on pixel i*s + (s-1)/2)."""
        return (uv - (self.stride - 1) / 2.0) / self.stride


class Conv(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, zero_init: bool = False):
        fan_in = c_in * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = np.zeros((c_out, c_in, k, k)) if zero_init else rng.uniform(-bound, bound, (c_out, c_in, k, k))
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(c_out))
        self.k = k

    def __call__(self, x: Tensor, stride: int = 1) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, stride=stride, padding=self.k // 2)


class ImageEncoder(Module):
    """Four conv blocks (3x3 conv, ReLU, 2x2 max-pool) at strides 2, 4, 8, 16.

    The last two blocks are bilinearly upsampled to ``output_stride``,
    concatenated and mixed by a 1x1 conv into ``out_channels`` features.
    With ``rgb_skip`` the normalized image (average-pooled to the output
    stride) is appended as three extra channels.
    """

    def __init__(self, rng: np.random.Generator, channels=(16, 32, 32, 32), out_channels: int = 32,
                 output_stride: int = 4, rgb_skip: bool = False, zero_last: bool = False):
        if output_stride not in (1, 2, 4, 8, 16):
            raise ValueError("output_stride must be a power of two <= 16")
        dims = (3,) + tuple(channels)
        self.blocks = [Conv(a, b, 3, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.mix = Conv(channels[2] + channels[3], out_channels, 1, rng, zero_init=zero_last)
        self.output_stride = output_stride
        self.rgb_skip = rgb_skip
        self.mean = np.zeros(3)
        self.std = np.ones(3)

    @property
    def channels(self) -> int:
        return self.mix.weight.shape[0] + (3 if self.rgb_skip else 0)

    total_stride = 16

    def set_normalization(self, images: np.ndarray) -> None:
        """Per-channel mean/std over a stack of (…, H, W, 3) training images."""
        flat = np.asarray(images, dtype=np.float64).reshape(-1, 3)
        self.mean = flat.mean(0)
        self.std = np.maximum(flat.std(0), 1e-3)

    def __call__(self, images: np.ndarray) -> FeatureMap:
        images = np.asarray(images, dtype=np.float64)
        if images.ndim == 3:
            images = images[None]
        B, H, W, _ = images.shape
        s = self.total_stride
        Hp, Wp = -(-H // s) * s, -(-W // s) * s
        x = (images - self.mean) / self.std
        x = np.pad(x, ((0, 0), (0, Hp - H), (0, Wp - W), (0, 0))).transpose(0, 3, 1, 2)
        h = Tensor(np.ascontiguousarray(x))
        feats = []
        for block in self.blocks:
            h = ad.max_pool2d(ad.relu(block(h)), 2)
            feats.append(h)
        o = self.output_stride
        Ho, Wo = Hp // o, Wp // o
        ys, xs = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
        centers = np.stack([xs * o + (o - 1) / 2, ys * o + (o - 1) / 2], -1).reshape(1, -1, 2)
        ups = []
        for level, f in ((8, feats[2]), (16, feats[3])):
            grid = (centers - (level - 1) / 2) / level
            up = ad.bilinear_sample2d(f, np.broadcast_to(grid, (B,) + grid.shape[1:]).copy())
            ups.append(ad.reshape(ad.transpose(up, (0, 2, 1)), (B, -1, Ho, Wo)))
        out = self.mix(ad.concat(ups, axis=1))
        if self.rgb_skip:
            pooled = x.reshape(B, 3, Ho, o, Wo, o).mean(axis=(3, 5))
            out = ad.concat([out, Tensor(pooled)], axis=1)
        return FeatureMap(out, o, (W, H))


def sample_pixel_features(fmap: FeatureMap, uv, valid: np.ndarray | None = None):
    """Bilinearly sample features at image coords ``uv`` (B, P, 2) -> ((B, P, C), in-image mask).

    Points outside the image (or flagged invalid) get a zero vector.
    ``uv`` may be a Tensor so gradients flow to the coordinates.
    """
    uv_t = ad.as_tensor(uv)
    W, H = fmap.image_size
    u, v = uv_t.data[..., 0], uv_t.data[..., 1]
    inside = (u >= -0.5) & (u <= W - 0.5) & (v >= -0.5) & (v <= H - 0.5)
    if valid is not None:
        inside &= valid
    s = fmap.stride
    grid = (uv_t - (s - 1) / 2.0) * (1.0 / s)
    out = ad.bilinear_sample2d(fmap.data, grid)
    return out * inside[..., None].astype(np.float64), inside


def sample_pixel_feature(fmap: FeatureMap, uv, batch: int = 0):
    """Single-point convenience: C-vector (numpy) and out-of-bounds flag."""
    f, inside = sample_pixel_features(
        FeatureMap(ad.Tensor(fmap.data.data[batch:batch + 1]), fmap.stride, fmap.image_size),
        np.asarray(uv, dtype=np.float64).reshape(1, 1, 2))
    return f.data[0, 0], not bool(inside[0, 0])
