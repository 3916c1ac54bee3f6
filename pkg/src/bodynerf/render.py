"""Feature fusion by attention, density/color heads and volume compositing."""
from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .nn import MLP, Linear, Module

log = logging.getLogger(__name__)

MASKED_LOGIT = -1e30


class TemporalAttention(Module):
    """Single-head scaled dot-product attention from a volume query to T frame features.

    Query from the volume feature, keys/values from the per-frame point features; masked
    frames get a -1e30 logit.  The attended value is added to the volume feature, and rows
    with every frame masked return the volume feature unchanged.
    """

    def __init__(self, c_query: int, c_frame: int, rng: np.random.Generator, d_k: int = 32):
        self.q = Linear(c_query, d_k, rng)
        self.k = Linear(c_frame, d_k, rng)
        self.v = Linear(c_frame, c_query, rng)
        self.d_k = d_k

    def weights(self, f_v: Tensor, frame_feats: Tensor, mask: np.ndarray) -> Tensor:
        """Attention weights (P, T); rows sum to one."""
        q = self.q(f_v)  # (P, d)
        k = ad.transpose(self.k(frame_feats), (1, 0, 2))  # (P, T, d)
        logits = ad.tsum(ad.reshape(q, (q.shape[0], 1, self.d_k)) * k, axis=-1) * (1.0 / np.sqrt(self.d_k))
        logits = ad.where(mask.T, np.full(mask.T.shape, MASKED_LOGIT), logits)
        return ad.softmax(logits, axis=-1)

    def __call__(self, f_v: Tensor, frame_feats: Tensor, mask: np.ndarray):
        a = self.weights(f_v, frame_feats, mask)
        v = ad.transpose(self.v(frame_feats), (1, 0, 2))  # (P, T, C)
        attended = ad.tsum(ad.reshape(a, a.shape + (1,)) * v, axis=1)
        live = (~mask.all(0)).astype(np.float64)[:, None]
        return f_v + attended * live, a


def positional_encode(d: np.ndarray, n_freqs: int = 4) -> np.ndarray:
    """(d, sin(2^0 pi d), cos(2^0 pi d), ..., sin(2^(L-1) pi d), cos(2^(L-1) pi d))."""
    d = np.asarray(d, dtype=np.float64)
    parts = [d]
    for level in range(n_freqs):
        parts += [np.sin(2.0 ** level * np.pi * d), np.cos(2.0 ** level * np.pi * d)]
    return np.concatenate(parts, axis=-1)


class CameraLatentCodes(Module):
    """Learnable vector per camera id; unknown ids get the table mean."""

    def __init__(self, camera_ids, dim: int, rng: np.random.Generator):
        self.ids = sorted(int(i) for i in set(camera_ids))
        self.row = {cid: r for r, cid in enumerate(self.ids)}
        self.table = Parameter(rng.normal(0.0, 0.1, (len(self.ids), dim)))

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def lookup(self, camera_id: int) -> Tensor:
        r = self.row.get(int(camera_id))
        if r is None:
            log.warning("unknown camera_id %s; using the mean latent code", camera_id)
            return ad.mean(self.table, axis=0)
        return self.table[r]


class DensityHead(Module):
    def __init__(self, c_in: int, rng: np.random.Generator, width: int = 64, depth: int = 2):
        self.mlp = MLP(c_in, 1, width, depth, rng, zero_last=True)

    def __call__(self, f_e: Tensor) -> Tensor:
        return ad.softplus(self.mlp(f_e))[:, 0]


class ColorHead(Module):
    def __init__(self, c_in: int, n_dir: int, n_latent: int, rng: np.random.Generator, width: int = 64,
                 depth: int = 2):
        self.mlp = MLP(c_in + n_dir + n_latent, 3, width, depth, rng, zero_last=False)

    def __call__(self, f_e: Tensor, dir_enc: np.ndarray, latent: Tensor) -> Tensor:
        P = f_e.shape[0]
        lat = ad.as_tensor(latent)
        lat = ad.reshape(lat, (1, -1)) * np.ones((P, 1))
        return ad.sigmoid(self.mlp(ad.concat([f_e, Tensor(dir_enc), lat], axis=1)))


def composite(sigma, color, deltas: np.ndarray, valid: np.ndarray | None = None, background=None):
    """Alpha-composite ordered samples along each ray.

    sigma (R, S), color (R, S, 3), deltas (R, S).  Invalid samples contribute
    nothing.  Returns (rgb (R, 3), weights (R, S)).
    """
    sigma, color = ad.as_tensor(sigma), ad.as_tensor(color)
    deltas = np.asarray(deltas, dtype=np.float64)
    if valid is not None:
        deltas = np.where(valid, deltas, 0.0)
    tau = sigma * deltas
    alpha = 1.0 - ad.exp(-tau)
    trans = ad.exp(-(ad.cumsum(tau, axis=1) - tau))  # exclusive prefix sum
    w = trans * alpha
    rgb = ad.tsum(ad.reshape(w, w.shape + (1,)) * color, axis=1)
    if background is not None:
        residual = 1.0 - ad.tsum(w, axis=1)
        rgb = rgb + ad.reshape(residual, (-1, 1)) * np.asarray(background, dtype=np.float64)
    return rgb, w


def photometric_loss(rendered, reference) -> Tensor:
    """Sum over rays of the squared color error."""
    rendered = ad.as_tensor(rendered)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ad.ShapeError(f"photometric_loss: rendered {rendered.shape} vs reference {reference.shape}")
    diff = rendered - reference
    return ad.tsum(diff * diff)
