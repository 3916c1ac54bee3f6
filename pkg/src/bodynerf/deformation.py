"""Target-space to observation-space warping of sample points."""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import FeatureMap, sample_pixel_features
from .geometry import NEAR, Camera
from .nn import MLP, Module


def nearest_vertex_bruteforce(points: np.ndarray, vertices: np.ndarray, chunk: int = 2048):
    """Exhaustive nearest vertex -> (index, distance); ties go to the lowest index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    idx = np.empty(len(points), dtype=np.int64)
    dist = np.empty(len(points))
    for s in range(0, len(points), chunk):
        diff = points[s:s + chunk, None, :] - vertices[None, :, :]
        d2 = np.einsum("pvk,pvk->pv", diff, diff)
        j = np.argmin(d2, axis=1)  # first minimum wins
        idx[s:s + chunk] = j
        dist[s:s + chunk] = np.sqrt(d2[np.arange(len(j)), j])
    return idx, dist


def nearest_vertex(points: np.ndarray, vertices: np.ndarray, tree: cKDTree | None = None, k: int = 8):
    """Exact nearest vertex via a k-d tree, lowest index among exact ties.

    The tree's k nearest candidates are rescored with the same squared
    distance arithmetic as the brute-force scan, so ties resolve identically.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tree = tree or cKDTree(vertices)
    k = min(k, len(vertices))
    _, cand = tree.query(points, k=k)
    cand = cand.reshape(len(points), k)
    diff = points[:, None, :] - vertices[cand]
    d2 = np.einsum("pkc,pkc->pk", diff, diff)
    best = d2.min(1, keepdims=True)
    tied = np.where(d2 == best, cand, np.iinfo(np.int64).max)
    idx = tied.min(1)
    dist = np.sqrt(best[:, 0])
    # all k candidates tied: a lower-index vertex may lie outside the candidate set
    full = (d2 == best).all(1)
    if full.any():
        idx[full], dist[full] = nearest_vertex_bruteforce(points[full], vertices)
    return idx, dist


def initial_blend_weights(points: np.ndarray, vertices: np.ndarray, blend_weights: np.ndarray,
                          tree: cKDTree | None = None):
    """Copy the blend-weight row of the nearest posed vertex.

    Returns (w_s (P, N), distance (P,), vertex index (P,)).
    """
    idx, dist = nearest_vertex(points, vertices, tree)
    return blend_weights[idx], dist, idx


class BlendWeightRefiner(Module):
    """w_g = softmax(w_s + MLP(w_s, pose, d)); the MLP's last layer starts at zero."""

    def __init__(self, n_joints: int, rng: np.random.Generator, width: int = 64, depth: int = 4):
        self.n_joints = n_joints
        self.mlp = MLP(n_joints + 3 * n_joints + 1, n_joints, width, depth, rng, zero_last=True)

    def __call__(self, w_s: np.ndarray, pose_flat: np.ndarray, d: np.ndarray) -> Tensor:
        P = len(w_s)
        x = np.concatenate([w_s, np.broadcast_to(pose_flat, (P, len(pose_flat))), d.reshape(-1, 1)], axis=1)
        return ad.softmax(ad.as_tensor(w_s) + self.mlp(Tensor(x)), axis=-1)


def relative_transforms(T_g: np.ndarray, T_o: np.ndarray) -> np.ndarray:
    """M[t, j] = T_o[t, j] @ inv(T_g[j]) for observed transforms T_o (T, N, 4, 4)."""
    det = np.linalg.det(T_g[:, :3, :3])
    if np.any(np.abs(det) < 1e-12):
        raise np.linalg.LinAlgError("warp: singular target transform")
    inv = np.linalg.inv(T_g)
    return np.einsum("tnij,njk->tnik", T_o, inv)


def warp_to_observation(points: np.ndarray, w_g, T_g: np.ndarray, T_o: np.ndarray) -> Tensor:
    """p_o[t] = (sum_j w_j T_o[t, j] T_g[j]^-1) p_g  ->  (T, P, 3).

    ``T_o`` may be a single (N, 4, 4) stack or (T, N, 4, 4).  Gradients flow
    to ``w_g``; the points and transforms are treated as constants.
    """
    T_o = np.asarray(T_o, dtype=np.float64)
    if T_o.ndim == 3:
        T_o = T_o[None]
    w = ad.as_tensor(w_g)
    if w.shape[-1] != T_g.shape[0] or T_o.shape[1] != T_g.shape[0]:
        raise ad.ShapeError(f"warp: weights {w.shape} vs transforms {T_g.shape} / {T_o.shape}")
    M = relative_transforms(T_g, T_o)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    # per-part images of every point: Y[t, p, j] = M[t, j] p
    Y = np.einsum("tnij,pj->tpni", M[:, :, :3, :3], points) + M[:, None, :, :3, 3]
    return ad.tsum(ad.reshape(w, (1,) + w.shape + (1,)) * Y, axis=2)


def project_tensor(points: Tensor, camera: Camera):
    """Differentiable pinhole projection of (P, 3) points -> (uv (P, 2) Tensor, ok mask)."""
    pc = ad.matmul(points, camera.R.T) + camera.t
    z = pc.data[:, 2]
    ok = z > NEAR
    zs = ad.where(ok, pc[:, 2], np.ones_like(z))
    inv = 1.0 / zs
    K = camera.K
    u = (pc[:, 0] * K[0, 0] + pc[:, 1] * K[0, 1]) * inv + K[0, 2]
    v = pc[:, 1] * K[1, 1] * inv + K[1, 2]
    return ad.stack([u, v], axis=1), ok


def gather_temporal_features(p_o: Tensor, fmap: FeatureMap, cameras: list):
    """Project warped points into each observed frame and sample its features.

    p_o: (T, P, 3); fmap batch T aligned with ``cameras``.  Returns
    ((T, P, C) features, (T, P) mask) where the mask marks frames in which the
    point is behind the camera or outside the image (their feature is zero).
    """
    T = p_o.shape[0]
    if len(cameras) != T or fmap.data.shape[0] != T:
        raise ad.ShapeError(f"gather_temporal_features: {T} warped frames, {len(cameras)} cameras, "
                            f"{fmap.data.shape[0]} feature maps")
    uvs, oks = [], []
    for t, cam in enumerate(cameras):
        uv, ok = project_tensor(p_o[t], cam)
        uvs.append(uv)
        oks.append(ok)
    feats, inside = sample_pixel_features(fmap, ad.stack(uvs, axis=0), np.stack(oks))
    return feats, ~inside
