"""End-to-end radiance field conditioned on a monocular input video.

A forward pass takes T observed frames (image, pose, camera) and a target
pose/camera, and renders rays of the target view:

1. encode the input images into pixel-aligned feature maps;
2. pool per-vertex features over frames with visibility weights, scatter
   them onto a voxel grid around the target-pose mesh and diffuse them with
   sparse convolutions (the volume feature);
3. warp every ray sample from the target pose into each observed frame via
   refined skinning weights and sample that frame's features;
4. fuse the two with attention, predict density and color, and composite.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import Tensor
from .body import BodyTemplate, Pose, blend_apply, forward_kinematics
from .deformation import BlendWeightRefiner, gather_temporal_features, initial_blend_weights, warp_to_observation
from .encoder import FeatureMap, ImageEncoder, sample_pixel_features
from .geometry import (Camera, DistanceGrid, Rays, RaySamples, build_distance_grid, grid_bbox,
                       rasterize_visibility)
from .nn import Module
from .render import (CameraLatentCodes, ColorHead, DensityHead, TemporalAttention, composite,
                     positional_encode)
from .volume import (DiffusedVolume, VolumeDiffuser, aggregate_vertex_features, query_volume, scatter_to_voxels,
                     volume_grid)


@dataclass
class ModelConfig:
    feature_channels: int = 32
    encoder_stride: int = 4
    rgb_skip: bool = False
    volume_channels: int = 32
    refiner_width: int = 64
    refiner_depth: int = 4
    attention_dim: int = 32
    head_width: int = 64
    head_depth: int = 2
    latent_dim: int = 16
    n_freqs: int = 4
    visibility_scale: float = 8.0
    use_attention: bool = True
    use_refinement: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"model config: unknown keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class FrameView:
    """One observed frame with its pose-dependent geometry precomputed."""
    image: np.ndarray
    pose: Pose
    camera: Camera
    transforms: np.ndarray
    vertices: np.ndarray
    uv: np.ndarray
    ok: np.ndarray
    visible: np.ndarray


def prepare_frame(template: BodyTemplate, image: np.ndarray, pose: Pose, camera: Camera,
                  visibility_scale: float = 8.0) -> FrameView:
    T = forward_kinematics(template, pose)
    verts = blend_apply(template.blend_weights, T, template.vertices)
    uv, _, ok = camera.project(verts)
    vis = rasterize_visibility(verts, template.faces, camera, resolution_scale=visibility_scale)
    return FrameView(np.asarray(image, dtype=np.float64), pose, camera, T, verts, uv, ok, vis)


@dataclass
class TargetGeometry:
    """Target-pose mesh, its distance grid and the feature-volume grid."""
    template: BodyTemplate
    pose: Pose
    transforms: np.ndarray
    vertices: np.ndarray
    grid: DistanceGrid
    origin: np.ndarray
    dims: tuple
    voxel_size: float
    threshold: float
    rulebooks: dict = field(default_factory=dict)
    tree: cKDTree | None = None


def prepare_target(template: BodyTemplate, pose: Pose, voxel_size: float, threshold: float) -> TargetGeometry:
    T = forward_kinematics(template, pose)
    verts = blend_apply(template.blend_weights, T, template.vertices)
    margin = threshold + 2 * voxel_size
    grid = build_distance_grid(verts, template.faces, grid_bbox(verts, margin), voxel_size)
    origin, dims = volume_grid(verts, voxel_size, margin)
    return TargetGeometry(template, pose, T, verts, grid, origin, dims, voxel_size, threshold, tree=cKDTree(verts))


class HumanRadianceField(Module):
    def __init__(self, n_joints: int, camera_ids, config: ModelConfig | None = None, seed: int = 0):
        cfg = config or ModelConfig()
        self.config = cfg
        self.n_joints = n_joints
        rng = np.random.default_rng(seed)
        self.encoder = ImageEncoder(rng, out_channels=cfg.feature_channels, output_stride=cfg.encoder_stride,
                                    rgb_skip=cfg.rgb_skip)
        c_f = self.encoder.channels
        self.diffuser = VolumeDiffuser(c_f, rng, channels=cfg.volume_channels)
        c_v = self.diffuser.out_channels
        self.refiner = BlendWeightRefiner(n_joints, rng, cfg.refiner_width, cfg.refiner_depth)
        self.attn_sigma = TemporalAttention(c_v, c_f, rng, cfg.attention_dim)
        self.attn_rgb = TemporalAttention(c_v, c_f, rng, cfg.attention_dim)
        self.density = DensityHead(c_v, rng, cfg.head_width, cfg.head_depth)
        n_dir = 3 + 6 * cfg.n_freqs
        self.latents = CameraLatentCodes(camera_ids, cfg.latent_dim, rng)
        self.color = ColorHead(c_v, n_dir, cfg.latent_dim, rng, cfg.head_width, cfg.head_depth)
        self.name_parameters()
        self.n_point_evals = 0

    # -- stages ----------------------------------------------------------------
    def encode(self, frames: list) -> FeatureMap:
        return self.encoder(np.stack([f.image for f in frames]))

    def vertex_features(self, frames: list, fmap: FeatureMap):
        """Visibility-weighted per-vertex features -> ((V, C) Tensor, never-visible flags)."""
        uv = np.stack([f.uv for f in frames])
        ok = np.stack([f.ok for f in frames])
        feats, inside = sample_pixel_features(fmap, uv, ok)
        vis = np.stack([f.visible for f in frames]) & inside
        return aggregate_vertex_features(feats, vis)

    def feature_volume(self, frames: list, fmap: FeatureMap, target: TargetGeometry) -> DiffusedVolume:
        agg, _ = self.vertex_features(frames, fmap)
        vol = scatter_to_voxels(agg, target.vertices, target.origin, target.voxel_size, target.dims)
        # occupancy depends only on the target mesh, so rulebooks are reusable
        return self.diffuser(vol, target.rulebooks)

    def blend_weights(self, points: np.ndarray, target: TargetGeometry):
        w_s, d, _ = initial_blend_weights(points, target.vertices, target.template.blend_weights, target.tree)
        if not self.config.use_refinement:
            return Tensor(w_s), w_s
        return self.refiner(w_s, target.pose.flat(), d), w_s

    def point_fields(self, points: np.ndarray, dirs: np.ndarray, frames: list, fmap: FeatureMap,
                     volume: DiffusedVolume, target: TargetGeometry, camera_id: int) -> dict:
        """Density and color at target-space points."""
        self.n_point_evals += len(points)
        f_v, outside = query_volume(volume, points)
        out = {"outside": outside}
        if self.config.use_attention:
            w_g, _ = self.blend_weights(points, target)
            T_o = np.stack([f.transforms for f in frames])
            p_o = warp_to_observation(points, w_g, target.transforms, T_o)
            feats, mask = gather_temporal_features(p_o, fmap, [f.camera for f in frames])
            f_sigma, a_sigma = self.attn_sigma(f_v, feats, mask)
            f_rgb, a_rgb = self.attn_rgb(f_v, feats, mask)
            out.update(weights=w_g, attention=(a_sigma, a_rgb), mask=mask)
        else:
            f_sigma = f_rgb = f_v
        out["sigma"] = self.density(f_sigma)
        latent = self.latents.lookup(camera_id)
        out["color"] = self.color(f_rgb, positional_encode(dirs, self.config.n_freqs), latent)
        return out

    def render_rays(self, frames: list, target: TargetGeometry, rays: Rays, samples: RaySamples,
                    camera_id: int, fmap: FeatureMap | None = None, volume: DiffusedVolume | None = None):
        """Composite colors for every ray -> ((R, 3) Tensor, (R, K) weights or None).

        Rays without samples never reach the network and render as background.
        """
        R, K = samples.depths.shape
        live = np.nonzero(samples.valid)[0]
        if len(live) == 0:
            return Tensor(np.zeros((R, 3))), None
        if fmap is None:
            fmap = self.encode(frames)
        if volume is None:
            volume = self.feature_volume(frames, fmap, target)
        pts = samples.points[live].reshape(-1, 3)
        dirs = np.repeat(rays.directions[live], K, axis=0)
        fields_ = self.point_fields(pts, dirs, frames, fmap, volume, target, camera_id)
        sigma = ad.reshape(fields_["sigma"], (len(live), K))
        color = ad.reshape(fields_["color"], (len(live), K, 3))
        rgb, w = composite(sigma, color, samples.deltas[live])
        full = ad.scatter_add(rgb, live, R)
        return full, w
