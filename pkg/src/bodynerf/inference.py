"""Cached scene geometry, full-image rendering and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .body import Pose
from .data import Sequence, load_sequence, save_sequence, select_frames
from .geometry import Camera, RayIntervals, Rays, generate_rays, near_surface_intervals, stratified_samples
from .metrics import psnr, ssim
from .model import FrameView, HumanRadianceField, TargetGeometry, prepare_frame, prepare_target


@dataclass
class Capture:
    """One person: the monocular input video plus optional synchronized extra views."""
    video: Sequence
    views: list = field(default_factory=list)

    @property
    def template(self):
        return self.video.template

    def all_sequences(self) -> list:
        return [self.video] + list(self.views)


def save_capture(capture: Capture, directory) -> Path:
    """One sequence directory per camera; ``video`` holds the input video, ``view_k`` the extras."""
    d = Path(directory)
    save_sequence(capture.video, d / "video")
    for k, seq in enumerate(capture.views):
        save_sequence(seq, d / f"view_{k}")
    return d


def load_capture(directory) -> Capture:
    d = Path(directory)
    if not (d / "video" / "manifest.json").exists():
        raise ValueError(f"{d}: no input video (expected {d / 'video' / 'manifest.json'})")
    video = load_sequence(d / "video")
    views = sorted(d.glob("view_*"), key=lambda p: int(p.name.split("_")[1]))
    return Capture(video, [load_sequence(p) for p in views])


@dataclass
class RayPool:
    """Every pixel of the dilated 2-D body box with its near-surface intervals."""
    rays: Rays
    intervals: RayIntervals
    colors: np.ndarray

    def __len__(self) -> int:
        return len(self.rays)

    def take(self, idx):
        iv = RayIntervals(self.intervals.starts[idx], self.intervals.ends[idx], self.intervals.step)
        return self.rays.subset(idx), iv, self.colors[idx]


def body_box_pixels(vertices: np.ndarray, camera: Camera, dilation: int) -> np.ndarray:
    """(col, row) of every pixel in the projected mesh box grown by ``dilation`` px."""
    uv, _, ok = camera.project(vertices)
    if not ok.any():
        return np.zeros((0, 2))
    uv = uv[ok]
    c0 = int(np.clip(np.floor(uv[:, 0].min()) - dilation, 0, camera.width - 1))
    c1 = int(np.clip(np.ceil(uv[:, 0].max()) + dilation, 0, camera.width - 1))
    r0 = int(np.clip(np.floor(uv[:, 1].min()) - dilation, 0, camera.height - 1))
    r1 = int(np.clip(np.ceil(uv[:, 1].max()) + dilation, 0, camera.height - 1))
    rows, cols = np.mgrid[r0:r1 + 1, c0:c1 + 1]
    return np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)


class SceneCache:
    """Memoizes pose-dependent geometry so training only recomputes learned quantities."""

    def __init__(self, voxel_size: float, threshold: float, visibility_scale: float = 8.0, dilation: int = 2):
        self.voxel_size = voxel_size
        self.threshold = threshold
        self.visibility_scale = visibility_scale
        self.dilation = dilation
        self._frames: dict = {}
        self._targets: dict = {}
        self._pools: dict = {}

    def frame(self, seq: Sequence, i: int) -> FrameView:
        key = (id(seq), i)
        if key not in self._frames:
            f = seq.frames[i]
            self._frames[key] = prepare_frame(seq.template, f.image, f.pose, f.camera, self.visibility_scale)
        return self._frames[key]

    def target(self, seq: Sequence, pose: Pose) -> TargetGeometry:
        key = (id(seq.template), pose.flat().tobytes(), pose.root_translation.tobytes())
        if key not in self._targets:
            self._targets[key] = prepare_target(seq.template, pose, self.voxel_size, self.threshold)
        return self._targets[key]

    def pool(self, seq: Sequence, i: int) -> RayPool:
        key = (id(seq), i)
        if key not in self._pools:
            f = seq.frames[i]
            tg = self.target(seq, f.pose)
            pix = body_box_pixels(tg.vertices, f.camera, self.dilation)
            rays = generate_rays(f.camera, pix, f.time_index)
            iv = near_surface_intervals(rays, tg.grid, self.threshold)
            cols = f.image[pix[:, 1].astype(int), pix[:, 0].astype(int)]
            self._pools[key] = RayPool(rays, iv, cols)
        return self._pools[key]


def render_image(model: HumanRadianceField, frames: list, target: TargetGeometry, camera: Camera,
                 n_samples: int = 16, chunk: int = 1024, density_grid: bool = False):
    """Render every pixel of ``camera``; rays that miss the near-surface region stay black.

    Returns (image (H, W, 3), density values on the target distance grid or None).
    """
    W, H = camera.width, camera.height
    rows, cols = np.mgrid[0:H, 0:W]
    pix = np.stack([cols.ravel(), rows.ravel()], axis=1).astype(np.float64)
    rays = generate_rays(camera, pix)
    iv = near_surface_intervals(rays, target.grid, target.threshold)
    img = np.zeros((H * W, 3))
    dens = None
    with ad.no_grad():
        fmap = model.encode(frames)
        volume = model.feature_volume(frames, fmap, target)
        hit = np.nonzero(iv.hit)[0]
        for s in range(0, len(hit), chunk):
            idx = hit[s:s + chunk]
            sub = RayIntervals(iv.starts[idx], iv.ends[idx], iv.step)
            rs = rays.subset(idx)
            samples = stratified_samples(rs, sub, n_samples)
            rgb, _ = model.render_rays(frames, target, rs, samples, camera.camera_id, fmap, volume)
            img[idx] = rgb.data
        if density_grid:
            dens = np.zeros(target.grid.values.size)
            centers = target.grid.centers()
            near = np.nonzero(target.grid.values.reshape(-1) <= target.threshold)[0]
            dirs = np.tile([0.0, 0.0, 1.0], (1, 1))
            for s in range(0, len(near), 4096):
                idx = near[s:s + 4096]
                out = model.point_fields(centers[idx], np.repeat(dirs, len(idx), 0), frames, fmap, volume,
                                         target, camera.camera_id)
                dens[idx] = out["sigma"].data
            dens = dens.reshape(target.grid.values.shape)
    return img.reshape(H, W, 3), dens


def input_frames(cache: SceneCache, capture: Capture, target_seq: Sequence, target_index: int, T: int,
                 criterion: str = "evenly", exclude_target: bool = True) -> list:
    """Indices of the input video frames used to render one target frame."""
    video = capture.video
    cand = video.indices("train")
    if exclude_target and target_seq is video:
        # a single-frame video has nothing else to condition on
        cand = [i for i in cand if i != target_index] or cand
    T = min(T, len(cand))
    pose = target_seq.frames[target_index].pose
    return select_frames(video, target_index, T, criterion, candidates=cand, target_pose=pose)


def evaluate(model: HumanRadianceField, capture: Capture, targets: list, cache: SceneCache, T: int,
             criterion: str = "evenly", n_samples: int = 16) -> list:
    """Render each (sequence, frame index) target from the input video -> list of result dicts."""
    results = []
    for seq, i in targets:
        idx = input_frames(cache, capture, seq, i, T, criterion)
        frames = [cache.frame(capture.video, j) for j in idx]
        f = seq.frames[i]
        tg = cache.target(seq, f.pose)
        img, _ = render_image(model, frames, tg, f.camera, n_samples)
        results.append({"sequence": seq.name, "frame": i, "inputs": idx, "image": img,
                        "psnr": psnr(img, f.image), "ssim": ssim(img, f.image)})
    return results


def constant_baseline(images: list) -> float:
    """Mean PSNR of each image against its own best constant color (its mean color)."""
    return float(np.mean([psnr(np.broadcast_to(im.reshape(-1, 3).mean(0), im.shape), im) for im in images]))
