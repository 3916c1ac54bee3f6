"""Training loops for monocular (MoT) and multi-view (MVT) supervision."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import save_checkpoint
from .geometry import stratified_samples
from .inference import Capture, SceneCache, input_frames
from .model import HumanRadianceField, ModelConfig
from .render import photometric_loss

log = logging.getLogger(__name__)

MODES = ("MoT", "MVT")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    mode: str = "MoT"
    n_inputs: int = 8
    rays_per_batch: int = 256
    n_samples: int = 16
    iterations: int = 2000
    lr: float = 1e-4
    voxel_size: float = 0.02
    threshold: float = 0.05
    seed: int = 0
    criterion: str = "evenly"
    log_window: int = 100
    checkpoint_every: int = 0
    bbox_dilation: int = 2
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"train config: mode must be one of {MODES}, got {self.mode!r}")
        if self.n_inputs < 1:
            raise ValueError("train config: n_inputs must be >= 1")
        if self.threshold <= 0:
            raise ValueError("train config: threshold must be positive")
        if self.voxel_size <= 0:
            raise ValueError("train config: voxel_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"train config: unknown keys {sorted(unknown)}")
        if "seed" not in d:
            raise ValueError("train config: 'seed' is required")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def window_means(losses, window: int) -> np.ndarray:
    n = len(losses) // window
    return np.asarray(losses[:n * window], dtype=np.float64).reshape(n, window).mean(1)


class Trainer:
    """One Adam step per iteration on a random target frame.

    MoT targets are training frames of the input video itself (the target is
    never among its own inputs); MVT targets come from the other cameras and
    the inputs always come from the input video.
    """

    def __init__(self, config: TrainConfig, captures: list, model: HumanRadianceField | None = None,
                 cache: SceneCache | None = None):
        if not captures:
            raise ValueError("trainer: at least one capture is required")
        self.config = config
        self.captures = [c if isinstance(c, Capture) else Capture(c) for c in captures]
        self.rng = np.random.default_rng(config.seed)
        n_joints = self.captures[0].template.n_joints
        if any(c.template.n_joints != n_joints for c in self.captures):
            raise ValueError("trainer: all captures must share the joint count")
        self.targets = []  # (capture index, sequence, frame index)
        for k, cap in enumerate(self.captures):
            pool = [cap.video] if config.mode == "MoT" else cap.views
            if config.mode == "MVT" and not cap.views:
                raise ValueError("trainer: MVT needs captures with extra views")
            for seq in pool:
                self.targets += [(k, seq, i) for i in seq.indices("train")]
        if not self.targets:
            raise ValueError("trainer: no training targets")
        cam_ids = sorted({seq.frames[i].camera.camera_id for _, seq, i in self.targets})
        if model is None:
            model = HumanRadianceField(n_joints, cam_ids, ModelConfig.from_dict(config.model), config.seed)
            train_images = [c.video.frames[i].image for c in self.captures for i in c.video.indices("train")]
            model.encoder.set_normalization(np.stack(train_images))
        self.model = model
        self.params = model.parameters()
        vis_scale = model.config.visibility_scale
        self.cache = cache or SceneCache(config.voxel_size, config.threshold, vis_scale, config.bbox_dilation)
        self.losses: list = []
        self.input_cameras: set = set()

    def step(self) -> float:
        cfg = self.config
        it = len(self.losses)
        k, seq, i = self.targets[self.rng.integers(len(self.targets))]
        cap = self.captures[k]
        idx = input_frames(self.cache, cap, seq, i, cfg.n_inputs, cfg.criterion)
        frames = [self.cache.frame(cap.video, j) for j in idx]
        self.input_cameras.update(f.camera.camera_id for f in frames)
        target = self.cache.target(seq, seq.frames[i].pose)
        pool = self.cache.pool(seq, i)
        n = min(cfg.rays_per_batch, len(pool))
        pick = np.sort(self.rng.choice(len(pool), size=n, replace=False))
        rays, iv, colors = pool.take(pick)
        samples = stratified_samples(rays, iv, cfg.n_samples, self.rng)
        rgb, _ = self.model.render_rays(frames, target, rays, samples, seq.frames[i].camera.camera_id)
        loss = photometric_loss(rgb, colors)
        value = float(loss.data)
        if not np.isfinite(value):
            raise TrainingError(f"iteration {it}: non-finite loss {value} "
                                f"(sequence {seq.name}, frame {i}, inputs {idx}, {int(samples.valid.sum())} live rays)")
        if rgb.requires_grad:
            loss.backward()
            ad.adam_step(self.params, cfg.lr)
        self.losses.append(value / max(n, 1))
        return value

    def run(self, iterations: int | None = None, out_dir=None, callback=None) -> list:
        cfg = self.config
        total = cfg.iterations if iterations is None else iterations
        for _ in range(total):
            self.step()
            it = len(self.losses)
            if it % cfg.log_window == 0:
                log.info("iteration %d  mean loss/ray %.6f", it, np.mean(self.losses[-cfg.log_window:]))
            if out_dir is not None and cfg.checkpoint_every and it % cfg.checkpoint_every == 0:
                self.save(Path(out_dir) / f"checkpoint_{it:06d}.bnrf")
            if callback is not None:
                callback(self, it)
        return self.losses

    def save(self, path) -> Path:
        return save_checkpoint(self.model, path, self.config.to_dict(), {"iterations": len(self.losses)})
