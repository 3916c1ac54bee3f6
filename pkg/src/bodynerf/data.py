"""Synthetic sequences of the procedural humanoid, their on-disk layout and frame selection."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .body import BodyTemplate, HumanoidConfig, Pose, generate_humanoid, load_template, posed_vertices, save_template
from .geometry import Camera, look_at, rasterize

SEQUENCE_FORMAT = "bodynerf-sequence"
SEQUENCE_VERSION = 1

MOTIONS = ("static", "wave", "turn", "walk")


@dataclass
class Frame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    pose: Pose
    camera: Camera
    time_index: int
    split: str = "train"


@dataclass
class Sequence:
    template: BodyTemplate
    frames: list
    name: str = "sequence"
    vertex_colors: np.ndarray | None = None

    def __post_init__(self):
        times = [f.time_index for f in self.frames]
        if any(b <= a for a, b in zip(times[:-1], times[1:])):
            raise ValueError("sequence: time indices must be strictly increasing")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def camera_ids(self) -> list:
        return sorted({f.camera.camera_id for f in self.frames})

    def indices(self, split: str) -> list:
        return [i for i, f in enumerate(self.frames) if f.split == split]


# ---------------------------------------------------------------------------
# motion scripts
# ---------------------------------------------------------------------------

def motion_pose(script: str, phase: float, n_joints: int = 12, time_index: int = 0,
                amplitude: float = 1.0) -> Pose:
    """Pose at ``phase`` in [0, 1) of a looping motion script."""
    if script not in MOTIONS:
        raise ValueError(f"unknown motion script {script!r}; expected one of {MOTIONS}")
    r = np.zeros((n_joints, 3))
    s = np.sin(2 * np.pi * phase)
    c = np.cos(2 * np.pi * phase)
    if script == "wave":
        r[4] = [0, 0, amplitude * (0.7 + 0.35 * s)]  # raise the left arm sideways
        r[5] = [0, 0, amplitude * (0.5 + 0.5 * c)]
        r[1] = [0, amplitude * 0.15 * s, 0]
    elif script == "turn":
        r[0] = [0, amplitude * 0.6 * s, 0]
        r[2] = [0, -amplitude * 0.3 * s, 0]
        r[4] = [0, 0, amplitude * 0.3]
        r[6] = [0, 0, -amplitude * 0.3]
    elif script == "walk":
        r[8] = [amplitude * 0.45 * s, 0, 0]
        r[10] = [-amplitude * 0.45 * s, 0, 0]
        r[9] = [amplitude * 0.35 * (1 + c), 0, 0]
        r[11] = [amplitude * 0.35 * (1 - c), 0, 0]
        r[4] = [-amplitude * 0.4 * s, 0, 0]
        r[6] = [amplitude * 0.4 * s, 0, 0]
        r[0] = [0, amplitude * 0.15 * s, 0]
    return Pose(r, np.zeros(3), time_index)


# ---------------------------------------------------------------------------
# appearance and rendering
# ---------------------------------------------------------------------------

# per-joint clothing region: 0 skin, 1 top, 2 bottom
_REGION = np.array([2, 1, 0, 0, 1, 0, 1, 0, 2, 2, 2, 2])


def vertex_colors(template: BodyTemplate, seed: int) -> np.ndarray:
    """Smooth per-vertex albedo: skin/top/bottom palette blended by skinning weights.

    The top gets a soft horizontal band so the texture is not purely piecewise constant.
    """
    rng = np.random.default_rng(seed)
    skin = np.array([0.85, 0.65, 0.5]) * rng.uniform(0.8, 1.1)
    top = rng.uniform(0.15, 0.95, 3)
    bottom = rng.uniform(0.1, 0.7, 3)
    palette = np.stack([skin, top, bottom])
    n = template.n_joints
    regions = _REGION[:n] if n <= len(_REGION) else np.resize(_REGION, n)
    region_w = np.zeros((len(template.vertices), 3))
    np.add.at(region_w.T, regions, template.blend_weights.T)
    colors = region_w @ palette
    y = template.vertices[:, 1]
    lo, hi = y.min(), y.max()
    band = 0.5 + 0.5 * np.cos(2 * np.pi * 3.0 * (y - lo) / (hi - lo))
    accent = rng.uniform(0.1, 0.9, 3)
    colors = colors + region_w[:, 1:2] * 0.35 * band[:, None] * (accent - colors)
    return np.clip(colors, 0.0, 1.0)


def render_mesh(vertices: np.ndarray, faces: np.ndarray, colors: np.ndarray, camera: Camera,
                supersample: int = 2) -> np.ndarray:
    """Barycentric-interpolated vertex colors over black, box-filtered from ``supersample``x."""
    cam = camera.scaled(supersample) if supersample != 1 else camera
    ras = rasterize(vertices, faces, cam)
    hit = ras.face >= 0
    img = np.zeros((cam.height, cam.width, 3))
    tri_colors = colors[faces[ras.face[hit]]]  # (P, 3 corners, 3 rgb)
    img[hit] = np.einsum("pk,pkc->pc", ras.bary[hit], tri_colors)
    s = supersample
    return img.reshape(camera.height, s, camera.width, s, 3).mean(axis=(1, 3))


def ring_cameras(n: int, distance: float = 2.6, height: float = 0.9, focal: float = 80.0, size: int = 64,
                 start_angle: float = 0.0) -> list:
    """``n`` cameras evenly spaced on a horizontal circle around the body, ids 0..n-1."""
    cams = []
    for i in range(n):
        a = start_angle + 2 * np.pi * i / n
        eye = np.array([distance * np.sin(a), height, distance * np.cos(a)])
        cams.append(look_at(eye, [0.0, height, 0.0], focal=focal, width=size, height=size, camera_id=i))
    return cams


def generate_sequence(template: BodyTemplate, motion: str, camera: Camera, n_frames: int, seed: int = 0,
                      supersample: int = 2, heldout: tuple = (), amplitude: float = 1.0,
                      colors: np.ndarray | None = None, name: str = "sequence") -> Sequence:
    """Render ``template`` performing ``motion`` from a fixed camera.

    Frames whose index is in ``heldout`` are tagged for evaluation only.
    """
    if colors is None:
        colors = vertex_colors(template, seed)
    frames = []
    for i in range(n_frames):
        pose = motion_pose(motion, i / n_frames, template.n_joints, i, amplitude)
        verts = posed_vertices(template, pose)
        img = render_mesh(verts, template.faces, colors, camera, supersample)
        frames.append(Frame(img, pose, camera, i, "heldout" if i in heldout else "train"))
    return Sequence(template, frames, name, colors)


def make_identity(seed: int, config: HumanoidConfig | None = None) -> tuple:
    """(template, vertex colors) of a distinct synthetic person."""
    template = generate_humanoid(seed, config)
    return template, vertex_colors(template, seed)


def generate_multiview(seed: int, motion: str, n_cameras: int, n_frames: int, size: int = 64,
                       supersample: int = 2, amplitude: float = 1.0) -> list:
    """One identity seen by ``n_cameras`` synchronized cameras -> a Sequence per camera."""
    template, colors = make_identity(seed)
    cams = ring_cameras(n_cameras, size=size, start_angle=0.3 * seed)
    return [generate_sequence(template, motion, cam, n_frames, seed, supersample, amplitude=amplitude,
                              colors=colors, name=f"id{seed}_cam{cam.camera_id}") for cam in cams]


# ---------------------------------------------------------------------------
# frame selection
# ---------------------------------------------------------------------------

def select_frames(sequence: Sequence, target: int, T: int, criterion: str = "evenly",
                  candidates=None, target_pose: Pose | None = None) -> list:
    """Pick T input frames for rendering frame ``target``.

    ``evenly`` spaces the picks over the candidates; ``vertex-distance`` takes
    the T candidates whose posed vertices, in each frame's camera space, are
    closest to the target's (summed Euclidean distance, ties by index).
    """
    cand = list(range(len(sequence))) if candidates is None else list(candidates)
    if len(cand) < T:
        raise ValueError(f"select_frames: need {T} frames, only {len(cand)} candidates")
    if T <= 0:
        raise ValueError("select_frames: T must be positive")
    if criterion == "evenly":
        pick = np.round(np.linspace(0, len(cand) - 1, T)).astype(int)
        return [cand[i] for i in pick]
    if criterion == "vertex-distance":
        tpl = sequence.template
        pose_g = target_pose if target_pose is not None else sequence.frames[target].pose
        v_g = posed_vertices(tpl, pose_g)
        cost = []
        for i in cand:
            f = sequence.frames[i]
            v_i = posed_vertices(tpl, f.pose)
            cost.append(np.linalg.norm(f.camera.to_camera(v_g) - f.camera.to_camera(v_i), axis=1).sum())
        order = np.argsort(np.array(cost), kind="stable")[:T]
        return sorted(cand[i] for i in order)
    raise ValueError(f"select_frames: unknown criterion {criterion!r}")


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

def save_png(image: np.ndarray, path) -> None:
    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def save_sequence(sequence: Sequence, directory) -> Path:
    """Numbered PNGs, the template and one JSON manifest."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_template(sequence.template, d / "template.json")
    records = []
    for i, f in enumerate(sequence.frames):
        name = f"{i:04d}.png"
        save_png(f.image, d / name)
        records.append({"image": name, "pose": f.pose.to_dict(), "camera": f.camera.to_dict(),
                        "time_index": f.time_index, "split": f.split})
    manifest = {"format": SEQUENCE_FORMAT, "version": SEQUENCE_VERSION, "name": sequence.name,
                "template": "template.json", "frames": records}
    if sequence.vertex_colors is not None:
        manifest["vertex_colors"] = sequence.vertex_colors.tolist()
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return d


def load_sequence(directory) -> Sequence:
    d = Path(directory)
    path = d / "manifest.json"
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: line {e.lineno} column {e.colno}: {e.msg}") from None
    if doc.get("format") != SEQUENCE_FORMAT:
        raise ValueError(f"{path}: not a {SEQUENCE_FORMAT} manifest")
    if doc.get("version") != SEQUENCE_VERSION:
        raise ValueError(f"{path}: unsupported version {doc.get('version')}")
    template = load_template(d / doc["template"])
    frames = []
    for k, r in enumerate(doc["frames"]):
        try:
            frames.append(Frame(load_png(d / r["image"]), Pose.from_dict(r["pose"]), Camera.from_dict(r["camera"]),
                                int(r["time_index"]), r.get("split", "train")))
        except KeyError as e:
            raise ValueError(f"{path}: frame {k} missing field {e.args[0]!r}") from None
    colors = np.array(doc["vertex_colors"]) if "vertex_colors" in doc else None
    return Sequence(template, frames, doc.get("name", d.name), colors)
