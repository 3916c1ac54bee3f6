"""Articulated body model: rest template, kinematic tree, skinning weights and LBS."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TEMPLATE_FORMAT = "bodynerf-template"
TEMPLATE_VERSION = 1


class TemplateError(ValueError):
    """Invalid template contents or malformed template file."""


@dataclass(frozen=True, eq=False)
class BodyTemplate:
    vertices: np.ndarray  # (V, 3) rest positions, meters
    faces: np.ndarray  # (F, 3) int
    joints: np.ndarray  # (N, 3) rest joint positions
    parents: np.ndarray  # (N,) parent index, -1 for the root
    blend_weights: np.ndarray  # (V, N) row-stochastic
    joint_names: tuple = ()

    def __post_init__(self):
        for name in ("vertices", "joints", "blend_weights"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for name in ("faces", "parents"):
            arr = np.array(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        validate_template(self)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BodyTemplate):
            return NotImplemented
        return (
            all(np.array_equal(getattr(self, k), getattr(other, k))
                for k in ("vertices", "faces", "joints", "parents", "blend_weights"))
            and tuple(self.joint_names) == tuple(other.joint_names)
        )


def validate_template(t: BodyTemplate) -> None:
    V, N = len(t.vertices), len(t.joints)
    if t.vertices.ndim != 2 or t.vertices.shape[1] != 3:
        raise TemplateError(f"vertices: expected (V, 3), got {t.vertices.shape}")
    if t.joints.ndim != 2 or t.joints.shape[1] != 3:
        raise TemplateError(f"joints: expected (N, 3), got {t.joints.shape}")
    if t.faces.ndim != 2 or t.faces.shape[1] != 3:
        raise TemplateError(f"faces: expected (F, 3), got {t.faces.shape}")
    if t.faces.size and (t.faces.min() < 0 or t.faces.max() >= V):
        bad = int(np.argmax((t.faces < 0).any(1) | (t.faces >= V).any(1)))
        raise TemplateError(f"faces: row {bad} references a vertex outside [0, {V})")
    if t.parents.shape != (N,):
        raise TemplateError(f"parents: expected {N} entries, got {t.parents.shape}")
    if t.blend_weights.shape != (V, N):
        raise TemplateError(f"blend_weights: expected ({V}, {N}), got {t.blend_weights.shape}")
    for name in ("vertices", "joints", "blend_weights"):
        if not np.isfinite(getattr(t, name)).all():
            raise TemplateError(f"{name}: non-finite entries")
    neg = np.nonzero((t.blend_weights < 0).any(1))[0]
    if len(neg):
        raise TemplateError(f"blend_weights: row {neg[0]} has negative entries")
    off = np.nonzero(np.abs(t.blend_weights.sum(1) - 1.0) > 1e-9)[0]
    if len(off):
        raise TemplateError(f"blend_weights: row {off[0]} sums to {t.blend_weights[off[0]].sum():.12g}, not 1")
    kinematic_order(t.parents)
    if t.joint_names and len(t.joint_names) != N:
        raise TemplateError(f"joint_names: expected {N} names, got {len(t.joint_names)}")


def kinematic_order(parents: np.ndarray) -> list[int]:
    """Joints ordered so every parent precedes its children; rejects cycles and forests."""
    parents = np.asarray(parents)
    N = len(parents)
    if N == 0:
        raise TemplateError("parents: skeleton has no joints")
    if parents[0] != -1:
        raise TemplateError("parents: joint 0 must be the root (parent -1)")
    roots = np.nonzero(parents == -1)[0]
    if len(roots) != 1:
        raise TemplateError(f"parents: expected a single root, found joints {roots.tolist()}")
    if ((parents < -1) | (parents >= N)).any():
        raise TemplateError("parents: index out of range")
    children: dict[int, list[int]] = {i: [] for i in range(N)}
    for j in range(1, N):
        children[int(parents[j])].append(j)
    order, stack = [], [0]
    while stack:
        j = stack.pop()
        order.append(j)
        stack.extend(reversed(children[j]))
    if len(order) != N:
        missing = sorted(set(range(N)) - set(order))
        raise TemplateError(f"parents: joints {missing} are part of a cycle or unreachable from root")
    return order


# ---------------------------------------------------------------------------
# poses and kinematics
# ---------------------------------------------------------------------------

def normalize_axis_angle(aa: np.ndarray) -> np.ndarray:
    """Wrap rotation vectors so that |aa| < 2*pi (same rotation)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    wrapped = np.mod(theta, 2 * np.pi)
    scale = np.divide(wrapped, theta, out=np.ones_like(theta), where=theta > 0)
    return aa * scale


@dataclass
class Pose:
    joint_rotations: np.ndarray  # (N, 3) axis-angle
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    time_index: int = 0

    def __post_init__(self):
        rot = np.array(self.joint_rotations, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(rot).all():
            raise ValueError("pose: non-finite joint rotation")
        self.joint_rotations = normalize_axis_angle(rot)
        self.root_translation = np.array(self.root_translation, dtype=np.float64).reshape(3)

    @classmethod
    def zero(cls, n_joints: int, time_index: int = 0) -> "Pose":
        return cls(np.zeros((n_joints, 3)), np.zeros(3), time_index)

    def flat(self) -> np.ndarray:
        return self.joint_rotations.reshape(-1)

    def to_dict(self) -> dict:
        return {
            "joint_rotations": self.joint_rotations.tolist(),
            "root_translation": self.root_translation.tolist(),
            "time_index": int(self.time_index),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Pose":
        return cls(np.array(d["joint_rotations"]), np.array(d["root_translation"]), int(d["time_index"]))


def rodrigues(aa: np.ndarray) -> np.ndarray:
    """Axis-angle (..., 3) -> rotation matrices (..., 3, 3)."""
    aa = np.asarray(aa, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1)[..., None, None]
    k = np.zeros(aa.shape[:-1] + (3, 3))
    k[..., 0, 1], k[..., 0, 2] = -aa[..., 2], aa[..., 1]
    k[..., 1, 0], k[..., 1, 2] = aa[..., 2], -aa[..., 0]
    k[..., 2, 0], k[..., 2, 1] = -aa[..., 1], aa[..., 0]
    small = theta < 1e-12
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0, np.sin(safe) / safe)
    b = np.where(small, 0.5, (1 - np.cos(safe)) / safe ** 2)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a * k + b * (k @ k)


def forward_kinematics(template: BodyTemplate, pose: Pose) -> np.ndarray:
    """Per-part rigid transforms (N, 4, 4) mapping rest space to posed space."""
    N = template.n_joints
    if pose.joint_rotations.shape != (N, 3):
        raise ValueError(f"forward_kinematics: pose has {len(pose.joint_rotations)} rotations, template has {N} joints")
    R = rodrigues(pose.joint_rotations)
    J = template.joints
    G = np.zeros((N, 4, 4))
    for j in kinematic_order(template.parents):
        local = np.eye(4)
        local[:3, :3] = R[j]
        p = template.parents[j]
        if p < 0:
            local[:3, 3] = J[j] + pose.root_translation
            G[j] = local
        else:
            local[:3, 3] = J[j] - J[p]
            G[j] = G[p] @ local
    # remove the rest joint location so transforms act on rest-space points
    T = G.copy()
    T[:, :3, 3] = G[:, :3, 3] - np.einsum("nij,nj->ni", G[:, :3, :3], J)
    return T


def invert_rigid(T: np.ndarray) -> np.ndarray:
    R = T[..., :3, :3]
    Rt = np.swapaxes(R, -1, -2)
    out = np.zeros_like(T)
    out[..., :3, :3] = Rt
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", Rt, T[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out


def pose_mesh(template: BodyTemplate, transforms: np.ndarray) -> np.ndarray:
    """LBS: v' = (sum_j w_j T_j) v for every vertex."""
    return blend_apply(template.blend_weights, transforms, template.vertices)


def blend_apply(weights: np.ndarray, transforms: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply per-point blended transforms sum_j w_pj T_j to points (P, 3)."""
    A = np.einsum("pn,nij->pij", weights, transforms[:, :3, :])
    return np.einsum("pij,pj->pi", A[:, :, :3], points) + A[:, :, 3]


def posed_vertices(template: BodyTemplate, pose: Pose) -> np.ndarray:
    return pose_mesh(template, forward_kinematics(template, pose))


# ---------------------------------------------------------------------------
# procedural humanoid
# ---------------------------------------------------------------------------

@dataclass
class HumanoidConfig:
    height: float = 1.7
    shoulder_width: float = 0.36
    hip_width: float = 0.18
    upper_arm: float = 0.28
    forearm: float = 0.26
    thigh: float = 0.42
    shin: float = 0.42
    torso_radius: float = 0.12
    limb_radius: float = 0.05
    head_radius: float = 0.1
    arm_droop: float = 0.9  # rest-pose arm angle below horizontal, radians
    segments: int = 10  # vertices around each capsule ring
    rings: int = 4  # rings per hemisphere cap
    body_rings: int = 4  # rings along each capsule's cylinder
    jitter: float = 0.08  # relative per-seed variation of proportions


JOINT_NAMES = (
    "pelvis", "spine", "neck", "head",
    "l_shoulder", "l_elbow", "r_shoulder", "r_elbow",
    "l_hip", "l_knee", "r_hip", "r_knee",
)
PARENTS = (-1, 0, 1, 2, 1, 4, 1, 6, 0, 8, 0, 10)


def capsule_mesh(a: np.ndarray, b: np.ndarray, radius: float, segments: int, rings: int,
                 body_rings: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed triangle mesh of a capsule around segment a-b."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    axis = b - a
    length = np.linalg.norm(axis)
    if length <= 0 or radius <= 0:
        raise ValueError("capsule: degenerate segment or radius")
    z = axis / length
    helper = np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    # (height along axis, ring radius) profile from bottom pole to top pole, poles excluded
    prof = []
    for i in range(1, rings + 1):
        phi = -np.pi / 2 + np.pi / 2 * i / rings
        prof.append((radius * np.sin(phi), radius * np.cos(phi)))
    for i in range(1, body_rings):
        prof.append((length * i / body_rings, radius))
    for i in range(0, rings):
        phi = np.pi / 2 * i / rings
        prof.append((length + radius * np.sin(phi), radius * np.cos(phi)))
    ang = 2 * np.pi * np.arange(segments) / segments
    ring_dirs = np.cos(ang)[:, None] * x + np.sin(ang)[:, None] * y
    verts = [a - radius * z]
    for h, r in prof:
        verts.extend(a + h * z + r * ring_dirs)
    verts.append(b + radius * z)
    verts = np.array(verts)
    n_rings = len(prof)
    top = len(verts) - 1
    faces = []
    for s in range(segments):
        s1 = (s + 1) % segments
        faces.append((0, 1 + s1, 1 + s))
    for r in range(n_rings - 1):
        base0, base1 = 1 + r * segments, 1 + (r + 1) * segments
        for s in range(segments):
            s1 = (s + 1) % segments
            faces.append((base0 + s, base0 + s1, base1 + s1))
            faces.append((base0 + s, base1 + s1, base1 + s))
    last = 1 + (n_rings - 1) * segments
    for s in range(segments):
        s1 = (s + 1) % segments
        faces.append((top, last + s, last + s1))
    return verts, np.array(faces, dtype=np.int64)


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def generate_humanoid(seed: int = 0, config: HumanoidConfig | None = None) -> BodyTemplate:
    """Low-poly capsule humanoid with 12 joints and smooth skinning weights.

    Proportions are jittered deterministically by ``seed``.  Blend weights use
    a Gaussian falloff in the distance to each bone with tau = 0.5 * radius.
    """
    cfg = config or HumanoidConfig()
    lengths = [cfg.height, cfg.shoulder_width, cfg.hip_width, cfg.upper_arm, cfg.forearm, cfg.thigh,
               cfg.shin, cfg.torso_radius, cfg.limb_radius, cfg.head_radius]
    if min(lengths) <= 0 or cfg.segments < 3 or cfg.rings < 1 or cfg.body_rings < 1:
        raise ValueError("generate_humanoid: limb lengths, radii and resolution must be positive")
    rng = np.random.default_rng(seed)

    def jit(v):
        return v * (1.0 + cfg.jitter * rng.uniform(-1, 1))

    h = cfg.height / 1.7
    shin, thigh = jit(cfg.shin) * h, jit(cfg.thigh) * h
    pelvis_y = shin + thigh + 0.08 * h
    spine_y = pelvis_y + 0.2 * h
    neck_y = spine_y + jit(0.3) * h
    head_y = neck_y + 0.08 * h
    sw, hw = jit(cfg.shoulder_width) / 2 * h, jit(cfg.hip_width) / 2 * h
    ua, fa = jit(cfg.upper_arm) * h, jit(cfg.forearm) * h
    tr, lr, hr = jit(cfg.torso_radius) * h, jit(cfg.limb_radius) * h, jit(cfg.head_radius) * h
    droop = cfg.arm_droop
    arm_dir_l = np.array([np.cos(droop), -np.sin(droop), 0.0])
    arm_dir_r = arm_dir_l * np.array([-1.0, 1.0, 1.0])
    sh_y = neck_y - 0.04 * h
    J = np.array([
        [0, pelvis_y, 0], [0, spine_y, 0], [0, neck_y, 0], [0, head_y, 0],
        [sw, sh_y, 0], [sw + ua * arm_dir_l[0], sh_y + ua * arm_dir_l[1], 0],
        [-sw, sh_y, 0], [-sw + ua * arm_dir_r[0], sh_y + ua * arm_dir_r[1], 0],
        [hw, pelvis_y - 0.06 * h, 0], [hw, pelvis_y - 0.06 * h - thigh, 0],
        [-hw, pelvis_y - 0.06 * h, 0], [-hw, pelvis_y - 0.06 * h - thigh, 0],
    ], dtype=np.float64)
    # (owner joint, start, end, radius)
    caps = [
        (0, J[10] + [0, 0.02 * h, 0], J[8] + [0, 0.02 * h, 0], tr * 0.85),
        (0, J[0], J[1], tr * 0.9),
        (1, J[1], J[2] - [0, 0.04 * h, 0], tr),
        (1, J[6], J[4], lr * 1.1),
        (2, J[2] - [0, 0.02 * h, 0], J[3], lr * 0.8),
        (3, J[3] + [0, hr, 0], J[3] + [0, hr + 0.06 * h, 0], hr),
        (4, J[4], J[5], lr),
        (5, J[5], J[5] + fa * arm_dir_l, lr * 0.85),
        (6, J[6], J[7], lr),
        (7, J[7], J[7] + fa * arm_dir_r, lr * 0.85),
        (8, J[8], J[9], lr * 1.4),
        (9, J[9], J[9] - [0, shin, 0], lr * 1.1),
        (10, J[10], J[11], lr * 1.4),
        (11, J[11], J[11] - [0, shin, 0], lr * 1.1),
    ]
    verts, faces = [], []
    offset = 0
    for _, a, b, r in caps:
        v, f = capsule_mesh(a, b, r, cfg.segments, cfg.rings, cfg.body_rings)
        verts.append(v)
        faces.append(f + offset)
        offset += len(v)
    V = np.concatenate(verts)
    F = np.concatenate(faces)
    N = len(J)
    # squared distance to each joint's bones, in units of tau_j^2
    logw = np.full((len(V), N), -np.inf)
    for owner, a, b, r in caps:
        tau = 0.5 * r
        d = point_segment_distance(V, np.asarray(a, float), np.asarray(b, float))
        logw[:, owner] = np.maximum(logw[:, owner], -d ** 2 / (2 * tau ** 2))
    logw -= logw.max(axis=1, keepdims=True)
    W = np.exp(logw)
    W /= W.sum(axis=1, keepdims=True)
    return BodyTemplate(V, F, J, np.array(PARENTS), W, JOINT_NAMES)


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def save_template(template: BodyTemplate, path) -> None:
    doc = {
        "format": TEMPLATE_FORMAT,
        "version": TEMPLATE_VERSION,
        "joint_names": list(template.joint_names),
        "parents": template.parents.tolist(),
        "joints": template.joints.tolist(),
        "vertices": template.vertices.tolist(),
        "faces": template.faces.tolist(),
        "blend_weights": template.blend_weights.tolist(),
    }
    Path(path).write_text(json.dumps(doc, indent=1))


def _field(doc: dict, key: str, path) -> object:
    if key not in doc:
        raise TemplateError(f"{path}: missing field '{key}'")
    return doc[key]


def load_template(path) -> BodyTemplate:
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise TemplateError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != TEMPLATE_FORMAT:
        raise TemplateError(f"{path}: not a {TEMPLATE_FORMAT} document")
    if doc.get("version") != TEMPLATE_VERSION:
        raise TemplateError(f"{path}: unsupported version {doc.get('version')!r}")
    arrays = {}
    for key, dtype in (("vertices", float), ("faces", np.int64), ("joints", float),
                       ("parents", np.int64), ("blend_weights", float)):
        try:
            arrays[key] = np.array(_field(doc, key, path), dtype=dtype)
        except (TypeError, ValueError) as e:
            raise TemplateError(f"{path}: field '{key}': {e}") from None
    try:
        return BodyTemplate(joint_names=tuple(doc.get("joint_names", ())), **arrays)
    except TemplateError as e:
        raise TemplateError(f"{path}: {e}") from None
