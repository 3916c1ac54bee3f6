"""Cameras, z-buffer rasterization, distance grids, rays and surface-guided sampling.

Pixel convention: pixel (col, row) has its center at image coordinate
(u, v) = (col, row); the image spans [-0.5, W - 0.5] x [-0.5, H - 0.5].
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import numba
import scipy.sparse as sp
from scipy.spatial import cKDTree

NEAR = 1e-6


@dataclass(frozen=True, eq=False)
class Camera:
    K: np.ndarray  # 3x3 intrinsics
    R: np.ndarray  # 3x3 world -> camera rotation
    t: np.ndarray  # 3 translation
    width: int
    height: int
    camera_id: int = 0

    def __post_init__(self):
        for name in ("K", "R", "t"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=np.float64))
        if self.K.shape != (3, 3) or self.R.shape != (3, 3) or self.t.shape != (3,):
            raise ValueError("camera: K and R must be 3x3, t a 3-vector")
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(self.R) - 1) > 1e-9:
            raise ValueError("camera: rotation is not orthonormal with det +1")
        if self.K[0, 0] <= 0 or self.K[1, 1] <= 0:
            raise ValueError("camera: focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        return -self.R.T @ self.t

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.R.T + self.t

    def project(self, points: np.ndarray):
        """Pinhole projection -> (uv (P, 2), depth (P,), ok (P,)); ok is False at/behind the camera plane."""
        pc = self.to_camera(np.asarray(points, dtype=np.float64).reshape(-1, 3))
        z = pc[:, 2]
        ok = z > NEAR
        zs = np.where(ok, z, 1.0)
        u = self.K[0, 0] * pc[:, 0] / zs + self.K[0, 1] * pc[:, 1] / zs + self.K[0, 2]
        v = self.K[1, 1] * pc[:, 1] / zs + self.K[1, 2]
        return np.stack([u, v], axis=1), z, ok

    def in_image(self, uv: np.ndarray) -> np.ndarray:
        return ((uv[:, 0] >= -0.5) & (uv[:, 0] <= self.width - 0.5)
                & (uv[:, 1] >= -0.5) & (uv[:, 1] <= self.height - 0.5))

    def scaled(self, s: float) -> "Camera":
        """Same camera at s-times the image resolution (pixel centers preserved)."""
        K = self.K.copy()
        K[0, 0] *= s
        K[1, 1] *= s
        K[0, 1] *= s
        K[0, 2] = (K[0, 2] + 0.5) * s - 0.5
        K[1, 2] = (K[1, 2] + 0.5) * s - 0.5
        return Camera(K, self.R, self.t, int(round(self.width * s)), int(round(self.height * s)), self.camera_id)

    def to_dict(self) -> dict:
        return {"K": self.K.tolist(), "R": self.R.tolist(), "t": self.t.tolist(),
                "width": self.width, "height": self.height, "camera_id": self.camera_id}

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(np.array(d["K"]), np.array(d["R"]), np.array(d["t"]),
                   int(d["width"]), int(d["height"]), int(d.get("camera_id", 0)))


def look_at(eye, target, up=(0.0, 1.0, 0.0), focal: float = 80.0, width: int = 64, height: int = 64,
            camera_id: int = 0) -> Camera:
    """Camera at ``eye`` looking at ``target``; image y points down, camera z forward."""
    eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    K = np.array([[focal, 0, (width - 1) / 2], [0, focal, (height - 1) / 2], [0, 0, 1]])
    return Camera(K, R, -R @ eye, width, height, camera_id)


def save_cameras(cameras: list[Camera], path) -> None:
    Path(path).write_text(json.dumps({"version": 1, "cameras": [c.to_dict() for c in cameras]}, indent=1))


def load_cameras(path) -> list[Camera]:
    doc = json.loads(Path(path).read_text())
    return [Camera.from_dict(d) for d in doc["cameras"]]


# ---------------------------------------------------------------------------
# rasterization
# ---------------------------------------------------------------------------

@dataclass
class Raster:
    depth: np.ndarray  # (H, W), inf where empty
    face: np.ndarray  # (H, W), -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics


def rasterize(vertices: np.ndarray, faces: np.ndarray, camera: Camera) -> Raster:
    """Z-buffer rasterization of a triangle mesh, sampling at pixel centers."""
    W, H = camera.width, camera.height
    uv, z, ok = camera.project(vertices)
    tri_ok = ok[faces].all(1)
    f_idx = np.nonzero(tri_ok)[0]
    tri_uv = uv[faces[f_idx]]  # (F, 3, 2)
    tri_z = z[faces[f_idx]]
    e1 = tri_uv[:, 1] - tri_uv[:, 0]
    e2 = tri_uv[:, 2] - tri_uv[:, 0]
    area = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    keep = np.abs(area) > 1e-12
    f_idx, tri_uv, tri_z, area = f_idx[keep], tri_uv[keep], tri_z[keep], area[keep]
    x0 = np.clip(np.ceil(tri_uv[..., 0].min(1)), 0, W).astype(np.int64)
    x1 = np.clip(np.floor(tri_uv[..., 0].max(1)), -1, W - 1).astype(np.int64)
    y0 = np.clip(np.ceil(tri_uv[..., 1].min(1)), 0, H).astype(np.int64)
    y1 = np.clip(np.floor(tri_uv[..., 1].max(1)), -1, H - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    counts = bw * bh
    depth = np.full((H, W), np.inf)
    face = np.full((H, W), -1, dtype=np.int64)
    bary = np.zeros((H, W, 3))
    total = int(counts.sum())
    if total == 0:
        return Raster(depth, face, bary)
    tri = np.repeat(np.arange(len(f_idx)), counts)
    start = np.repeat(np.cumsum(counts) - counts, counts)
    k = np.arange(total) - start
    px = x0[tri] + k % bw[tri]
    py = y0[tri] + k // bw[tri]
    a, b, c = tri_uv[tri, 0], tri_uv[tri, 1], tri_uv[tri, 2]
    inv = 1.0 / area[tri]
    l1 = ((px - a[:, 0]) * (c[:, 1] - a[:, 1]) - (py - a[:, 1]) * (c[:, 0] - a[:, 0])) * inv
    l2 = ((b[:, 0] - a[:, 0]) * (py - a[:, 1]) - (b[:, 1] - a[:, 1]) * (px - a[:, 0])) * inv
    l0 = 1.0 - l1 - l2
    eps = -1e-9
    inside = (l0 >= eps) & (l1 >= eps) & (l2 >= eps)
    tri, px, py = tri[inside], px[inside], py[inside]
    lam = np.stack([l0[inside], l1[inside], l2[inside]], axis=1)
    invz = lam / tri_z[tri]
    zz = 1.0 / invz.sum(1)
    pix = py * W + px
    order = np.lexsort((zz, pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]
    depth.reshape(-1)[pix[win]] = zz[win]
    face.reshape(-1)[pix[win]] = f_idx[tri[win]]
    bary.reshape(-1, 3)[pix[win]] = invz[win] * zz[win, None]
    return Raster(depth, face, bary)


def scene_scale(vertices: np.ndarray) -> float:
    return float(np.linalg.norm(vertices.max(0) - vertices.min(0)))


def vertex_adjacency(faces: np.ndarray, n_vertices: int) -> sp.csr_matrix:
    """Boolean (V, V) matrix: True on the diagonal and between edge-connected vertices."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(n_vertices)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(n_vertices)])
    return sp.csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(n_vertices, n_vertices))


def front_facing_vertices(vertices: np.ndarray, faces: np.ndarray, camera: Camera) -> np.ndarray:
    """True where at least one incident face points toward the camera center."""
    tri = vertices[faces]
    n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    facing = np.einsum("fk,fk->f", n, camera.center - tri[:, 0]) > 0
    out = np.zeros(len(vertices), dtype=bool)
    for k in range(3):
        np.logical_or.at(out, faces[:, k], facing)
    return out


def rasterize_visibility(vertices: np.ndarray, faces: np.ndarray, camera: Camera,
                         resolution_scale: float = 8.0, bias: float | None = None) -> np.ndarray:
    """Per-vertex visibility from a z-buffer rendered at ``resolution_scale`` x the image size.

    A vertex is visible iff it projects inside the image in front of the
    camera, at least one of its faces points toward the camera, and either its
    depth is within ``bias`` of the z-buffer at its pixel or the front-most
    face there touches its one-ring.  The one-ring test rescues vertices on
    steep slopes, where the local surface's depth at the pixel center can sit
    well off the vertex's own depth.  Faces must be wound counter-clockwise
    seen from outside, as on every closed mesh built here.
    """
    cam = camera.scaled(resolution_scale) if resolution_scale != 1 else camera
    if bias is None:
        bias = 1e-3 * scene_scale(vertices)
    ras = rasterize(vertices, faces, cam)
    uv, z, ok = cam.project(vertices)
    inside = ok & cam.in_image(uv)
    col = np.clip(np.rint(uv[:, 0]).astype(np.int64), 0, cam.width - 1)
    row = np.clip(np.rint(uv[:, 1]).astype(np.int64), 0, cam.height - 1)
    zbuf = ras.depth[row, col]
    front = ras.face[row, col]
    local = np.zeros(len(vertices), dtype=bool)
    hit = np.nonzero(front >= 0)[0]
    if len(hit):
        adj = vertex_adjacency(faces, len(vertices))
        corners = faces[front[hit]]
        local[hit] = np.asarray(adj[np.repeat(hit, 3), corners.ravel()]).reshape(-1, 3).any(1)
    return inside & front_facing_vertices(vertices, faces, camera) & ((z <= zbuf + bias) | local)


def raycast_visibility(vertices: np.ndarray, faces: np.ndarray, camera: Camera, eps: float = 1e-9) -> np.ndarray:
    """Brute-force visibility: segment camera->vertex against every non-incident face."""
    uv, z, ok = camera.project(vertices)
    inside = ok & camera.in_image(uv)
    o = camera.center
    tri = vertices[faces]
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    vis = np.zeros(len(vertices), dtype=bool)
    idx = np.nonzero(inside)[0]
    for chunk in np.array_split(idx, max(1, len(idx) // 256)):
        if len(chunk) == 0:
            continue
        d = vertices[chunk] - o  # segment direction, t in (0, 1)
        pvec = np.cross(d[:, None, :], e2[None])
        det = np.einsum("fk,pfk->pf", e1, pvec)
        safe = np.where(np.abs(det) < 1e-15, 1.0, det)
        tvec = o - tri[:, 0]
        uu = np.einsum("fk,pfk->pf", tvec, pvec) / safe
        qvec = np.cross(tvec, e1)
        vv = np.einsum("pk,fk->pf", d, qvec) / safe
        tt = np.einsum("fk,fk->f", e2, qvec)[None, :] / safe
        hit = (np.abs(det) >= 1e-15) & (uu >= 0) & (vv >= 0) & (uu + vv <= 1) & (tt > eps) & (tt < 1 - 1e-6)
        incident = (faces[None, :, :] == chunk[:, None, None]).any(-1)
        vis[chunk] = ~(hit & ~incident).any(1)
    return vis


# ---------------------------------------------------------------------------
# exact point-to-mesh distance and the precomputed grid
# ---------------------------------------------------------------------------

def point_triangle_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Distance from points to triangles, elementwise over broadcast leading dims."""
    ab, ac, ap = b - a, c - a, p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)
    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)
    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)
    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    denom = np.where(np.abs(denom) < 1e-300, 1e-300, denom)
    v = vb / denom
    w = vc / denom
    closest = a + ab * v[..., None] + ac * w[..., None]  # interior
    with np.errstate(divide="ignore", invalid="ignore"):
        # edge bc
        t_bc = np.clip((d4 - d3) / ((d4 - d3) + (d5 - d6)), 0, 1)
        t_ab = np.clip(d1 / (d1 - d3), 0, 1)
        t_ac = np.clip(d2 / (d2 - d6), 0, 1)
    cond_bc = (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0)
    closest = np.where(cond_bc[..., None], b + (c - b) * np.nan_to_num(t_bc)[..., None], closest)
    cond_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(cond_ac[..., None], a + ac * np.nan_to_num(t_ac)[..., None], closest)
    cond_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(cond_ab[..., None], a + ab * np.nan_to_num(t_ab)[..., None], closest)
    cond_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(cond_c[..., None], c, closest)
    cond_b = (d3 >= 0) & (d4 <= d3)
    closest = np.where(cond_b[..., None], b, closest)
    cond_a = (d1 <= 0) & (d2 <= 0)
    closest = np.where(cond_a[..., None], a, closest)
    return np.linalg.norm(p - closest, axis=-1)


def mesh_distance_bruteforce(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Exhaustive min over all triangles (the oracle path)."""
    tri = vertices[faces]
    out = np.empty(len(points))
    for s in range(0, len(points), 64):
        p = points[s:s + 64, None, :]
        out[s:s + 64] = point_triangle_distance(p, tri[None, :, 0], tri[None, :, 1], tri[None, :, 2]).min(1)
    return out


@numba.njit(cache=True)
def _pt_tri(px, py, pz, t):
    ax, ay, az = t[0, 0], t[0, 1], t[0, 2]
    abx, aby, abz = t[1, 0] - ax, t[1, 1] - ay, t[1, 2] - az
    acx, acy, acz = t[2, 0] - ax, t[2, 1] - ay, t[2, 2] - az
    apx, apy, apz = px - ax, py - ay, pz - az
    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return np.sqrt(apx * apx + apy * apy + apz * apz)
    bpx, bpy, bpz = px - t[1, 0], py - t[1, 1], pz - t[1, 2]
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return np.sqrt(bpx * bpx + bpy * bpy + bpz * bpz)
    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        s = d1 / (d1 - d3)
        qx, qy, qz = ax + s * abx, ay + s * aby, az + s * abz
        return np.sqrt((px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2)
    cpx, cpy, cpz = px - t[2, 0], py - t[2, 1], pz - t[2, 2]
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return np.sqrt(cpx * cpx + cpy * cpy + cpz * cpz)
    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        s = d2 / (d2 - d6)
        qx, qy, qz = ax + s * acx, ay + s * acy, az + s * acz
        return np.sqrt((px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2)
    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        s = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        qx = t[1, 0] + s * (t[2, 0] - t[1, 0])
        qy = t[1, 1] + s * (t[2, 1] - t[1, 1])
        qz = t[1, 2] + s * (t[2, 2] - t[1, 2])
        return np.sqrt((px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2)
    den = 1.0 / (va + vb + vc)
    v = vb * den
    w = vc * den
    qx, qy, qz = ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w
    return np.sqrt((px - qx) ** 2 + (py - qy) ** 2 + (pz - qz) ** 2)


@numba.njit(cache=True)
def _min_mesh_distance(points, tri, cen, rad, upper):
    out = np.empty(points.shape[0])
    for i in range(points.shape[0]):
        px, py, pz = points[i, 0], points[i, 1], points[i, 2]
        best = upper[i]
        for f in range(tri.shape[0]):
            dx, dy, dz = px - cen[f, 0], py - cen[f, 1], pz - cen[f, 2]
            lb = np.sqrt(dx * dx + dy * dy + dz * dz) - rad[f]
            if lb >= best:
                continue
            d = _pt_tri(px, py, pz, tri[f])
            if d < best:
                best = d
        out[i] = best
    return out


@numba.njit(cache=True)
def _grid_distance(origin, vs, dims, tri, cen, rad, upper, block):
    out = np.empty(dims[0] * dims[1] * dims[2])
    nb = (dims + block - 1) // block
    cand = np.empty(tri.shape[0], dtype=np.int64)
    half = 0.5 * vs * (block - 1)
    r_block = np.sqrt(3.0) * half
    for bx in range(nb[0]):
        for by in range(nb[1]):
            for bz in range(nb[2]):
                x0, y0, z0 = bx * block, by * block, bz * block
                x1 = min(x0 + block, dims[0])
                y1 = min(y0 + block, dims[1])
                z1 = min(z0 + block, dims[2])
                ub = 0.0
                for i in range(x0, x1):
                    for j in range(y0, y1):
                        for k in range(z0, z1):
                            u = upper[(i * dims[1] + j) * dims[2] + k]
                            if u > ub:
                                ub = u
                cx = origin[0] + vs * x0 + half
                cy = origin[1] + vs * y0 + half
                cz = origin[2] + vs * z0 + half
                n = 0
                for f in range(tri.shape[0]):
                    dx, dy, dz = cx - cen[f, 0], cy - cen[f, 1], cz - cen[f, 2]
                    if np.sqrt(dx * dx + dy * dy + dz * dz) - rad[f] - r_block < ub:
                        cand[n] = f
                        n += 1
                for i in range(x0, x1):
                    for j in range(y0, y1):
                        for k in range(z0, z1):
                            flat = (i * dims[1] + j) * dims[2] + k
                            px = origin[0] + vs * i
                            py = origin[1] + vs * j
                            pz = origin[2] + vs * k
                            best = upper[flat]
                            for c in range(n):
                                f = cand[c]
                                dx, dy, dz = px - cen[f, 0], py - cen[f, 1], pz - cen[f, 2]
                                if np.sqrt(dx * dx + dy * dy + dz * dz) - rad[f] >= best:
                                    continue
                                d = _pt_tri(px, py, pz, tri[f])
                                if d < best:
                                    best = d
                            out[flat] = best
    return out


def _triangle_bounds(vertices, faces):
    tri = np.ascontiguousarray(vertices[faces], dtype=np.float64)
    cen = tri.mean(1)
    rad = np.linalg.norm(tri - cen[:, None], axis=-1).max(1)
    return tri, cen, rad


def mesh_distance(points: np.ndarray, vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Exact unsigned point-to-mesh distance.

    Every triangle is visited; those whose bounding sphere lies beyond the
    running minimum (seeded with the nearest-vertex distance) are skipped.
    """
    points = np.ascontiguousarray(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    if len(faces) == 0:
        raise ValueError("mesh_distance: empty mesh")
    tri, cen, rad = _triangle_bounds(vertices, faces)
    used = np.unique(faces)
    upper, _ = cKDTree(vertices[used]).query(points)
    return _min_mesh_distance(points, tri, cen, rad, np.asarray(upper, dtype=np.float64))


@dataclass(frozen=True, eq=False)
class DistanceGrid:
    origin: np.ndarray  # world position of voxel (0, 0, 0)'s center
    voxel_size: float
    values: np.ndarray  # (D0, D1, D2) unsigned distance at voxel centers, axes = (x, y, z)

    @property
    def dims(self) -> tuple:
        return self.values.shape

    @property
    def lo(self) -> np.ndarray:
        return self.origin

    @property
    def hi(self) -> np.ndarray:
        return self.origin + (np.array(self.dims) - 1) * self.voxel_size

    def centers(self) -> np.ndarray:
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij"), -1)
        return self.origin + idx.reshape(-1, 3) * self.voxel_size


def grid_bbox(vertices: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    return vertices.min(0) - margin, vertices.max(0) + margin


def build_distance_grid(vertices: np.ndarray, faces: np.ndarray, bbox, voxel_size: float) -> DistanceGrid:
    """Exact point-to-mesh distance at every voxel center spanning ``bbox``."""
    if len(faces) == 0 or len(vertices) == 0:
        raise ValueError("build_distance_grid: empty mesh")
    lo, hi = (np.asarray(b, dtype=np.float64) for b in bbox)
    dims = np.ceil((hi - lo) / voxel_size).astype(np.int64) + 1
    grid = DistanceGrid(lo, float(voxel_size), np.zeros(tuple(dims)))
    tri, cen, rad = _triangle_bounds(vertices, faces)
    upper, _ = cKDTree(vertices[np.unique(faces)]).query(grid.centers())
    vals = _grid_distance(lo, float(voxel_size), dims, tri, cen, rad, np.asarray(upper, dtype=np.float64), 4)
    return DistanceGrid(lo, float(voxel_size), vals.reshape(tuple(dims)))


def trilinear_lookup(values: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a scalar grid at continuous node coords, clamped to the grid."""
    dims = np.array(values.shape)
    c = np.clip(coords, 0, dims - 1)
    i0 = np.minimum(np.floor(c).astype(np.int64), np.maximum(dims - 2, 0))
    f = c - i0
    i1 = np.minimum(i0 + 1, dims - 1)
    out = np.zeros(len(c))
    for sx in (0, 1):
        ix = i1[:, 0] if sx else i0[:, 0]
        wx = f[:, 0] if sx else 1 - f[:, 0]
        for sy in (0, 1):
            iy = i1[:, 1] if sy else i0[:, 1]
            wy = f[:, 1] if sy else 1 - f[:, 1]
            for sz in (0, 1):
                iz = i1[:, 2] if sz else i0[:, 2]
                wz = f[:, 2] if sz else 1 - f[:, 2]
                out += wx * wy * wz * values[ix, iy, iz]
    return out


def query_distance(grid: DistanceGrid, points: np.ndarray):
    """Interpolated distance at points -> (distance, outside flag); outside points are clamped."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    coords = (points - grid.origin) / grid.voxel_size
    outside = ((coords < 0) | (coords > np.array(grid.dims) - 1)).any(1)
    return trilinear_lookup(grid.values, coords), outside


# ---------------------------------------------------------------------------
# rays and surface-guided sampling
# ---------------------------------------------------------------------------

@dataclass
class Rays:
    origins: np.ndarray  # (R, 3)
    directions: np.ndarray  # (R, 3) unit
    pixels: np.ndarray  # (R, 2) (col, row)
    time_index: int = 0

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, idx) -> "Rays":
        return Rays(self.origins[idx], self.directions[idx], self.pixels[idx], self.time_index)


def generate_rays(camera: Camera, pixels: np.ndarray, time_index: int = 0) -> Rays:
    """Rays from the camera center through pixel centers (col, row)."""
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if ((pixels < 0) | (pixels > [camera.width - 1, camera.height - 1])).any():
        raise ValueError("generate_rays: pixel outside image bounds")
    homog = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    d_cam = homog @ np.linalg.inv(camera.K).T
    d = d_cam @ camera.R  # camera -> world: R^T d
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d.shape).copy()
    return Rays(origins, d, pixels, time_index)


def ray_box(origins: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    """Slab intersection -> (t_near, t_far, hit)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    tn = np.maximum(tmin.max(1), 0.0)
    tf = tmax.min(1)
    return tn, tf, tf > tn


@dataclass
class RayIntervals:
    """Near-surface depth intervals per ray, padded: (R, I) starts/ends, unused slots have zero length."""
    starts: np.ndarray
    ends: np.ndarray
    step: float

    @property
    def lengths(self) -> np.ndarray:
        return self.ends - self.starts

    @property
    def hit(self) -> np.ndarray:
        return self.lengths.sum(1) > 0


def near_surface_intervals(rays: Rays, grid: DistanceGrid, threshold: float,
                           step: float | None = None) -> RayIntervals:
    """March rays at ``step`` (default voxel/2) and keep runs where the grid distance <= threshold."""
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    step = grid.voxel_size / 2 if step is None else step
    R = len(rays)
    tn, tf, hit = ray_box(rays.origins, rays.directions, grid.lo, grid.hi)
    if not hit.any():
        z = np.zeros((R, 1))
        return RayIntervals(z, z.copy(), step)
    n_steps = int(np.ceil((tf[hit] - tn[hit]).max() / step)) + 1
    ts = tn[:, None] + step * np.arange(n_steps)[None, :]
    live = hit[:, None] & (ts <= tf[:, None] + 1e-12)
    pts = rays.origins[:, None, :] + ts[..., None] * rays.directions[:, None, :]
    d, _ = query_distance(grid, pts.reshape(-1, 3))
    inside = live & (d.reshape(R, n_steps) <= threshold)
    # runs of consecutive inside samples -> [t_first, t_last]
    pad = np.zeros((R, 1), dtype=bool)
    edge = np.diff(np.concatenate([pad, inside, pad], axis=1).astype(np.int8), axis=1)
    rs, cs = np.nonzero(edge == 1)
    re, ce = np.nonzero(edge == -1)
    keep = (ce - 1) > cs  # zero-length runs (single sample) carry no interval
    rs, cs, ce = rs[keep], cs[keep], ce[keep]
    n_int = np.bincount(rs, minlength=R)
    I = max(int(n_int.max()) if len(n_int) else 0, 1)
    starts = np.zeros((R, I))
    ends = np.zeros((R, I))
    slot = np.arange(len(rs)) - np.repeat(np.cumsum(n_int) - n_int, n_int)
    starts[rs, slot] = ts[rs, cs]
    ends[rs, slot] = ts[rs, ce - 1]
    return RayIntervals(starts, ends, step)


@dataclass
class RaySamples:
    depths: np.ndarray  # (R, K) strictly increasing where valid
    deltas: np.ndarray  # (R, K)
    valid: np.ndarray  # (R,) rays with samples
    points: np.ndarray  # (R, K, 3)

    @property
    def n_points(self) -> int:
        return int(self.valid.sum()) * self.depths.shape[1]


def stratified_samples(rays: Rays, intervals: RayIntervals, n_samples: int,
                       rng: np.random.Generator | None = None) -> RaySamples:
    """Stratify ``n_samples`` depths uniformly over the union of each ray's intervals.

    Without ``rng`` each stratum's midpoint is used.
    """
    R = len(rays)
    lengths = intervals.lengths
    total = lengths.sum(1)
    valid = total > 0
    K = n_samples
    jitter = rng.random((R, K)) if rng is not None else np.full((R, K), 0.5)
    s = (np.arange(K)[None, :] + jitter) / K * total[:, None]  # arc length within the union
    cum = np.cumsum(lengths, axis=1)
    seg = np.minimum((s[:, :, None] >= cum[:, None, :]).sum(-1), lengths.shape[1] - 1)
    before = np.take_along_axis(np.concatenate([np.zeros((R, 1)), cum[:, :-1]], 1), seg, 1)
    depths = np.take_along_axis(intervals.starts, seg, 1) + (s - before)
    deltas = np.concatenate([np.diff(depths, axis=1), np.full((R, 1), intervals.step)], axis=1)
    depths = np.where(valid[:, None], depths, 0.0)
    deltas = np.where(valid[:, None], deltas, 0.0)
    points = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    return RaySamples(depths, deltas, valid, points)


def surface_guided_sample(rays: Rays, grid: DistanceGrid, threshold: float = 0.05, n_samples: int = 16,
                          rng: np.random.Generator | None = None) -> RaySamples:
    return stratified_samples(rays, near_surface_intervals(rays, grid, threshold), n_samples, rng)
