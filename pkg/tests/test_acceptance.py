"""Acceptance criteria 1-10; each prints one PASS/FAIL line (also collected in the summary)."""
import time

import numpy as np
import pytest

from bodynerf import autodiff as ad
from bodynerf.body import Pose, forward_kinematics, generate_humanoid, posed_vertices
from bodynerf.data import generate_multiview, generate_sequence, make_identity, ring_cameras
from bodynerf.deformation import BlendWeightRefiner, warp_to_observation
from bodynerf.geometry import (RayIntervals, generate_rays, look_at, mesh_distance_bruteforce, near_surface_intervals,
                               rasterize_visibility, raycast_visibility, scene_scale, stratified_samples)
from bodynerf.inference import Capture, SceneCache, constant_baseline, evaluate
from bodynerf.metrics import psnr, ssim
from bodynerf.model import HumanRadianceField, ModelConfig, prepare_target
from bodynerf.render import TemporalAttention, composite, photometric_loss
from bodynerf.train import TrainConfig, Trainer
from conftest import TINY_MODEL, report_acceptance
from meshes import icosphere

MOT_ITERATIONS = 2000
MVT_ITERATIONS = 1000


class Clock:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.t0


def random_pose(rng, n_joints, scale=0.5):
    return Pose(rng.normal(0.0, scale, (n_joints, 3)), rng.normal(0.0, 0.2, 3))


# ---------------------------------------------------------------------------

def test_1_analytic_compositing():
    with Clock() as clk:
        S, L, c = 256, 2.0, np.array([0.2, 0.5, 0.9])
        sigma = np.full((1, S), 1.0 / L)  # sigma * L = 1
        rgb, _ = composite(sigma, np.broadcast_to(c, (1, S, 3)), np.full((1, S), L / S))
        want = c * (1 - np.exp(-1.0))
        err = float(np.max(np.abs(rgb.data[0] - want) / want))
    ok = err <= 0.01 and clk.seconds < 1.0
    report_acceptance(1, "analytic compositing", ok, f"max relative error {err:.2e} (limit 1e-2)", clk.seconds)
    assert ok


def test_2_warp_identity():
    rng = np.random.default_rng(2)
    tpl = generate_humanoid(0)
    scale = scene_scale(tpl.vertices)
    worst = 0.0
    with Clock() as clk:
        pts = rng.uniform(-1.0, 1.0, (10_000, 3)) * scale / 2
        w = rng.dirichlet(np.ones(tpl.n_joints), 10_000)
        for _ in range(100):
            T = forward_kinematics(tpl, random_pose(rng, tpl.n_joints))
            p_o = warp_to_observation(pts, w, T, T).data[0]
            worst = max(worst, float(np.abs(p_o - pts).max()))
    ok = worst <= 1e-9 * scale and clk.seconds < 10.0
    report_acceptance(2, "warp identity", ok, f"max displacement {worst:.1e} vs limit {1e-9 * scale:.1e}",
                      clk.seconds)
    assert ok


def test_3_simplex_weights():
    rng = np.random.default_rng(3)
    n, J, T = 10_000, 12, 8
    with Clock() as clk:
        refiner = BlendWeightRefiner(J, rng, width=32, depth=3)
        refiner.mlp.out.weight.data = rng.normal(0, 2.0, refiner.mlp.out.weight.shape)  # non-trivial residual
        w_s = rng.dirichlet(np.ones(J) * 0.3, n)
        w_g = refiner(w_s, rng.normal(0, 0.5, 3 * J), rng.uniform(0, 0.1, n)).data

        att = TemporalAttention(16, 12, rng, d_k=16)
        mask = rng.random((T, n)) < 0.3
        mask[rng.integers(T, size=n), np.arange(n)] = False  # at least one live frame per query
        a = att.weights(ad.Tensor(rng.normal(0, 3, (n, 16))), ad.Tensor(rng.normal(0, 3, (T, n, 12))), mask).data
    dev = max(float(np.abs(w_g.sum(1) - 1).max()), float(np.abs(a.sum(1) - 1).max()))
    neg = min(float(w_g.min()), float(a.min()))
    masked_mass = float(a[mask.T].max()) if mask.any() else 0.0
    ok = dev <= 1e-9 and neg >= 0 and masked_mass == 0.0
    report_acceptance(3, "simplex weights", ok, f"max |sum-1| {dev:.1e}, min entry {neg:.1e}, "
                      f"masked weight {masked_mass:.1e}", clk.seconds)
    assert ok


def test_4_visibility_oracle():
    rng = np.random.default_rng(4)
    tpl = generate_humanoid(0)
    rates = []
    with Clock() as clk:
        for _ in range(20):
            verts = posed_vertices(tpl, random_pose(rng, tpl.n_joints, 0.4))
            a, h = rng.uniform(0, 2 * np.pi), rng.uniform(0.3, 1.6)
            center = verts.mean(0)
            cam = look_at(center + [2.6 * np.sin(a), h - center[1], 2.6 * np.cos(a)], center)
            rates.append(np.mean(rasterize_visibility(verts, tpl.faces, cam) == raycast_visibility(verts, tpl.faces, cam)))
        v, f = icosphere(3, 0.5)
        sphere = []
        for _ in range(10):
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            cam = look_at(d * rng.uniform(2.0, 4.0), [0, 0, 0], up=(0, 1, 0) if abs(d[1]) < 0.9 else (1, 0, 0))
            sphere.append(np.mean(rasterize_visibility(v, f, cam) == raycast_visibility(v, f, cam)))
    ok = min(rates) >= 0.98 and min(sphere) == 1.0
    report_acceptance(4, "visibility oracle", ok, f"humanoid agreement min {min(rates):.4f} mean {np.mean(rates):.4f}"
                      f" over 20 pairs, icosphere min {min(sphere):.4f}", clk.seconds)
    assert ok


def test_5_surface_guided_sampling():
    rng = np.random.default_rng(5)
    tpl = generate_humanoid(0)
    voxel, thr = 0.02, 0.05
    with Clock() as clk:
        pose = random_pose(rng, tpl.n_joints, 0.3)
        target = prepare_target(tpl, pose, voxel, thr)
        cam = ring_cameras(1, size=64)[0]
        pix = rng.uniform(0.0, 63.0, (1000, 2))
        rays = generate_rays(cam, pix)
        iv = near_surface_intervals(rays, target.grid, thr)
        samples = stratified_samples(rays, iv, 16, rng)
        pts = samples.points[samples.valid].reshape(-1, 3)
        exact = mesh_distance_bruteforce(pts, target.vertices, tpl.faces)
        bound = thr + voxel * np.sqrt(3)

        model = HumanRadianceField(tpl.n_joints, [0], ModelConfig.from_dict(TINY_MODEL), seed=0)
        seq = generate_sequence(tpl, "static", cam, 1, supersample=1)
        frames = [SceneCache(voxel, thr).frame(seq, 0)]
        miss = np.nonzero(~iv.hit)[0]
        with ad.no_grad():
            model.render_rays(frames, target, rays.subset(miss), stratified_samples(
                rays.subset(miss), RayIntervals(iv.starts[miss], iv.ends[miss], iv.step), 16), 0)
            evals_miss = model.n_point_evals
            model.render_rays(frames, target, rays, samples, 0)
            evals_all = model.n_point_evals - evals_miss
    n_hit = int(iv.hit.sum())
    ok = exact.max() <= bound and evals_miss == 0 and evals_all == n_hit * 16 and 0 < n_hit < 1000
    report_acceptance(5, "surface-guided sampling", ok, f"max sample distance {exact.max():.4f} (bound {bound:.4f}) "
                      f"over {len(pts)} samples; {len(miss)} missing rays -> {evals_miss} network evaluations",
                      clk.seconds)
    assert ok


def test_6_gradient_integrity():
    """Normwise relative error per parameter tensor on randomly chosen coordinates."""
    rng = np.random.default_rng(6)
    tpl, colors = make_identity(0)
    with Clock() as clk:
        cam = ring_cameras(1, size=16, focal=20)[0]
        seq = generate_sequence(tpl, "wave", cam, 4, colors=colors, supersample=1)
        cache = SceneCache(0.08, 0.08)
        frames = [cache.frame(seq, i) for i in (0, 2)]
        target = cache.target(seq, seq.frames[3].pose)
        pool = cache.pool(seq, 3)
        hit = np.nonzero(pool.intervals.hit)[0]
        rays, iv, ref = pool.take(hit[[len(hit) // 3, 2 * len(hit) // 3]])
        samples = stratified_samples(rays, iv, 8)
        model = HumanRadianceField(tpl.n_joints, [0], ModelConfig.from_dict(TINY_MODEL), seed=0)
        params = model.parameters()
        for p in params:  # wake the zero-initialized output layers so every stage carries gradient
            if not p.data.any():
                p.data = rng.normal(0, 0.1, p.data.shape)

        def loss():
            rgb, _ = model.render_rays(frames, target, rays, samples, 0)
            return photometric_loss(rgb, ref)

        for p in params:
            p.grad = None
        loss().backward()
        analytic = {p.name: np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params}
        h, worst, worst_name, stages = 1e-6, 0.0, "", set()
        with ad.no_grad():
            for p in params:
                flat = p.data.reshape(-1)
                idx = rng.choice(flat.size, min(6, flat.size), replace=False)
                num = np.empty(len(idx))
                for k, i in enumerate(idx):
                    x = flat[i]
                    flat[i] = x + h
                    up = loss().item()
                    flat[i] = x - h
                    down = loss().item()
                    flat[i] = x
                    num[k] = (up - down) / (2 * h)
                a = analytic[p.name].reshape(-1)[idx]
                scale = max(np.linalg.norm(a), np.linalg.norm(num))
                if scale > 1e-12:
                    stages.add(p.name.split(".")[0])
                    rel = np.linalg.norm(a - num) / scale
                    if rel > worst:
                        worst, worst_name = rel, p.name
    need = {"encoder", "diffuser", "refiner", "attn_sigma", "attn_rgb", "density", "color", "latents"}
    ok = worst <= 1e-4 and need <= stages and clk.seconds < 60
    report_acceptance(6, "gradient integrity", ok, f"worst relative error {worst:.1e} ({worst_name}) over "
                      f"{len(params)} tensors in {len(stages)} stages", clk.seconds)
    assert ok


# ---------------------------------------------------------------------------
# training smoke tests
# ---------------------------------------------------------------------------

def test_7_monocular_overfit():
    tpl, colors = make_identity(0)
    with Clock() as clk:
        seq = generate_sequence(tpl, "wave", ring_cameras(1)[0], 10, heldout=(3, 7), colors=colors)
        cap = Capture(seq)
        cfg = TrainConfig(seed=0, mode="MoT", lr=5e-4, iterations=MOT_ITERATIONS)
        trainer = Trainer(cfg, [cap])
        before = evaluate(trainer.model, cap, [(seq, 3), (seq, 7)], trainer.cache, cfg.n_inputs)
        trainer.run()
        after = evaluate(trainer.model, cap, [(seq, 3), (seq, 7)], trainer.cache, cfg.n_inputs)
    p0 = np.mean([r["psnr"] for r in before])
    p1, s1 = np.mean([r["psnr"] for r in after]), np.mean([r["ssim"] for r in after])
    ok = p1 >= 28.0 and s1 >= 0.90 and clk.seconds <= 1800
    report_acceptance(7, "monocular overfit", ok, f"held-out PSNR {p0:.2f} -> {p1:.2f} dB, SSIM {s1:.3f} after "
                      f"{MOT_ITERATIONS} iterations (need >= 28 dB, >= 0.90)", clk.seconds)
    assert ok


def mvt_capture(seed):
    seqs = generate_multiview(seed, "wave", 4, 10)
    return Capture(seqs[0], seqs[1:])


@pytest.fixture(scope="module")
def generalization():
    """Train with and without temporal attention on identities 1-3; score identity 4."""
    train = [mvt_capture(s) for s in (1, 2, 3)]
    unseen = mvt_capture(4)
    targets = [(view, i) for view in unseen.views for i in (0, 5)]
    out = {"baseline": constant_baseline([v.frames[i].image for v, i in targets])}
    for key, use_attention in (("full", True), ("no_attention", False)):
        t0 = time.perf_counter()
        cfg = TrainConfig(seed=0, mode="MVT", lr=5e-4, iterations=MVT_ITERATIONS,
                          model={"use_attention": use_attention})
        trainer = Trainer(cfg, train)
        trainer.run()
        res = evaluate(trainer.model, unseen, targets, trainer.cache, cfg.n_inputs)
        out[key] = (np.mean([r["psnr"] for r in res]), np.mean([r["ssim"] for r in res]),
                    time.perf_counter() - t0)
    return out


def test_8_generalization(generalization):
    base = generalization["baseline"]
    p, s, secs = generalization["full"]
    ok = p >= base + 5.0
    report_acceptance(8, "generalization", ok, f"unseen-identity PSNR {p:.2f} dB (SSIM {s:.3f}) vs constant "
                      f"baseline {base:.2f} dB, margin {p - base:.2f} (need >= 5)", secs)
    assert ok


def test_9_attention_ablation(generalization):
    p_full = generalization["full"][0]
    p_abl, _, secs = generalization["no_attention"]
    ok = p_abl < p_full
    report_acceptance(9, "attention ablation", ok, f"unseen PSNR {p_full:.2f} with attention, {p_abl:.2f} "
                      f"without (change {p_abl - p_full:+.2f} dB, expected negative)", secs)
    assert ok


def test_10_metric_correctness():
    rng = np.random.default_rng(10)
    with Clock() as clk:
        a = np.zeros((10, 10, 3))
        b = a.copy()
        b[0, 0] = 1.0  # MSE exactly 0.01
        x, y = rng.random((32, 32, 3)), rng.random((32, 32, 3))
        checks = {
            "psnr(MSE 0.01) == 20": psnr(a, b) == 20.0,
            "psnr(white, black) == 0": psnr(np.ones((8, 8, 3)), np.zeros((8, 8, 3))) == 0.0,
            "psnr(a, a) == 99": psnr(x, x) == 99.0,
            "ssim(a, a) == 1": ssim(x, x) == 1.0,
            "psnr symmetric": psnr(x, y) == psnr(y, x),
            "ssim symmetric": ssim(x, y) == ssim(y, x),
        }
    bad = [k for k, v in checks.items() if not v]
    ok = not bad
    report_acceptance(10, "metric correctness", ok, "all exact" if ok else f"failed: {bad}", clk.seconds)
    assert ok
