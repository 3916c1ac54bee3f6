"""Command line: generate, train, render, eval and selftest."""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from .body import Pose
from .checkpoint import CheckpointError, load_checkpoint
from .data import MOTIONS, generate_sequence, make_identity, ring_cameras, save_png
from .geometry import Camera
from .inference import Capture, SceneCache, evaluate, input_frames, load_capture, render_image, save_capture
from .train import TrainConfig, Trainer, TrainingError

log = logging.getLogger("bodynerf")


def _int_list(text: str) -> tuple:
    return tuple(int(t) for t in text.split(",") if t.strip())


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    template, colors = make_identity(args.seed)
    cams = ring_cameras(args.cameras, size=args.size, focal=args.focal * args.size / 64.0,
                        start_angle=args.start_angle)
    seqs = [generate_sequence(template, args.motion, cam, args.frames, args.seed, args.supersample,
                              heldout=args.heldout, amplitude=args.amplitude, colors=colors,
                              name=f"id{args.seed}_cam{cam.camera_id}") for cam in cams]
    out = save_capture(Capture(seqs[0], seqs[1:]), args.out)
    print(f"wrote {len(seqs)} sequence(s) of {args.frames} frames to {out}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_FLAGS = [f for f in fields(TrainConfig) if f.name != "model"]


def train_config_from_args(args) -> TrainConfig:
    """Config file first, then every flag given on the command line."""
    doc = json.loads(Path(args.config).read_text()) if args.config else {}
    for f in TRAIN_FLAGS:
        value = getattr(args, f.name)
        if value is not None:
            doc[f.name] = value
    if args.model_json:
        doc["model"] = {**doc.get("model", {}), **json.loads(args.model_json)}
    return TrainConfig.from_dict(doc)


def cmd_train(args) -> int:
    cfg = train_config_from_args(args)
    captures = [load_capture(d) for d in args.data]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trainer = Trainer(cfg, captures)
    t0 = time.perf_counter()
    trainer.run(out_dir=out.parent)
    trainer.save(out)
    curve = out.with_suffix(".loss.json")
    curve.write_text(json.dumps({"log_window": cfg.log_window, "losses": trainer.losses}))
    print(f"trained {len(trainer.losses)} iterations in {time.perf_counter() - t0:.1f}s -> {out}")
    return 0


# ---------------------------------------------------------------------------
# render / eval
# ---------------------------------------------------------------------------

def _load(args, capture: Capture):
    model, header = load_checkpoint(args.checkpoint, n_joints=capture.template.n_joints)
    cfg = header.get("train_config") or {}
    cache = SceneCache(cfg.get("voxel_size", 0.02), cfg.get("threshold", 0.05), model.config.visibility_scale,
                       cfg.get("bbox_dilation", 2))
    T = args.n_inputs or cfg.get("n_inputs", 8)
    return model, cache, T, cfg


def cmd_render(args) -> int:
    capture = load_capture(args.data)
    model, cache, T, cfg = _load(args, capture)
    seqs = capture.all_sequences()
    seq = seqs[args.view]
    base = seq.frames[args.frame]
    pose = Pose.from_dict(json.loads(Path(args.pose).read_text())) if args.pose else base.pose
    camera = Camera.from_dict(json.loads(Path(args.camera).read_text())) if args.camera else base.camera
    idx = input_frames(cache, capture, seq, args.frame, T, args.criterion or cfg.get("criterion", "evenly"))
    frames = [cache.frame(capture.video, j) for j in idx]
    img, dens = render_image(model, frames, cache.target(seq, pose), camera, args.n_samples,
                             density_grid=bool(args.density))
    save_png(img, args.out)
    if args.density:
        np.save(args.density, dens)
    print(f"rendered {camera.width}x{camera.height} from inputs {idx} -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    capture = load_capture(args.data)
    model, cache, T, cfg = _load(args, capture)
    targets = [(seq, i) for seq in capture.all_sequences() for i in seq.indices("heldout")]
    if args.views:
        targets += [(seq, i) for seq in capture.views for i in seq.indices("train")]
    if not targets:
        print("no held-out frames to evaluate", file=sys.stderr)
        return 1
    res = evaluate(model, capture, targets, cache, T, args.criterion or cfg.get("criterion", "evenly"),
                   args.n_samples)
    print(f"{'sequence':<16} {'frame':>5} {'psnr':>8} {'ssim':>7}")
    for r in res:
        print(f"{r['sequence']:<16} {r['frame']:>5} {r['psnr']:>8.2f} {r['ssim']:>7.4f}")
    print(f"{'mean':<16} {'':>5} {np.mean([r['psnr'] for r in res]):>8.2f} {np.mean([r['ssim'] for r in res]):>7.4f}")
    if args.json:
        rows = [{k: v for k, v in r.items() if k != "image"} for r in res]
        Path(args.json).write_text(json.dumps(rows, indent=1))
    return 0


# ---------------------------------------------------------------------------
# selftest
# ---------------------------------------------------------------------------

def quick_checks() -> list:
    """Closed-form checks that run in a few seconds -> [(name, ok, detail)]."""
    from . import autodiff as ad
    from .body import forward_kinematics, generate_humanoid
    from .deformation import warp_to_observation
    from .metrics import psnr, ssim
    from .nn import MLP
    from .render import composite

    rng = np.random.default_rng(0)
    out = []

    S = 256
    rgb, _ = composite(np.full((1, S), 1.0), np.full((1, S, 3), 0.7), np.full((1, S), 1.0 / S))
    want = 0.7 * (1 - np.exp(-1.0))
    err = float(np.abs(rgb.data - want).max() / want)
    out.append(("composite matches c(1-exp(-1))", err < 0.01, f"rel err {err:.2e}"))

    tpl = generate_humanoid(0)
    pose = Pose(rng.normal(scale=0.4, size=(tpl.n_joints, 3)), rng.normal(scale=0.1, size=3))
    T = forward_kinematics(tpl, pose)
    pts = rng.uniform(-1, 1, size=(500, 3))
    w = rng.dirichlet(np.ones(tpl.n_joints), size=500)
    disp = float(np.abs(warp_to_observation(pts, w, T, T).data[0] - pts).max())
    out.append(("warp with equal poses is the identity", disp <= 1e-9, f"max displacement {disp:.1e}"))

    logits = ad.Tensor(rng.normal(scale=5, size=(1000, 7)))
    sm = ad.softmax(logits).data
    ok = np.abs(sm.sum(1) - 1).max() <= 1e-9 and (sm >= 0).all()
    out.append(("softmax rows lie on the simplex", bool(ok), ""))

    mlp = MLP(4, 2, 8, 2, rng, zero_last=False)
    x = ad.Tensor(rng.normal(size=(5, 4)))
    gerr = ad.grad_check(lambda: ad.tsum(ad.sigmoid(mlp(x))), mlp.parameters())
    out.append(("MLP gradient matches central differences", gerr < 1e-6, f"rel err {gerr:.1e}"))

    a = rng.uniform(size=(24, 24, 3))
    b = np.clip(a + 0.1, 0, 1)
    black, dot = np.zeros((10, 10, 3)), np.zeros((10, 10, 3))
    dot[0, 0] = 1.0  # MSE = 3 / 300
    ok = (psnr(a, a) == 99.0 and psnr(black, dot) == 20.0 and ssim(a, a) == 1.0
          and psnr(a, b) == psnr(b, a) and ssim(a, b) == ssim(b, a))
    out.append(("metric closed forms and symmetry", bool(ok), ""))
    return out


def cmd_selftest(args) -> int:
    failed = 0
    for name, ok, detail in quick_checks():
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    if args.quick:
        return int(failed > 0)
    tests = Path(args.tests) if args.tests else Path(__file__).resolve().parents[2] / "tests"
    if not tests.is_dir():
        print(f"test suite not found at {tests}; pass --tests DIR or --quick", file=sys.stderr)
        return 2
    import pytest
    code = pytest.main(["-q", str(tests)] + (["-k", args.k] if args.k else []))
    return int(failed > 0 or code != 0)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bodynerf", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render a synthetic capture directory")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--motion", default="wave", choices=sorted(MOTIONS))
    g.add_argument("--cameras", type=int, default=1, help="camera 0 is the input video, the rest are extra views")
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--focal", type=float, default=80.0, help="focal length at 64 px, scaled with --size")
    g.add_argument("--start-angle", type=float, default=0.0)
    g.add_argument("--heldout", type=_int_list, default=(), help="comma-separated held-out frame indices")
    g.add_argument("--supersample", type=int, default=2)
    g.add_argument("--amplitude", type=float, default=1.0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model and write a checkpoint")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--data", nargs="+", required=True, help="capture directories")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--model-json", help="JSON object merged into the config's model section")
    for f in TRAIN_FLAGS:
        kind = f.type if isinstance(f.type, type) else {"int": int, "float": float, "str": str}[f.type]
        t.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None)
    t.set_defaults(func=cmd_train)

    for name, helptext in (("render", "render one image"), ("eval", "score held-out frames")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("--checkpoint", required=True)
        r.add_argument("--data", required=True, help="capture directory")
        r.add_argument("--n-inputs", type=int)
        r.add_argument("--n-samples", type=int, default=16)
        r.add_argument("--criterion", choices=["evenly", "vertex-distance"])
        if name == "render":
            r.add_argument("--out", required=True, help="PNG path")
            r.add_argument("--view", type=int, default=0, help="0 = input video, k = extra view k-1")
            r.add_argument("--frame", type=int, default=0)
            r.add_argument("--pose", help="JSON pose overriding the frame's")
            r.add_argument("--camera", help="JSON camera overriding the frame's")
            r.add_argument("--density", help="write the density grid here (.npy)")
            r.set_defaults(func=cmd_render)
        else:
            r.add_argument("--views", action="store_true", help="also score every extra-view frame")
            r.add_argument("--json", help="write per-frame results here")
            r.set_defaults(func=cmd_eval)

    s = sub.add_parser("selftest", help="run the invariant and oracle checks")
    s.add_argument("--quick", action="store_true", help="closed-form checks only")
    s.add_argument("--tests", help="test suite directory")
    s.add_argument("-k", help="pytest -k expression")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValueError, CheckpointError, TrainingError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
