"""Command-line entry point: ``dsnerf {gen,train,render,eval,ablate,bench}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import CorrespondenceError, DsNerfError, InvalidInputError, TrainingAborted, UsageError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="BLAS thread cap (falls back to DSNERF_THREADS)")
    p.add_argument("--deterministic", action="store_true", help="disable sample jitter")
    p.add_argument("--config", type=Path, default=None, help="JSON file of option defaults; flags win")


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--iters", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--rays", type=int, dest="rays_per_batch")
    p.add_argument("--samples", type=int)
    p.add_argument("--width", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dsnerf", description="Neural avatar toolkit: canonical body field, world-space lighting field")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="write a synthetic dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--size", type=int, dest="image_size")

    p = sub.add_parser("train", help="fit the fields to a dataset")
    _common(p)
    _train_flags(p)
    p.add_argument("--variant", default=None)
    p.add_argument("--resume", type=Path)

    p = sub.add_parser("render", help="render views or novel poses from a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--camera", type=int, action="append", help="camera index (repeatable; default all)")
    p.add_argument("--frame", type=int, action="append", help="dataset frame (repeatable; default training frames)")
    p.add_argument("--pose-file", type=Path, help="poses.json-style file rendered under the novel-pose protocol")
    p.add_argument("--zero-latent", action="store_true", help="force a zero latent for dataset frames too")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--no-alpha", action="store_true")

    p = sub.add_parser("eval", help="masked PSNR/SSIM of rendered images against ground truth")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--pred", type=Path, help="directory of f{frame}_c{cam}.png renders")
    p.add_argument("--out", type=Path, help="report path (stdout when omitted)")
    p.add_argument("--grid", type=Path, help="write a side-by-side comparison PNG")
    p.add_argument("--self-check", action="store_true", help="validate the dataset and score ground truth against itself")

    p = sub.add_parser("ablate", help="train and compare ablation variants")
    _common(p)
    _train_flags(p)
    p.add_argument("--variants", default="full,inverse-lbs,no-lighting,lighting-color")

    p = sub.add_parser("bench", help="closest-face and rendering micro-benchmarks")
    _common(p)
    p.add_argument("--faces", type=int, default=20000)
    p.add_argument("--points", type=int, default=20000)
    p.add_argument("--rays", type=int, default=2048)
    p.add_argument("--repeats", type=int, default=3)
    return parser


# --------------------------------------------------------------------------
# config resolution


def _file_config(args) -> dict:
    if args.config is None:
        return {}
    try:
        obj = json.loads(Path(args.config).read_text())
    except FileNotFoundError as exc:
        raise InvalidInputError(f"config file {args.config} not found") from exc
    except json.JSONDecodeError as exc:
        raise InvalidInputError(f"config file {args.config}: {exc}") from exc
    if not isinstance(obj, dict):
        raise InvalidInputError("config file must hold a JSON object")
    return obj


def resolve_train_config(args):
    from .train import TrainConfig

    opts = _file_config(args)
    for key in ("iters", "epochs", "lr", "rays_per_batch", "samples", "width", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            opts[key] = val
    variant = getattr(args, "variant", None)
    if variant is not None:
        opts["variant"] = variant
    if args.deterministic:
        opts["jitter"] = False
    return TrainConfig.from_dict(opts)


def _threads(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get("DSNERF_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError("DSNERF_THREADS must be an integer") from exc
    return None


def _echo(out_dir: Path, name: str, obj: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / name).write_text(json.dumps(obj, indent=1, sort_keys=True))


# --------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    from .synth import SceneSpec, make_dataset

    opts = _file_config(args)
    if args.image_size is not None:
        opts["image_size"] = args.image_size
    seed = args.seed if args.seed is not None else int(opts.pop("seed", 0))
    opts.pop("seed", None)
    try:
        spec = SceneSpec(**opts)
    except TypeError as exc:
        raise InvalidInputError(f"bad scene option: {exc}") from exc
    make_dataset(args.out, spec, seed)
    print(f"wrote dataset to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import Dataset, fit

    cfg = resolve_train_config(args)
    ds = Dataset(args.data)
    _echo(args.out, "run_config.json", {"command": "train", "data": str(args.data), "train": cfg.to_json()})
    res = fit(ds, cfg, run_dir=args.out, resume=args.resume)
    last = res.log[-1]["loss"] if res.log else float("nan")
    print(f"trained {res.state.step} steps, last loss {last:.6f}; checkpoints in {args.out}")
    return EXIT_OK


def _load_pose_file(path: Path):
    from .mesh import Pose

    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise InvalidInputError(f"pose file {path} not found") from exc
    if obj.get("version") != 1 or "frames" not in obj:
        raise InvalidInputError("pose file does not follow the poses.json schema")
    return [Pose.from_json(p) for p in obj["frames"]]


def cmd_render(args) -> int:
    from .fields import load_checkpoint
    from .render import NeuralField, RenderConfig, render_image, write_image_pair
    from .train import Dataset, TrainConfig, novel_pose_context

    if not args.checkpoint.is_file():
        raise InvalidInputError(f"checkpoint {args.checkpoint} not found")
    params, _, meta = load_checkpoint(args.checkpoint)
    mapping = TrainConfig.from_dict(meta["train"]).mapping if "train" in meta else "barycentric"
    ds = Dataset(args.data)
    cams = args.camera if args.camera else list(range(len(ds.cameras)))
    for c in cams:
        if not 0 <= c < len(ds.cameras):
            raise UsageError(f"camera {c} does not exist")
    cfg = RenderConfig(samples=args.samples, background=ds.background)
    field_ = NeuralField(params)
    jobs = []
    if args.pose_file is not None:
        for i, pose in enumerate(_load_pose_file(args.pose_file)):
            jobs.append((f"p{i}", novel_pose_context(params, pose, ds, mapping)))
    else:
        frames = args.frame if args.frame else ds.train_frames
        for f in frames:
            if not 0 <= f < len(ds.poses):
                raise UsageError(f"frame {f} does not exist")
            if f in ds.train_frames and not args.zero_latent:
                ctx = ds.context(f, mapping)
            else:
                ctx = novel_pose_context(params, ds.poses[f], ds, mapping)
            jobs.append((f"f{f}", ctx))
    for stem, ctx in jobs:
        for c in cams:
            img, alpha = render_image(ds.cameras[c], ctx, field_, cfg)
            write_image_pair(args.out, f"{stem}_c{c}", img, None if args.no_alpha else alpha)
    print(f"rendered {len(jobs) * len(cams)} images to {args.out}")
    return EXIT_OK


def _comparison_grid(path: Path, pairs) -> None:
    from .render import save_png

    rows = [np.concatenate([pred, gt, np.abs(pred - gt)], axis=1) for pred, gt in pairs]
    save_png(path, np.concatenate(rows, axis=0))


def cmd_eval(args) -> int:
    from .metrics import EvalReport
    from .render import load_png
    from .train import Dataset

    ds = Dataset(args.data)
    report = EvalReport()
    pairs = []
    if args.self_check:
        for f in ds.train_frames + ds.heldout_frames:
            for c in range(len(ds.cameras)):
                path = ds.root / "frames" / f"f{f}_c{c}.png"
                if not path.is_file():
                    continue
                gt = ds.image(f, c)
                report.add(f"f{f}_c{c}", gt, gt, ds.bbox_mask(f, c))
                pairs.append((gt, gt))
    else:
        if args.pred is None:
            raise UsageError("eval needs --pred or --self-check")
        files = sorted(p for p in Path(args.pred).glob("f*_c*.png") if not p.stem.endswith("_alpha"))
        if not files:
            raise InvalidInputError(f"no renders found in {args.pred}")
        for p in files:
            f, c = (int(s[1:]) for s in p.stem.split("_"))
            pred = load_png(p)
            gt = load_png(ds.root / "frames" / f"f{f}_c{c}.png")
            report.add(p.stem, pred, gt, ds.bbox_mask(f, c))
            pairs.append((pred, gt))
    text = report.dumps()
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(text)
    else:
        print(text)
    if args.grid is not None:
        _comparison_grid(args.grid, pairs)
    return EXIT_OK


def ablation_markdown(rows: list[dict]) -> str:
    lines = ["| variant | novel view PSNR | novel view SSIM | novel pose PSNR | novel pose SSIM |", "|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['variant']} | {r['novel_view']['psnr']:.3f} | {r['novel_view']['ssim']:.4f} | {r['novel_pose']['psnr']:.3f} | {r['novel_pose']['ssim']:.4f} |")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    from .train import VARIANTS, Dataset, evaluate, fit, novel_pose_set, novel_view_set

    names = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in names:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    base = resolve_train_config(args)
    ds = Dataset(args.data)
    _echo(args.out, "run_config.json", {"command": "ablate", "data": str(args.data), "variants": names, "train": base.to_json()})
    rows = []
    for v in names:
        cfg = replace(base, variant=v)
        res = fit(ds, cfg, run_dir=args.out / v)
        row = {"variant": v}
        for key, views in (("novel_view", novel_view_set(ds)), ("novel_pose", novel_pose_set(ds))):
            rep, _ = evaluate(res.params, ds, views, cfg.mapping, cfg.samples)
            row[key] = {"psnr": rep.mean_psnr, "ssim": rep.mean_ssim}
        rows.append(row)
    (args.out / "ablation.json").write_text(json.dumps({"version": 1, "rows": rows}, indent=1))
    md = ablation_markdown(rows)
    (args.out / "ablation.md").write_text(md)
    print(md, end="")
    return EXIT_OK


def bench_mesh(target_faces: int):
    """A capsule body refined until it has at least ``target_faces`` faces."""
    from .mesh import BodySpec, gen_capsule_body

    radial, spacing, rings = 16, 0.04, 11
    while True:
        mesh = gen_capsule_body(BodySpec(radial_segments=radial, limb_ring_spacing=spacing, cylinder_rings=rings, head_rings=rings))
        if mesh.face_count >= target_faces:
            return mesh
        radial += 8
        spacing *= 0.8
        rings += 4


def cmd_bench(args) -> int:
    from .barymap import FaceIndex
    from .mesh import canonical_pose, lbs_pose
    from .render import BoundsHierarchy, Camera, generate_rays

    rng = np.random.default_rng(args.seed or 0)
    mesh = bench_mesh(args.faces)
    posed = lbs_pose(mesh, canonical_pose(mesh.joints))
    lo, hi = posed.vertices.min(0), posed.vertices.max(0)
    pts = rng.uniform(lo, hi, size=(args.points, 3))

    def timed(fn):
        best = []
        for _ in range(max(1, args.repeats)):
            t = time.perf_counter()
            fn()
            best.append(time.perf_counter() - t)
        return best

    index = FaceIndex(posed)
    t_fast = timed(lambda: index.query(pts))
    t_brute = timed(lambda: index.query_brute(pts))
    cam = Camera.look_at((0.0, -3.2, 1.0), (0.0, 0.0, 0.95), (0.0, 0.0, 1.0), 100.0, 64, 64)
    pix = cam.pixel_grid()[rng.integers(64 * 64, size=args.rays)]
    rays = generate_rays(cam, pix)
    bvh = BoundsHierarchy(posed)
    t_bounds = timed(lambda: bvh.intersect(rays))
    config = {"faces": mesh.face_count, "points": args.points, "rays": args.rays, "repeats": args.repeats}
    report = {
        "machine": {
            "platform": platform.platform(),
            "python": platform.python_version(),
            "numpy": np.__version__,
            "cpu_count": os.cpu_count(),
        },
        "config": config,
        "config_hash": hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16],
        "closest_face_points_per_s": {"accelerated": args.points / min(t_fast), "brute_force": args.points / min(t_brute)},
        "ray_bounds_rays_per_s": args.rays / min(t_bounds),
        "spread": {"accelerated": max(t_fast) / min(t_fast) - 1.0, "brute_force": max(t_brute) / min(t_brute) - 1.0},
    }
    print(json.dumps(report, indent=1))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "render": cmd_render, "eval": cmd_eval, "ablate": cmd_ablate, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        threads = _threads(args)
        limit = threadpool_limits(threads) if threads else nullcontext()
        with limit:
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, TrainingAborted) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InvalidInputError, CorrespondenceError, FileNotFoundError, OSError, KeyError, DsNerfError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
