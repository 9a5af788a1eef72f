"""Optimisation loop, dataset access, the novel-pose protocol and ablation variants."""

from __future__ import annotations

import json
import math
import shutil
import time
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .barymap import OutlierBounds
from .errors import ConfigError, InvalidInputError, MeshFormatError, TrainingAborted
from .fields import FieldConfig, FieldParams, init_params, load_checkpoint, save_checkpoint
from .mesh import Pose, PosedMesh, SkinnedMesh, canonical_pose, lbs_pose
from .metrics import EvalReport, projected_bbox_mask
from .render import (
    Camera,
    FrameContext,
    NeuralField,
    RenderConfig,
    Rays,
    generate_rays,
    lightness_at,
    load_png,
    render_image,
    sample_intervals,
    sample_points,
    shade_samples,
    warp_samples,
)
from .synth import LightSpec

# light mode and point mapping of each ablation variant
VARIANTS = {
    "full": ("scalar", "barycentric"),
    "inverse-lbs": ("scalar", "inverse_lbs"),
    "no-lighting": ("none", "barycentric"),
    "lighting-color": ("color", "barycentric"),
}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    iters: int | None = None  # overrides epochs when set
    rays_per_batch: int = 5000
    samples: int = 64
    lr: float = 5e-4
    lr_factor: float = 0.1
    face_fraction: float = 0.05
    seed: int = 0
    width: int = 128
    pe_freqs: int = 10
    pose_dim: int = 32
    variant: str = "full"
    alpha: float = -4.0
    beta: float = 5.0
    gamma: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = 10.0
    jitter: bool = True
    keep_last: int = 3
    checkpoint_every: int | None = None  # defaults to one epoch

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {sorted(VARIANTS)}")
        for name in ("epochs", "rays_per_batch", "samples", "width", "keep_last"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.iters is not None and self.iters < 0:
            raise ConfigError("iters must be non-negative")
        if not 0.0 <= self.face_fraction <= 1.0:
            raise ConfigError("face_fraction must lie in [0, 1]")
        if self.lr < 0 or not 0 < self.lr_factor <= 1:
            raise ConfigError("lr must be non-negative and lr_factor in (0, 1]")

    @property
    def outlier(self) -> OutlierBounds:
        return OutlierBounds(self.alpha, self.beta, self.gamma)

    def field_config(self, joint_count: int) -> FieldConfig:
        light_mode, _ = VARIANTS[self.variant]
        return FieldConfig(
            width=self.width, pe_freqs=self.pe_freqs, pose_dim=self.pose_dim, pose_width=self.width,
            light_width=self.width, light_mode=light_mode, joint_count=joint_count,
        )

    @property
    def mapping(self) -> str:
        return VARIANTS[self.variant][1]

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


# --------------------------------------------------------------------------
# dataset


def _read_json(path: Path) -> dict:
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise MeshFormatError(f"{path.name}: {exc}") from exc
    if obj.get("version") != 1:
        raise MeshFormatError(f"{path.name}: unsupported version {obj.get('version')!r}")
    return obj


class Dataset:
    """On-disk dataset; images are loaded lazily and cached."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset directory {self.root} does not exist")
        mesh_doc = _read_json(self.root / "mesh.json")
        self.mesh = SkinnedMesh.from_json(mesh_doc)
        self.albedo = np.asarray(mesh_doc["albedo"]) if "albedo" in mesh_doc else None
        cams = _read_json(self.root / "cameras.json")
        self.cameras = [Camera.from_json(c) for c in cams["cameras"]]
        self.train_cameras = list(cams["train"])
        self.heldout_cameras = list(cams["heldout"])
        poses = _read_json(self.root / "poses.json")
        self.poses = [Pose.from_json(p) for p in poses["frames"]]
        self.train_frames = list(poses["train"])
        self.heldout_frames = list(poses["heldout"])
        light = _read_json(self.root / "light.json")
        self.light = LightSpec.from_json(light)
        self.background = tuple(light.get("background", (0.0, 0.0, 0.0)))
        self._images: dict[tuple[str, int, int], np.ndarray] = {}
        self._posed: dict[int, PosedMesh] = {}
        self._contexts: dict[tuple[int, str], FrameContext] = {}
        self._bbox: dict[tuple[int, int], np.ndarray] = {}
        self.validate()

    def validate(self) -> None:
        if not self.train_frames or not self.train_cameras:
            raise InvalidInputError("dataset has no training images")
        sizes = {(c.width, c.height) for c in self.cameras}
        if len(sizes) != 1:
            raise InvalidInputError("cameras disagree on image size")
        for f in self.train_frames + self.heldout_frames:
            if not 0 <= f < len(self.poses):
                raise InvalidInputError(f"frame {f} has no pose")
        for f in self.train_frames:
            for c in self.train_cameras:
                for kind in ("frames", "masks", "face_masks"):
                    if not (self.root / kind / f"f{f}_c{c}.png").is_file():
                        raise InvalidInputError(f"missing {kind}/f{f}_c{c}.png")

    def _load(self, kind: str, f: int, c: int) -> np.ndarray:
        key = (kind, f, c)
        if key not in self._images:
            img = load_png(self.root / kind / f"f{f}_c{c}.png")
            cam = self.cameras[c]
            if img.shape[:2] != (cam.height, cam.width):
                raise InvalidInputError(f"{kind}/f{f}_c{c}.png has the wrong size")
            self._images[key] = img > 0.5 if kind != "frames" else img
        return self._images[key]

    def image(self, f: int, c: int) -> np.ndarray:
        return self._load("frames", f, c)

    def mask(self, f: int, c: int) -> np.ndarray:
        return self._load("masks", f, c)

    def face_mask(self, f: int, c: int) -> np.ndarray:
        return self._load("face_masks", f, c)

    @cached_property
    def canonical(self) -> PosedMesh:
        return lbs_pose(self.mesh, canonical_pose(self.mesh.joints))

    def posed(self, f: int) -> PosedMesh:
        if f not in self._posed:
            self._posed[f] = lbs_pose(self.mesh, self.poses[f])
        return self._posed[f]

    def bbox_mask(self, f: int, c: int) -> np.ndarray:
        if (f, c) not in self._bbox:
            self._bbox[(f, c)] = projected_bbox_mask(self.cameras[c], self.posed(f))
        return self._bbox[(f, c)]

    def context(self, f: int, mapping: str = "barycentric", dilation: float = 0.1) -> FrameContext:
        """Training-frame context; face index and bounds are built once and cached."""
        key = (f, mapping)
        if key not in self._contexts:
            frame = self.train_frames.index(f) if f in self.train_frames else None
            self._contexts[key] = FrameContext(
                self.posed(f), self.canonical, self.poses[f].joint_rotations, frame=frame, mapping=mapping, dilation=dilation
            )
        return self._contexts[key]

    @property
    def mean_translation(self) -> np.ndarray:
        return np.mean([self.poses[f].root_translation for f in self.train_frames], axis=0)

    @property
    def pixel_count(self) -> int:
        cam = self.cameras[self.train_cameras[0]]
        return len(self.train_frames) * len(self.train_cameras) * cam.width * cam.height

    def mean_foreground_color(self) -> np.ndarray:
        px = [self.image(f, c)[self.mask(f, c)] for f in self.train_frames for c in self.train_cameras]
        return np.concatenate(px).mean(axis=0)


def novel_pose_context(params: FieldParams | None, pose: Pose, dataset: Dataset, mapping: str = "barycentric", dilation: float = 0.1) -> FrameContext:
    """Zero latent, and lighting queried as if the avatar stood at the mean training placement."""
    posed = lbs_pose(dataset.mesh, pose)
    shift = dataset.mean_translation - pose.root_translation
    latent_dim = params.config.latent_dim if params is not None else 8
    return FrameContext(
        posed, dataset.canonical, pose.joint_rotations, frame=None,
        latent_override=np.zeros(latent_dim), light_shift=shift, mapping=mapping, dilation=dilation,
    )


# --------------------------------------------------------------------------
# optimisation pieces


def lr_schedule(step: int, total_steps: int, lr0: float, factor: float = 0.1) -> float:
    if not 0 <= step <= max(total_steps, 0):
        raise InvalidInputError("step outside the schedule")
    if total_steps == 0:
        return lr0
    return lr0 * factor ** (step / total_steps)


def loss_mse(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInputError("prediction and target counts differ")
    if len(pred) == 0:
        raise InvalidInputError("empty batch")
    return float(((pred - target) ** 2).sum() / len(pred))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def blocks(self) -> dict[str, np.ndarray]:
        out = {f"adam.m.{k}": a for k, a in self.m.items()}
        out.update({f"adam.v.{k}": a for k, a in self.v.items()})
        out["adam.step"] = np.array([float(self.step)])
        return out

    @classmethod
    def from_blocks(cls, blocks: dict[str, np.ndarray]) -> "AdamState":
        st = cls()
        for k, a in blocks.items():
            if k.startswith("adam.m."):
                st.m[k[7:]] = a.copy()
            elif k.startswith("adam.v."):
                st.v[k[7:]] = a.copy()
        if "adam.step" in blocks:
            st.step = int(blocks["adam.step"][0])
        return st


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """In-place Adam update with bias correction; parameters without a gradient are left alone."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for {k}")
        if g.shape != params[k].shape:
            raise InvalidInputError(f"gradient shape mismatch for {k}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for k, g in grads.items():
        m = state.m.setdefault(k, np.zeros_like(params[k]))
        v = state.v.setdefault(k, np.zeros_like(params[k]))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        params[k] -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


@dataclass
class RayBatch:
    frame: int
    camera: int
    pixels: np.ndarray
    rays: Rays
    targets: np.ndarray
    face_rays: int


def sample_ray_batch(dataset: Dataset, config: TrainConfig, rng: np.random.Generator) -> RayBatch:
    """One random training view; a face-region share of rays, the rest over the projected box."""
    f = dataset.train_frames[rng.integers(len(dataset.train_frames))]
    c = dataset.train_cameras[rng.integers(len(dataset.train_cameras))]
    M = config.rays_per_batch
    box = np.argwhere(dataset.bbox_mask(f, c))
    face = np.argwhere(dataset.face_mask(f, c) & dataset.bbox_mask(f, c))
    n_face = math.ceil(config.face_fraction * M) if len(face) else 0
    picks = []
    if n_face:
        picks.append(face[rng.integers(len(face), size=n_face)])
    picks.append(box[rng.integers(len(box), size=M - n_face)])
    yx = np.concatenate(picks)
    pixels = yx[:, ::-1]
    rays = generate_rays(dataset.cameras[c], pixels, frame=f)
    targets = dataset.image(f, c)[yx[:, 0], yx[:, 1]]
    return RayBatch(f, c, pixels, rays, targets, n_face)


def _predict(field_, tape, leaves, ctx: FrameContext, rays: Rays, config: TrainConfig, render: RenderConfig, rng):
    """Graph node for predicted colours of the rays that hit the bounds, and their indices."""
    near, far, hit = ctx.bounds.intersect(rays)
    sel = np.nonzero(hit)[0]
    if len(sel) == 0:
        return None, sel
    K = config.samples
    depths = sample_points(near[sel], far[sel], K, config.jitter, rng)
    o, d = rays.origins[sel], rays.directions[sel]
    pts = (o[:, None, :] + depths[..., None] * d[:, None, :]).reshape(-1, 3)
    dirs = np.repeat(d, K, axis=0)
    warp = warp_samples(ctx, pts, dirs, config.outlier)
    n = len(sel) * K
    if len(warp.keep) == 0:
        return None, sel
    sigma, color, _ = shade_samples(field_, tape, leaves, ctx, warp)
    sigma = ad.reshape(ad.scatter_rows(sigma, warp.keep, n), (len(sel), K))
    color = ad.reshape(ad.scatter_rows(color, warp.keep, n), (len(sel), K, 3))
    return ad.composite(sigma, color, sample_intervals(depths), render.background), sel


def batch_loss(params: FieldParams, dataset: Dataset, batch: RayBatch, config: TrainConfig, rng):
    """Loss value and parameter gradients for one ray batch."""
    field_ = NeuralField(params)
    ctx = dataset.context(batch.frame, config.mapping, config.gamma)
    tape = ad.Tape()
    leaves = field_.leaves(tape, ctx)
    render = RenderConfig(config.samples, dataset.background, config.outlier)
    pred, sel = _predict(field_, tape, leaves, ctx, batch.rays, config, render, rng)
    M = len(batch.rays)
    bg = np.asarray(dataset.background, dtype=np.float64)
    miss = np.ones(M, dtype=bool)
    if pred is not None:
        miss[sel] = False
    miss_err = float(((batch.targets[miss] - bg) ** 2).sum()) / M
    if pred is None:
        return miss_err, {}
    loss = ad.add(ad.scale(ad.mse_loss(pred, batch.targets[sel]), len(sel) / M), miss_err)
    grads = tape.backward(loss, wrt=list(leaves.values()))
    out = {k: grads[v] for k, v in leaves.items() if v in grads}
    return float(loss.value), out


@dataclass
class TrainResult:
    params: FieldParams
    log: list[dict]
    run_dir: Path | None
    state: AdamState


def iters_per_epoch(dataset: Dataset, config: TrainConfig) -> int:
    return max(1, math.ceil(dataset.pixel_count / config.rays_per_batch))


def total_steps(dataset: Dataset, config: TrainConfig) -> int:
    return config.iters if config.iters is not None else config.epochs * iters_per_epoch(dataset, config)


def _save(run_dir: Path, name: str, params: FieldParams, state: AdamState, meta: dict) -> Path:
    path = run_dir / name
    save_checkpoint(path, params, state.blocks(), meta)
    return path


def fit(dataset: Dataset, config: TrainConfig, run_dir=None, resume=None, on_step: Callable[[dict], None] | None = None) -> TrainResult:
    """Train the fields; checkpoints (when ``run_dir`` is given) every epoch and at the end.

    Each step draws from a generator seeded by ``(seed, step)``, so resuming
    from a checkpoint replays exactly the batches an uninterrupted run sees.
    """
    fcfg = config.field_config(dataset.mesh.joints.count)
    if resume is not None:
        params, blocks, _ = load_checkpoint(resume)
        if params.config != fcfg:
            raise ConfigError("checkpoint was trained with a different field configuration")
        state = AdamState.from_blocks(blocks)
    else:
        params = init_params(fcfg, len(dataset.train_frames), config.seed)
        state = AdamState()
    run = Path(run_dir) if run_dir is not None else None
    if run is not None:
        run.mkdir(parents=True, exist_ok=True)
        (run / "config.json").write_text(json.dumps(config.to_json(), indent=1, sort_keys=True))
    per_epoch = iters_per_epoch(dataset, config)
    every = config.checkpoint_every or per_epoch
    total = total_steps(dataset, config)
    log: list[dict] = []
    kept: list[Path] = []
    best = math.inf
    epoch_losses: list[float] = []
    logf = open(run / "train_log.ndjson", "a") if run is not None else None
    try:
        while state.step < total:
            step = state.step
            t0 = time.perf_counter()
            rng = np.random.default_rng([config.seed, step])
            lr = lr_schedule(step, total, config.lr, config.lr_factor)
            batch = sample_ray_batch(dataset, config, rng)
            loss, grads = batch_loss(params, dataset, batch, config, rng)
            if not math.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at step {step}")
            clip_global_norm(grads, config.clip_norm)
            adam_step(params.arrays, grads, state, lr, config.beta1, config.beta2, config.eps)
            rec = {"iter": step, "epoch": step // per_epoch, "loss": loss, "lr": lr, "wall_ms": (time.perf_counter() - t0) * 1e3}
            log.append(rec)
            epoch_losses.append(loss)
            if logf is not None:
                logf.write(json.dumps(rec) + "\n")
                logf.flush()
            if on_step is not None:
                on_step(rec)
            if run is not None and (state.step % every == 0 or state.step == total):
                meta = {"step": state.step, "train": config.to_json()}
                path = _save(run, f"ckpt_{state.step:07d}.bin", params, state, meta)
                kept.append(path)
                while len(kept) > config.keep_last:
                    kept.pop(0).unlink(missing_ok=True)
                mean_loss = float(np.mean(epoch_losses))
                epoch_losses = []
                if mean_loss < best:
                    best = mean_loss
                    shutil.copyfile(path, run / "best.bin")
        if run is not None:
            _save(run, "final.bin", params, state, {"step": state.step, "train": config.to_json()})
    finally:
        if logf is not None:
            logf.close()
    return TrainResult(params, log, run, state)


# --------------------------------------------------------------------------
# evaluation protocol


@dataclass(frozen=True)
class EvalView:
    name: str
    frame: int
    camera: int
    novel_pose: bool


def novel_view_set(dataset: Dataset) -> list[EvalView]:
    return [EvalView(f"f{f}_c{c}", f, c, False) for f in dataset.train_frames for c in dataset.heldout_cameras]


def novel_pose_set(dataset: Dataset) -> list[EvalView]:
    cams = dataset.train_cameras + dataset.heldout_cameras
    return [EvalView(f"f{f}_c{c}", f, c, True) for f in dataset.heldout_frames for c in cams]


def view_context(params: FieldParams, dataset: Dataset, view: EvalView, mapping: str = "barycentric") -> FrameContext:
    if view.novel_pose:
        return novel_pose_context(params, dataset.poses[view.frame], dataset, mapping)
    return dataset.context(view.frame, mapping)


def render_view(params: FieldParams, dataset: Dataset, view: EvalView, mapping: str = "barycentric", samples: int = 64):
    ctx = view_context(params, dataset, view, mapping)
    cfg = RenderConfig(samples=samples, background=dataset.background)
    return render_image(dataset.cameras[view.camera], ctx, NeuralField(params), cfg)


def gt_image(dataset: Dataset, view: EvalView) -> np.ndarray:
    return dataset.image(view.frame, view.camera)


def evaluate(params: FieldParams, dataset: Dataset, views: list[EvalView], mapping: str = "barycentric", samples: int = 64, keep_images: bool = False):
    """Masked PSNR/SSIM over the given views; returns (report, rendered images)."""
    report = EvalReport()
    images = {}
    for v in views:
        img, _ = render_view(params, dataset, v, mapping, samples)
        mask = dataset.bbox_mask(v.frame, v.camera)
        report.add(v.name, img, gt_image(dataset, v), mask)
        if keep_images:
            images[v.name] = img
    return report, images


def constant_baseline(dataset: Dataset, views: list[EvalView]) -> EvalReport:
    """Every pixel painted with the mean training foreground colour."""
    color = dataset.mean_foreground_color()
    report = EvalReport()
    for v in views:
        gt = gt_image(dataset, v)
        report.add(v.name, np.broadcast_to(color, gt.shape), gt, dataset.bbox_mask(v.frame, v.camera))
    return report


def lighting_probe(params: FieldParams, dataset: Dataset, max_samples: int = 8000, seed: int = 0):
    """Predicted lightness against the oracle shading factor at visible surface points.

    Points are the ground-truth ray hits of the training views, so each one
    was seen during training. Returns ``(predicted, oracle)`` arrays.
    """
    from .mesh import vertex_normals
    from .synth import trace

    field_ = NeuralField(params)
    preds, oracle = [], []
    for f in dataset.train_frames:
        posed = dataset.posed(f)
        vn = vertex_normals(posed.vertices, posed.faces)
        for c in dataset.train_cameras:
            cam = dataset.cameras[c]
            rays = generate_rays(cam, cam.pixel_grid())
            hit, face, bary, depth = trace(posed, rays)
            if not hit.any():
                continue
            w = np.concatenate([1.0 - bary[hit].sum(1, keepdims=True), bary[hit]], axis=1)
            n = np.einsum("nk,nkd->nd", w, vn[posed.faces[face[hit]]])
            n /= np.linalg.norm(n, axis=1, keepdims=True)
            x = rays.origins[hit] + depth[hit, None] * rays.directions[hit]
            s = lightness_at(field_, dataset.context(f), x, rays.directions[hit])
            preds.append(s)
            oracle.append(dataset.light.lambert(x, n))
    preds, oracle = np.concatenate(preds), np.concatenate(oracle)
    ok = np.isfinite(preds)
    preds, oracle = preds[ok], oracle[ok]
    if len(preds) > max_samples:
        pick = np.sort(np.random.default_rng(seed).choice(len(preds), max_samples, replace=False))
        preds, oracle = preds[pick], oracle[pick]
    return preds, oracle


def variant_config(base: TrainConfig, variant: str) -> TrainConfig:
    return replace(base, variant=variant)
