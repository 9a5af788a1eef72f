"""Cameras, geometry-guided ray bounds and the canonical-to-world rendering pipeline.

World points are carried to the canonical body through the barycentric map
(or, for the ablation, inverse skinning), queried there for density and
texture, shaded by the world-space lighting field and alpha-composited.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .barymap import FaceIndex, InverseLbs, LocalCoords, OutlierBounds, encode_local, frames_of, is_outlier, map_direction
from .errors import InvalidIntervalError, InvalidPixelError, InvalidSpecError
from .fields import FieldParams, body_graph, light_graph, normals_from_gradient, pose_graph
from .mesh import PosedMesh, mesh_aabb

MAPPINGS = ("barycentric", "inverse_lbs")


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; ``rotation``/``translation`` map world to camera (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidSpecError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidSpecError("image size must be positive")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise InvalidSpecError("camera rotation is not a proper rotation")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @classmethod
    def look_at(cls, eye, target, up, f: float, width: int, height: int) -> "Camera":
        eye, target, up = (np.asarray(a, dtype=np.float64) for a in (eye, target, up))
        z = target - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, up)
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(f, f, width / 2.0, height / 2.0, R, -R @ eye, width, height)

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Continuous pixel coordinates and camera-space depth."""
        pc = np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            xy = np.stack([self.fx * pc[..., 0] / z + self.cx, self.fy * pc[..., 1] / z + self.cy], axis=-1)
        return xy, z

    def pixel_grid(self) -> np.ndarray:
        """All (x, y) integer pixel positions in row-major order."""
        ys, xs = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([xs.ravel(), ys.ravel()], axis=1)

    def to_json(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Camera":
        return cls(obj["fx"], obj["fy"], obj["cx"], obj["cy"], np.array(obj["rotation"]), np.array(obj["translation"]), int(obj["width"]), int(obj["height"]))


@dataclass(frozen=True)
class Rays:
    origins: np.ndarray
    directions: np.ndarray
    pixels: np.ndarray
    frame: int = -1

    def __len__(self) -> int:
        return len(self.origins)

    def subset(self, sel) -> "Rays":
        return Rays(self.origins[sel], self.directions[sel], self.pixels[sel], self.frame)


def generate_rays(camera: Camera, pixels, frame: int = -1) -> Rays:
    """Rays through pixel centres; ``pixels`` holds (x, y) positions, x along the width."""
    px = np.asarray(pixels, dtype=np.float64).reshape(-1, 2)
    if np.any(px < 0) or np.any(px[:, 0] >= camera.width) or np.any(px[:, 1] >= camera.height):
        raise InvalidPixelError("pixel outside the image")
    d_cam = np.stack(
        [(px[:, 0] + 0.5 - camera.cx) / camera.fx, (px[:, 1] + 0.5 - camera.cy) / camera.fy, np.ones(len(px))],
        axis=1,
    )
    d = d_cam @ camera.rotation
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return Rays(o, d, px, frame)


# --------------------------------------------------------------------------
# geometry-guided bounds


def _slab(o, inv_d, lo, hi):
    """Entry/exit parameters of rays (R,) against boxes (B,), shape (R, B)."""
    t0 = (lo[None] - o[:, None]) * inv_d[:, None]
    t1 = (hi[None] - o[:, None]) * inv_d[:, None]
    tn = np.minimum(t0, t1).max(axis=2)
    tf = np.maximum(t0, t1).min(axis=2)
    return tn, tf


def _inverse_directions(d):
    with np.errstate(divide="ignore"):
        inv = 1.0 / d
    # a zero component gives +-inf slabs, which the comparisons handle;
    # nan only appears for 0 * inf, so nudge exact zeros instead
    return np.where(d == 0.0, 1e300, inv)


class BoundsHierarchy:
    """Two-level box hierarchy over dilated per-face AABBs of one posed mesh."""

    def __init__(self, posed: PosedMesh, dilation: float = 0.1, leaf_size: int = 16):
        if dilation < 0:
            raise InvalidSpecError("dilation must be non-negative")
        tri = posed.triangles()
        self.face_lo = tri.min(axis=1) - dilation
        self.face_hi = tri.max(axis=1) + dilation
        n = len(tri)
        # faces are grouped along a Morton-like order of their centroids
        order = np.lexsort(np.floor((tri.mean(axis=1) - self.face_lo.min(0)) / 0.08).T[::-1])
        pad = (-n) % leaf_size
        self.order = np.concatenate([order, np.full(pad, order[-1])]).reshape(-1, leaf_size)
        self.node_lo = self.face_lo[self.order].min(axis=1)
        self.node_hi = self.face_hi[self.order].max(axis=1)
        box = mesh_aabb(posed, dilation)
        self.lo, self.hi = box.lo, box.hi

    def candidates(self, origins, inv_d):
        """(ray, face) pairs whose boxes the rays cross, with slab entry/exit."""
        tn, tf = _slab(origins, inv_d, self.node_lo, self.node_hi)
        r_idx, n_idx = np.nonzero((tn <= tf) & (tf >= 0))
        faces = self.order[n_idx]
        rr = np.repeat(r_idx, faces.shape[1])
        ff = faces.ravel()
        t0 = (self.face_lo[ff] - origins[rr]) * inv_d[rr]
        t1 = (self.face_hi[ff] - origins[rr]) * inv_d[rr]
        fn = np.minimum(t0, t1).max(axis=1)
        fx = np.maximum(t0, t1).min(axis=1)
        ok = (fn <= fx) & (fx >= 0)
        return rr[ok], ff[ok], fn[ok], fx[ok]

    def intersect(self, rays: Rays, chunk: int = 2048):
        """``(near, far, hit)`` of the union of face boxes; near is clamped at 0."""
        R = len(rays)
        near = np.full(R, np.inf)
        far = np.full(R, -np.inf)
        for s in range(0, R, chunk):
            o = rays.origins[s : s + chunk]
            rr, _, fn, fx = self.candidates(o, _inverse_directions(rays.directions[s : s + chunk]))
            np.minimum.at(near[s : s + chunk], rr, fn)
            np.maximum.at(far[s : s + chunk], rr, fx)
        hit = far >= near
        near = np.where(hit, np.maximum(near, 0.0), 0.0)
        far = np.where(hit, far, 0.0)
        hit &= far > near
        return near, far, hit


def ray_bounds(rays: Rays, posed: PosedMesh, dilation: float = 0.1):
    return BoundsHierarchy(posed, dilation).intersect(rays)


def sample_points(near, far, K: int, jitter: bool = False, rng: np.random.Generator | None = None) -> np.ndarray:
    """Stratified depths, one per equal bin: midpoints, or uniform inside each bin with ``jitter``."""
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    if K < 2:
        raise InvalidSpecError("need at least two samples per ray")
    if np.any(~(near < far)):
        raise InvalidIntervalError("near must be below far")
    if jitter:
        if rng is None:
            raise InvalidSpecError("jittered sampling needs a generator")
        u = rng.random((len(near), K))
    else:
        u = np.full((len(near), K), 0.5)
    frac = (np.arange(K) + u) / K
    depths = near[:, None] + (far - near)[:, None] * frac
    # strictly increasing even if a draw lands exactly on a bin edge
    depths = np.maximum.accumulate(depths, axis=1)
    return depths


def sample_intervals(depths: np.ndarray) -> np.ndarray:
    """Spacing to the next sample; the last one repeats its predecessor."""
    d = np.diff(depths, axis=1)
    return np.concatenate([d, d[:, -1:]], axis=1)


# --------------------------------------------------------------------------
# compositing


@dataclass
class SampleBatch:
    depths: np.ndarray
    deltas: np.ndarray
    sigma: np.ndarray
    color: np.ndarray
    outlier: np.ndarray

    def __post_init__(self):
        R, K = self.depths.shape
        if self.sigma.shape != (R, K) or self.color.shape != (R, K, 3) or self.outlier.shape != (R, K):
            raise InvalidSpecError("sample batch arrays disagree in shape")


def composite(batch: SampleBatch, background=(0.0, 0.0, 0.0), clamp: bool = True):
    """Pixel colours (R, 3) and accumulated opacity (R,)."""
    c = np.clip(batch.color, 0.0, 1.0) if clamp else batch.color
    w, _, t_end = ad.composite_weights(batch.sigma, batch.deltas)
    rgb = (w[..., None] * c).sum(axis=1) + t_end[:, None] * np.asarray(background, dtype=np.float64)
    return rgb, 1.0 - t_end


def transmittance(sigma: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    return ad.composite_weights(sigma, deltas)[1]


# --------------------------------------------------------------------------
# frame contexts and the per-sample pipeline


@dataclass
class FrameContext:
    """Everything about one frame that the per-sample pipeline needs.

    ``light_shift`` is added to world points before they reach the lighting
    field; it moves a novel-pose avatar to the training placement.
    """

    world: PosedMesh
    canonical: PosedMesh
    joint_rotations: np.ndarray
    frame: int | None = None
    latent_override: np.ndarray | None = None
    light_shift: np.ndarray = field(default_factory=lambda: np.zeros(3))
    mapping: str = "barycentric"
    dilation: float = 0.1
    _index: FaceIndex | None = None
    _bounds: BoundsHierarchy | None = None
    _ilbs: InverseLbs | None = None

    def __post_init__(self):
        if self.mapping not in MAPPINGS:
            raise InvalidSpecError(f"unknown mapping {self.mapping!r}")

    @property
    def index(self) -> FaceIndex:
        if self._index is None:
            self._index = FaceIndex(self.world)
        return self._index

    @property
    def bounds(self) -> BoundsHierarchy:
        if self._bounds is None:
            self._bounds = BoundsHierarchy(self.world, self.dilation)
        return self._bounds

    @property
    def inverse_lbs(self) -> InverseLbs:
        if self._ilbs is None:
            self._ilbs = InverseLbs(self.world, 4)
        return self._ilbs


@dataclass
class Warp:
    """World samples that survived the outlier test, carried to the canonical body."""

    keep: np.ndarray  # flat indices into the (R*K) sample grid
    p_world: np.ndarray
    d_world: np.ndarray
    p_canon: np.ndarray
    coords: LocalCoords
    canon_to_world: np.ndarray | None = None  # per-point 3x3, inverse-LBS only


def warp_samples(ctx: FrameContext, p_world: np.ndarray, d_world: np.ndarray, bounds: OutlierBounds) -> Warp:
    coords = encode_local(ctx.world, p_world, ctx.index)
    keep = np.nonzero(~is_outlier(coords, bounds))[0]
    coords = coords[keep]
    pw, dw = p_world[keep], d_world[keep]
    if ctx.mapping == "barycentric":
        pc = frames_of(ctx.canonical).decode(coords.face_idx, coords.u, coords.v, coords.h)
        return Warp(keep, pw, dw, pc, coords)
    pc, g_world, g_canon = ctx.inverse_lbs.map(pw, ctx.canonical.pose, return_transforms=True)
    M = g_world[:, :3, :3] @ np.linalg.inv(g_canon[:, :3, :3])
    return Warp(keep, pw, dw, pc, coords, M)


def canonical_normals_to_world(ctx: FrameContext, warp: Warp, n_canon: np.ndarray) -> np.ndarray:
    if warp.canon_to_world is not None:
        n = np.einsum("nij,nj->ni", warp.canon_to_world, n_canon)
        return n / np.linalg.norm(n, axis=1, keepdims=True)
    canon_coords = LocalCoords(warp.coords.face_idx, warp.coords.u, warp.coords.v, warp.coords.h)
    return map_direction(ctx.canonical, ctx.world, canon_coords, n_canon)


class NeuralField:
    """Binds field parameters to the graph builders the pipeline calls."""

    def __init__(self, params: FieldParams):
        self.params = params
        self.config = params.config
        self.light_mode = params.config.light_mode

    def leaves(self, tape: ad.Tape, ctx: FrameContext | None = None) -> dict[str, ad.Var]:
        """Parameter leaves; the latent table is left out when ``ctx`` does not index it."""
        if ctx is None or (ctx.frame is not None and ctx.latent_override is None):
            return self.params.attach(tape)
        return {k: tape.var(self.params.arrays[k], name=k) for k in self.params.arrays if k != "latent"}

    def conditioning(self, tape, leaves, ctx: FrameContext):
        J = pose_graph(self.config, leaves, ctx.joint_rotations)
        if ctx.latent_override is not None:
            latent = tape.const(np.asarray(ctx.latent_override, dtype=np.float64).reshape(1, -1))
        elif ctx.frame is None:
            latent = tape.const(np.zeros((1, self.config.latent_dim)))
        else:
            latent = ad.take_row(leaves["latent"], ctx.frame)
        return J, latent

    def body(self, tape, leaves, cond, pc: ad.Var):
        J, latent = cond
        return body_graph(self.config, leaves, pc, J, latent)

    def light(self, tape, leaves, pw, dw, nw, tex):
        return light_graph(self.config, leaves, pw, dw, nw, tex)


def shade_samples(field_, tape: ad.Tape, leaves, ctx: FrameContext, warp: Warp):
    """Density (N, 1) and colour (N, 3) graph nodes for the kept samples."""
    cond = field_.conditioning(tape, leaves, ctx)
    pc = tape.var(warp.p_canon)
    sigma, tex = field_.body(tape, leaves, cond, pc)
    grad = tape.backward(sigma, seed=np.ones(sigma.shape), wrt=[pc])[pc]
    fallback = frames_of(ctx.canonical).normal[warp.coords.face_idx]
    n_canon = normals_from_gradient(grad, fallback)
    n_world = canonical_normals_to_world(ctx, warp, n_canon)
    pw_light = warp.p_world + ctx.light_shift
    if field_.light_mode == "none":
        color = tex
    elif field_.light_mode == "color":
        color = field_.light(tape, leaves, pw_light, warp.d_world, n_world, tex)
    else:
        s = field_.light(tape, leaves, pw_light, warp.d_world, n_world, None)
        color = ad.mul(s, tex)
    return sigma, color, n_world


def lightness_at(field_, ctx: FrameContext, p_world, d_world, bounds: OutlierBounds = OutlierBounds()):
    """Scalar lightness the pipeline assigns to world points; NaN for outliers."""
    if field_.light_mode != "scalar":
        raise InvalidSpecError("lightness is only defined for the scalar lighting mode")
    p_world = np.asarray(p_world, dtype=np.float64).reshape(-1, 3)
    d_world = np.broadcast_to(np.asarray(d_world, dtype=np.float64), p_world.shape)
    warp = warp_samples(ctx, p_world, d_world, bounds)
    out = np.full(len(p_world), np.nan)
    if len(warp.keep):
        tape = ad.Tape()
        leaves = field_.leaves(tape, ctx)
        cond = field_.conditioning(tape, leaves, ctx)
        pc = tape.var(warp.p_canon)
        sigma, _ = field_.body(tape, leaves, cond, pc)
        grad = tape.backward(sigma, seed=np.ones(sigma.shape), wrt=[pc])[pc]
        n_canon = normals_from_gradient(grad, frames_of(ctx.canonical).normal[warp.coords.face_idx])
        n_world = canonical_normals_to_world(ctx, warp, n_canon)
        s = field_.light(tape, leaves, warp.p_world + ctx.light_shift, warp.d_world, n_world, None)
        out[warp.keep] = s.value[:, 0]
    return out


@dataclass(frozen=True)
class RenderConfig:
    samples: int = 64
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    outlier: OutlierBounds = OutlierBounds()
    chunk: int = 1024
    jitter: bool = False


def march(rays: Rays, ctx: FrameContext, config: RenderConfig, rng=None):
    """Bounded rays plus their sample depths and world sample points."""
    near, far, hit = ctx.bounds.intersect(rays)
    sel = np.nonzero(hit)[0]
    depths = sample_points(near[sel], far[sel], config.samples, config.jitter, rng) if len(sel) else np.zeros((0, config.samples))
    o, d = rays.origins[sel], rays.directions[sel]
    pts = o[:, None, :] + depths[..., None] * d[:, None, :]
    dirs = np.broadcast_to(d[:, None, :], pts.shape)
    return sel, depths, pts.reshape(-1, 3), dirs.reshape(-1, 3)


def evaluate_samples(depths: np.ndarray, rays: Rays, ctx: FrameContext, field_, bounds: OutlierBounds = OutlierBounds()) -> SampleBatch:
    """Run the per-sample pipeline on given depths (R, K) for ``rays``."""
    depths = np.asarray(depths, dtype=np.float64)
    R, K = depths.shape
    pts = rays.origins[:, None, :] + depths[..., None] * rays.directions[:, None, :]
    dirs = np.broadcast_to(rays.directions[:, None, :], pts.shape).reshape(-1, 3)
    warp = warp_samples(ctx, pts.reshape(-1, 3), dirs, bounds)
    sigma = np.zeros(R * K)
    color = np.zeros((R * K, 3))
    if len(warp.keep):
        tape = ad.Tape()
        leaves = field_.leaves(tape, ctx)
        s, c, _ = shade_samples(field_, tape, leaves, ctx, warp)
        sigma[warp.keep] = s.value[:, 0]
        color[warp.keep] = np.broadcast_to(c.value, (len(warp.keep), 3))
    outlier = np.ones(R * K, dtype=bool)
    outlier[warp.keep] = False
    return SampleBatch(depths, sample_intervals(depths), sigma.reshape(R, K), color.reshape(R, K, 3), outlier.reshape(R, K))


def render_rays(rays: Rays, ctx: FrameContext, field_, config: RenderConfig, rng=None):
    """Colours (R, 3) and opacity (R,); rays that miss the bounds get the background."""
    rgb = np.broadcast_to(np.asarray(config.background, dtype=np.float64), (len(rays), 3)).copy()
    alpha = np.zeros(len(rays))
    near, far, hit = ctx.bounds.intersect(rays)
    sel = np.nonzero(hit)[0]
    for s in range(0, len(sel), config.chunk):
        idx = sel[s : s + config.chunk]
        depths = sample_points(near[idx], far[idx], config.samples, config.jitter, rng)
        batch = evaluate_samples(depths, rays.subset(idx), ctx, field_, config.outlier)
        rgb[idx], alpha[idx] = composite(batch, config.background)
    return rgb, alpha


def render_image(camera: Camera, ctx: FrameContext, field_, config: RenderConfig = RenderConfig()):
    """Image (H, W, 3) in [0, 1] and opacity (H, W)."""
    if isinstance(field_, FieldParams):
        field_ = NeuralField(field_)
    rays = generate_rays(camera, camera.pixel_grid())
    rgb, alpha = render_rays(rays, ctx, field_, config)
    return rgb.reshape(camera.height, camera.width, 3), alpha.reshape(camera.height, camera.width)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """Display conversion is a plain clamp, no gamma."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def save_opacity_png(path, alpha: np.ndarray) -> None:
    a = np.round(np.clip(alpha, 0.0, 1.0) * 65535.0).astype(np.uint16)
    Image.fromarray(a).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype == np.uint16 or arr.dtype == np.int32:
        return arr.astype(np.float64) / 65535.0
    arr = arr.astype(np.float64) / 255.0
    return arr[..., :3] if arr.ndim == 3 else arr


def write_image_pair(out_dir, stem: str, img: np.ndarray, alpha: np.ndarray | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_png(out / f"{stem}.png", img)
    if alpha is not None:
        save_opacity_png(out / f"{stem}_alpha.png", alpha)
    return out / f"{stem}.png"
