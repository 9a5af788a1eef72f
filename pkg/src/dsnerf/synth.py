"""Synthetic ground truth: a posed capsule body under a point light plus ambient.

Images are ray traced exactly (no rasterisation), so the foreground mask is
precisely the set of pixels whose centre ray hits the posed mesh.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidSpecError
from .mesh import (
    BodySpec,
    Pose,
    PosedMesh,
    SkinnedMesh,
    canonical_pose,
    gen_capsule_body,
    lbs_pose,
    pose_from_angles,
    quat_angle,
    vertex_normals,
)
from .render import BoundsHierarchy, Camera, _inverse_directions, generate_rays, save_png

DATASET_VERSION = 1


@dataclass(frozen=True)
class LightSpec:
    position: tuple[float, float, float] = (1.2, -2.0, 2.6)
    intensity: float = 7.0
    ambient: float = 0.3

    def __post_init__(self):
        if self.intensity < 0 or self.ambient < 0:
            raise InvalidSpecError("light intensity and ambient must be non-negative")

    def lambert(self, points, normals) -> np.ndarray:
        """Shading factor ``ambient + intensity * max(0, n.l) / r^2``."""
        to_light = np.asarray(self.position) - points
        r2 = (to_light**2).sum(axis=-1)
        cos = (normals * to_light).sum(axis=-1) / np.sqrt(r2)
        return self.ambient + self.intensity * np.maximum(0.0, cos) / r2

    def to_json(self) -> dict:
        return {"version": DATASET_VERSION, "position": list(self.position), "intensity": self.intensity, "ambient": self.ambient}

    @classmethod
    def from_json(cls, obj: dict) -> "LightSpec":
        return cls(tuple(obj["position"]), float(obj["intensity"]), float(obj["ambient"]))


@dataclass
class Scene:
    mesh: SkinnedMesh
    poses: list[Pose]
    cameras: list[Camera]
    light: LightSpec
    albedo: np.ndarray
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.albedo.shape != self.mesh.vertices.shape:
            raise InvalidSpecError("albedo needs one colour per vertex")
        for p in self.poses:
            if p.joint_count != self.mesh.joints.count:
                raise InvalidSpecError("pose joint count does not match the mesh")


def default_albedo(mesh: SkinnedMesh) -> np.ndarray:
    """Smooth colour gradients over the canonical body, with a distinct head colour."""
    v = mesh.vertices
    x, y, z = v[:, 0], v[:, 1], v[:, 2]
    body = np.stack([0.25 + 0.35 * np.clip((z - 0.4) / 1.1, 0, 1), 0.30 + 0.25 * np.cos(2.5 * x), 0.65 - 0.30 * np.clip(z / 1.5, 0, 1)], axis=1)
    body[:, 1] += 0.1 * np.sin(4.0 * y)
    head = np.zeros(len(v), dtype=bool)
    for (a, b, c), lab in zip(mesh.faces, mesh.region_labels):
        if lab == "head":
            head[[a, b, c]] = True
    tone = np.stack([0.85 + 0.0 * z, 0.62 + 0.1 * np.clip((z - 1.6) / 0.3, -1, 1), 0.45 + 0.0 * z], axis=1)
    out = np.where(head[:, None], tone, body)
    return np.clip(out, 0.05, 0.95)


def trace(posed: PosedMesh, rays, chunk: int = 1024):
    """Closest hit per ray: (hit, face, barycentrics (b1, b2), depth)."""
    R = len(rays)
    best_t = np.full(R, np.inf)
    best_f = np.full(R, -1, dtype=np.int64)
    best_b = np.zeros((R, 2))
    bvh = BoundsHierarchy(posed, dilation=1e-9)
    tri = posed.triangles()
    for s in range(0, R, chunk):
        o = rays.origins[s : s + chunk]
        d = rays.directions[s : s + chunk]
        rr, ff, _, _ = bvh.candidates(o, _inverse_directions(d))
        t, b1, b2, ok = moller_trumbore(o[rr], d[rr], tri[ff])
        rr, ff, t, b1, b2 = rr[ok], ff[ok], t[ok], b1[ok], b2[ok]
        # closest hit per ray; ties go to the lowest face index
        order = np.lexsort((ff, t, rr))
        rr, ff, t, b1, b2 = rr[order], ff[order], t[order], b1[order], b2[order]
        first = np.ones(len(rr), dtype=bool)
        first[1:] = rr[1:] != rr[:-1]
        g = s + rr[first]
        best_t[g] = t[first]
        best_f[g] = ff[first]
        best_b[g] = np.stack([b1[first], b2[first]], axis=1)
    return best_f >= 0, best_f, best_b, best_t


def moller_trumbore(o, d, tri, eps: float = 1e-12):
    """Vectorised ray-triangle test; returns (t, b1, b2, hit) with t > eps."""
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    pvec = np.cross(d, e2)
    det = (e1 * pvec).sum(-1)
    ok = np.abs(det) > eps
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    tvec = o - tri[:, 0]
    b1 = (tvec * pvec).sum(-1) * inv
    qvec = np.cross(tvec, e1)
    b2 = (d * qvec).sum(-1) * inv
    t = (e2 * qvec).sum(-1) * inv
    ok &= (b1 >= 0) & (b2 >= 0) & (b1 + b2 <= 1) & (t > eps)
    return t, b1, b2, ok


def render_groundtruth(scene: Scene, frame: int, camera: Camera | int):
    """Oracle image (H, W, 3), foreground mask and head-region mask."""
    cam = scene.cameras[camera] if isinstance(camera, (int, np.integer)) else camera
    posed = lbs_pose(scene.mesh, scene.poses[frame])
    rays = generate_rays(cam, cam.pixel_grid())
    hit, face, bary, depth = trace(posed, rays)
    img = np.broadcast_to(np.asarray(scene.background, dtype=np.float64), (len(rays), 3)).copy()
    if np.any(hit):
        f = scene.mesh.faces[face[hit]]
        w = np.concatenate([1.0 - bary[hit].sum(1, keepdims=True), bary[hit]], axis=1)
        vn = vertex_normals(posed.vertices, scene.mesh.faces)
        n = np.einsum("nk,nkd->nd", w, vn[f])
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        albedo = np.einsum("nk,nkd->nd", w, scene.albedo[f])
        x = rays.origins[hit] + depth[hit, None] * rays.directions[hit]
        img[hit] = np.clip(albedo * scene.light.lambert(x, n)[:, None], 0.0, 1.0)
    head = np.zeros(len(rays), dtype=bool)
    head[hit] = scene.mesh.head_faces[face[hit]]
    shape = (cam.height, cam.width)
    return img.reshape(shape + (3,)), hit.reshape(shape), head.reshape(shape)


# --------------------------------------------------------------------------
# default scene


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 64
    focal: float = 100.0
    camera_radius: float = 3.2
    camera_height: float = 1.0
    look_at: tuple[float, float, float] = (0.0, 0.0, 0.95)
    train_cameras: int = 4
    heldout_camera_angle: float = 45.0
    train_frames: int = 10
    heldout_frames: int = 3
    min_novelty_deg: float = 30.0
    turn_deg: float = 150.0  # training frames sweep the pelvis yaw over +-turn_deg
    radial: int = 16
    light: LightSpec = field(default_factory=LightSpec)
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "light"}
        d["light"] = self.light.to_json()
        return d


def ring_cameras(spec: SceneSpec) -> list[Camera]:
    """Training cameras evenly spaced on a horizontal ring, then the held-out one."""
    angles = [360.0 * i / spec.train_cameras for i in range(spec.train_cameras)] + [spec.heldout_camera_angle]
    cams = []
    for a in angles:
        t = np.radians(a - 90.0)  # angle 0 looks at the body's front (it faces -y)
        eye = (spec.camera_radius * np.cos(t), spec.camera_radius * np.sin(t), spec.camera_height)
        cams.append(Camera.look_at(eye, spec.look_at, (0.0, 0.0, 1.0), spec.focal, spec.image_size, spec.image_size))
    return cams


# (joint, axis) pairs driven by the trajectories; amplitudes in degrees
_TRAJ = {
    "l_shoulder": ((0, 1, 0), 45.0, 30.0),
    "r_shoulder": ((0, 1, 0), -45.0, 30.0),
    "l_elbow": ((1, 0, 0), 25.0, 25.0),
    "r_elbow": ((1, 0, 0), 25.0, 25.0),
    "l_hip": ((1, 0, 0), 0.0, 22.0),
    "r_hip": ((1, 0, 0), 0.0, 22.0),
    "l_knee": ((1, 0, 0), -15.0, 15.0),
    "r_knee": ((1, 0, 0), -15.0, 15.0),
    "spine": ((0, 1, 0), 0.0, 8.0),
    "neck": ((0, 0, 1), 0.0, 20.0),
}


def training_poses(n: int, rng: np.random.Generator, turn_deg: float = 150.0) -> list[Pose]:
    """Smooth walking-like trajectories with a slow turn and drift of the root."""
    phase = {k: rng.uniform(0, 2 * np.pi) for k in _TRAJ}
    poses = []
    for i in range(n):
        s = i / max(n - 1, 1)
        ang = {}
        for name, (axis, mean, amp) in _TRAJ.items():
            val = mean + amp * np.sin(2 * np.pi * s + phase[name])
            ang[name] = tuple(val * np.asarray(axis, dtype=float))
        ang["pelvis"] = (0.0, 0.0, turn_deg * (2.0 * s - 1.0))
        trans = (0.15 * np.sin(2 * np.pi * s), 0.10 * np.cos(2 * np.pi * s), 0.0)
        poses.append(pose_from_angles(ang, trans))
    return poses


def _pose_distance_deg(a: Pose, b: Pose) -> float:
    """Largest non-root joint rotation difference in degrees."""
    return float(np.degrees(quat_angle(a.joint_rotations[1:], b.joint_rotations[1:]).max()))


def novelty(pose: Pose, reference: list[Pose]) -> float:
    """Distance to the closest reference pose, in the max-joint-angle sense."""
    return min(_pose_distance_deg(pose, r) for r in reference)


def heldout_poses(n: int, train: list[Pose], min_deg: float, rng: np.random.Generator) -> list[Pose]:
    """Poses at the mean training placement, each at least ``min_deg`` from every training pose."""
    t_mean = np.mean([p.root_translation for p in train], axis=0)
    out: list[Pose] = []
    while len(out) < n:
        ang = {}
        for name, (axis, mean, amp) in _TRAJ.items():
            val = mean + rng.uniform(-1.3, 1.3) * amp
            ang[name] = tuple(val * np.asarray(axis, dtype=float))
        ang["pelvis"] = (0.0, 0.0, rng.uniform(-50.0, 50.0))
        # one joint is pushed well outside the training range
        name = ("l_elbow", "r_elbow", "l_knee", "r_knee", "l_shoulder", "r_shoulder")[len(out) % 6]
        axis, mean, amp = _TRAJ[name]
        ang[name] = tuple((mean + np.sign(mean or 1.0) * (amp + min_deg + 5.0)) * np.asarray(axis, dtype=float))
        pose = pose_from_angles(ang, t_mean)
        if novelty(pose, train) >= min_deg:
            out.append(pose)
    return out


def default_scene(spec: SceneSpec = SceneSpec(), seed: int = 0):
    """Scene with training poses first, then held-out ones; returns (scene, split)."""
    rng = np.random.default_rng(seed)
    mesh = gen_capsule_body(BodySpec(radial_segments=spec.radial))
    train = training_poses(spec.train_frames, rng, spec.turn_deg)
    held = heldout_poses(spec.heldout_frames, train, spec.min_novelty_deg, rng)
    scene = Scene(mesh, train + held, ring_cameras(spec), spec.light, default_albedo(mesh), spec.background)
    split = {
        "train_frames": list(range(spec.train_frames)),
        "heldout_frames": list(range(spec.train_frames, spec.train_frames + spec.heldout_frames)),
        "train_cameras": list(range(spec.train_cameras)),
        "heldout_cameras": [spec.train_cameras],
    }
    return scene, split


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True))


def _save_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(mask.astype(np.uint8) * 255).save(path, format="PNG")


def make_dataset(out_dir, spec: SceneSpec = SceneSpec(), seed: int = 0) -> Path:
    """Render every (frame, camera) pair and write the dataset directory."""
    out = Path(out_dir)
    scene, split = default_scene(spec, seed)
    for sub in ("frames", "masks", "face_masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    mesh_doc = scene.mesh.to_json()
    mesh_doc["albedo"] = scene.albedo.tolist()
    _write_json(out / "mesh.json", mesh_doc)
    _write_json(out / "cameras.json", {
        "version": DATASET_VERSION,
        "cameras": [c.to_json() for c in scene.cameras],
        "train": split["train_cameras"],
        "heldout": split["heldout_cameras"],
    })
    _write_json(out / "poses.json", {
        "version": DATASET_VERSION,
        "frames": [p.to_json() for p in scene.poses],
        "train": split["train_frames"],
        "heldout": split["heldout_frames"],
    })
    _write_json(out / "light.json", scene.light.to_json() | {"background": list(scene.background)})
    _write_json(out / "scene.json", {"version": DATASET_VERSION, "seed": seed, "spec": spec.to_json()})
    for f in range(len(scene.poses)):
        for c in range(len(scene.cameras)):
            img, mask, head = render_groundtruth(scene, f, c)
            save_png(out / "frames" / f"f{f}_c{c}.png", img)
            _save_mask(out / "masks" / f"f{f}_c{c}.png", mask)
            _save_mask(out / "face_masks" / f"f{f}_c{c}.png", head)
    return out


def canonical_mesh(mesh: SkinnedMesh) -> PosedMesh:
    return lbs_pose(mesh, canonical_pose(mesh.joints))

