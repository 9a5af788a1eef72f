"""Skinned triangle meshes, linear blend skinning and a synthetic capsule body.

Quaternions are stored scalar-first, ``(w, x, y, z)``. The world frame is
z-up; the synthetic body stands on the ``z = 0`` plane facing ``-y``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import DegenerateFaceError, InvalidPoseError, InvalidSpecError, MeshFormatError

MESH_FORMAT_VERSION = 1
REGION_LABELS = ("head", "body", "limb")
MIN_FACE_AREA = 1e-12


# --------------------------------------------------------------------------
# quaternion helpers


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_multiply(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_to_matrix(q) -> np.ndarray:
    """Rotation matrices for (..., 4) unit quaternions."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def matrix_to_quat(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2])
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = 2.0 * np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2])
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1])
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_angle(a, b) -> np.ndarray:
    """Rotation angle (radians) separating two unit quaternions."""
    d = np.abs(np.sum(np.asarray(a) * np.asarray(b), axis=-1))
    return 2.0 * np.arccos(np.clip(d, 0.0, 1.0))


def _readonly(a, dtype=np.float64) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# data model


@dataclass(frozen=True, eq=False)
class JointTree:
    parents: np.ndarray
    rest_offsets: np.ndarray
    names: tuple[str, ...] = ()

    def __post_init__(self):
        parents = _readonly(self.parents, np.int64)
        offsets = _readonly(self.rest_offsets)
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", offsets)
        object.__setattr__(self, "names", tuple(self.names))
        n = len(parents)
        if n == 0:
            raise MeshFormatError("joint tree is empty")
        if offsets.shape != (n, 3):
            raise MeshFormatError(f"rest_offsets must be ({n}, 3), got {offsets.shape}")
        if parents[0] != -1:
            raise MeshFormatError("joint 0 must be the root (parent -1)")
        for j in range(1, n):
            # parents precede children, which rules out cycles and extra roots
            if not 0 <= parents[j] < j:
                raise MeshFormatError(f"joint {j} has invalid parent {parents[j]}")
        if self.names and len(self.names) != n:
            raise MeshFormatError("joint names do not match joint count")

    @property
    def count(self) -> int:
        return len(self.parents)

    def rest_positions(self) -> np.ndarray:
        pos = np.zeros((self.count, 3))
        for j in range(self.count):
            p = self.parents[j]
            pos[j] = self.rest_offsets[j] + (pos[p] if p >= 0 else 0.0)
        return pos


@dataclass(frozen=True, eq=False)
class Pose:
    joint_rotations: np.ndarray
    root_translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _readonly(self.joint_rotations)
        t = _readonly(self.root_translation)
        if q.ndim != 2 or q.shape[1] != 4:
            raise InvalidPoseError(f"joint_rotations must be (J, 4), got {q.shape}")
        if t.shape != (3,):
            raise InvalidPoseError("root_translation must be a 3-vector")
        norms = np.linalg.norm(q, axis=1)
        if not np.all(np.abs(norms - 1.0) <= 1e-9):
            raise InvalidPoseError("joint rotations must be unit quaternions")
        object.__setattr__(self, "joint_rotations", q)
        object.__setattr__(self, "root_translation", t)

    @property
    def joint_count(self) -> int:
        return len(self.joint_rotations)

    @classmethod
    def identity(cls, joint_count: int) -> "Pose":
        q = np.zeros((joint_count, 4))
        q[:, 0] = 1.0
        return cls(q, np.zeros(3))

    def with_translation(self, t) -> "Pose":
        return Pose(self.joint_rotations, np.asarray(t, dtype=np.float64))

    def rigidly_transformed(self, rotation, translation, joints: JointTree) -> "Pose":
        """The pose whose skinned mesh is ``R @ lbs(self) + t``."""
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        q = self.joint_rotations.copy()
        q[0] = quat_normalize(quat_multiply(matrix_to_quat(R), q[0]))
        root = joints.rest_offsets[0]
        new_t = R @ (self.root_translation + root) + t - root
        return Pose(q, new_t)

    def to_json(self) -> dict:
        return {
            "joint_rotations": self.joint_rotations.tolist(),
            "root_translation": self.root_translation.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Pose":
        # re-normalize to absorb decimal round-off in hand-written files
        q = quat_normalize(np.asarray(obj["joint_rotations"], dtype=np.float64))
        return cls(q, np.asarray(obj.get("root_translation", [0.0, 0.0, 0.0]), dtype=np.float64))


@dataclass(frozen=True, eq=False)
class SkinnedMesh:
    vertices: np.ndarray
    faces: np.ndarray
    joints: JointTree
    blend_weights: np.ndarray
    region_labels: tuple[str, ...]

    def __post_init__(self):
        v = _readonly(self.vertices)
        f = _readonly(self.faces, np.int64)
        w = _readonly(self.blend_weights)
        labels = tuple(self.region_labels)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "blend_weights", w)
        object.__setattr__(self, "region_labels", labels)
        validate_mesh(self)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    @property
    def head_faces(self) -> np.ndarray:
        return np.array([lab == "head" for lab in self.region_labels], dtype=bool)

    def to_json(self) -> dict:
        obj = {
            "version": MESH_FORMAT_VERSION,
            "vertices": self.vertices.tolist(),
            "faces": self.faces.tolist(),
            "joints": {
                "parents": self.joints.parents.tolist(),
                "rest_offsets": self.joints.rest_offsets.tolist(),
            },
            "blend_weights": self.blend_weights.tolist(),
            "region_labels": list(self.region_labels),
        }
        if self.joints.names:
            obj["joints"]["names"] = list(self.joints.names)
        return obj

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def from_json(cls, obj: dict) -> "SkinnedMesh":
        if obj.get("version") != MESH_FORMAT_VERSION:
            raise MeshFormatError(f"unsupported mesh version {obj.get('version')!r}")
        try:
            joints = JointTree(
                np.asarray(obj["joints"]["parents"], dtype=np.int64),
                np.asarray(obj["joints"]["rest_offsets"], dtype=np.float64).reshape(-1, 3),
                tuple(obj["joints"].get("names", ())),
            )
            return cls(
                np.asarray(obj["vertices"], dtype=np.float64).reshape(-1, 3),
                np.asarray(obj["faces"], dtype=np.int64).reshape(-1, 3),
                joints,
                np.asarray(obj["blend_weights"], dtype=np.float64),
                tuple(obj["region_labels"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, MeshFormatError):
                raise
            raise MeshFormatError(f"malformed mesh document: {exc}") from exc

    @classmethod
    def load(cls, path) -> "SkinnedMesh":
        return cls.from_json(json.loads(Path(path).read_text()))


def face_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


def validate_mesh(mesh: SkinnedMesh) -> None:
    v, f, w = mesh.vertices, mesh.faces, mesh.blend_weights
    if v.ndim != 2 or v.shape[1] != 3 or len(v) == 0:
        raise MeshFormatError("vertices must be a non-empty (V, 3) array")
    if f.ndim != 2 or f.shape[1] != 3 or len(f) == 0:
        raise MeshFormatError("faces must be a non-empty (F, 3) array")
    if f.min() < 0 or f.max() >= len(v):
        raise MeshFormatError("face references an out-of-range vertex")
    if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
        raise MeshFormatError("face with repeated vertex index")
    if np.any(face_areas(v, f) <= MIN_FACE_AREA):
        raise MeshFormatError("face with area below 1e-12 m^2")
    if w.shape != (len(v), mesh.joints.count):
        raise MeshFormatError(f"blend_weights must be ({len(v)}, {mesh.joints.count}), got {w.shape}")
    if np.any(w < 0) or np.any(np.abs(w.sum(axis=1) - 1.0) > 1e-9):
        raise MeshFormatError("blend weights must be non-negative rows summing to 1")
    if len(mesh.region_labels) != len(f):
        raise MeshFormatError("one region label per face required")
    bad = set(mesh.region_labels) - set(REGION_LABELS)
    if bad:
        raise MeshFormatError(f"unknown region labels {sorted(bad)}")


@dataclass(frozen=True, eq=False)
class PosedMesh:
    vertices: np.ndarray
    source: SkinnedMesh
    pose: Pose

    def __post_init__(self):
        object.__setattr__(self, "vertices", _readonly(self.vertices))

    @property
    def faces(self) -> np.ndarray:
        return self.source.faces

    @property
    def face_count(self) -> int:
        return len(self.source.faces)

    def triangles(self) -> np.ndarray:
        return self.vertices[self.source.faces]

    def transformed(self, rotation, translation) -> "PosedMesh":
        """A rigidly moved copy; ``pose`` is updated to stay consistent."""
        R = np.asarray(rotation, dtype=np.float64)
        t = np.asarray(translation, dtype=np.float64)
        pose = self.pose.rigidly_transformed(R, t, self.source.joints)
        return PosedMesh(self.vertices @ R.T + t, self.source, pose)


@dataclass(frozen=True)
class FaceFrame:
    origin: np.ndarray
    edge_u: np.ndarray
    edge_v: np.ndarray
    unit_normal: np.ndarray


@dataclass(frozen=True)
class AABB:
    lo: np.ndarray
    hi: np.ndarray

    def contains(self, points, tol: float = 0.0) -> np.ndarray:
        p = np.asarray(points)
        return np.all((p >= self.lo - tol) & (p <= self.hi + tol), axis=-1)

    @property
    def corners(self) -> np.ndarray:
        lo, hi = self.lo, self.hi
        return np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])


# --------------------------------------------------------------------------
# skinning


def joint_transforms(joints: JointTree, pose: Pose) -> np.ndarray:
    """Per-joint skinning transforms ``G_j(pose) @ G_j(rest)^-1`` as (J, 4, 4)."""
    if pose.joint_count != joints.count:
        raise InvalidPoseError(f"pose has {pose.joint_count} rotations, mesh has {joints.count} joints")
    rot = quat_to_matrix(pose.joint_rotations)
    world = np.zeros((joints.count, 4, 4))
    for j in range(joints.count):
        local = np.eye(4)
        local[:3, :3] = rot[j]
        local[:3, 3] = joints.rest_offsets[j]
        p = joints.parents[j]
        if p < 0:
            local[:3, 3] += pose.root_translation
            world[j] = local
        else:
            world[j] = world[p] @ local
    rest = joints.rest_positions()
    skin = world.copy()
    skin[:, :3, 3] -= np.einsum("jab,jb->ja", world[:, :3, :3], rest)
    return skin


def blended_transforms(weights: np.ndarray, transforms: np.ndarray) -> np.ndarray:
    return np.einsum("vj,jab->vab", weights, transforms)


def apply_transforms(transforms: np.ndarray, points: np.ndarray) -> np.ndarray:
    return np.einsum("vab,vb->va", transforms[:, :3, :3], points) + transforms[:, :3, 3]


def lbs_pose(mesh: SkinnedMesh, pose: Pose) -> PosedMesh:
    blended = blended_transforms(mesh.blend_weights, joint_transforms(mesh.joints, pose))
    return PosedMesh(apply_transforms(blended, mesh.vertices), mesh, pose)


def face_frame(posed: PosedMesh, face_idx: int) -> FaceFrame:
    faces = posed.faces
    if not 0 <= face_idx < len(faces):
        raise IndexError(f"face index {face_idx} out of range")
    a, b, c = posed.vertices[faces[face_idx]]
    eu, ev = b - a, c - a
    cross = np.cross(eu, ev)
    norm = np.linalg.norm(cross)
    if 0.5 * norm < MIN_FACE_AREA:
        raise DegenerateFaceError(f"face {face_idx} is degenerate in this pose")
    return FaceFrame(a.copy(), eu, ev, cross / norm)


def face_frames(vertices: np.ndarray, faces: np.ndarray):
    """Vectorised :func:`face_frame` over all faces: origins, edges, unit normals."""
    tri = vertices[faces]
    o = tri[:, 0]
    eu = tri[:, 1] - o
    ev = tri[:, 2] - o
    cross = np.cross(eu, ev)
    norm = np.linalg.norm(cross, axis=1)
    bad = 0.5 * norm < MIN_FACE_AREA
    if np.any(bad):
        raise DegenerateFaceError(f"{int(bad.sum())} degenerate faces, first is {int(np.argmax(bad))}")
    return o, eu, ev, cross / norm[:, None]


def mesh_aabb(posed: PosedMesh, dilation: float = 0.0) -> AABB:
    if dilation < 0:
        raise ValueError("dilation must be non-negative")
    v = posed.vertices
    return AABB(v.min(axis=0) - dilation, v.max(axis=0) + dilation)


def vertex_normals(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Area-weighted vertex normals."""
    tri = vertices[faces]
    fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    vn = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(vn, faces[:, k], fn)
    return vn / np.linalg.norm(vn, axis=1, keepdims=True)


# --------------------------------------------------------------------------
# topology checks


def face_components(faces: np.ndarray, vertex_count: int | None = None) -> int:
    """Number of connected components of faces linked through shared vertices."""
    n_f = len(faces)
    n_v = int(faces.max()) + 1 if vertex_count is None else vertex_count
    rows = np.repeat(np.arange(n_f), 3)
    inc = coo_matrix((np.ones(3 * n_f), (rows, faces.ravel())), shape=(n_f, n_v)).tocsr()
    adj = inc @ inc.T
    n, _ = connected_components(adj, directed=False)
    return int(n)


def is_watertight(faces: np.ndarray) -> bool:
    """Every directed edge is matched by exactly one opposite edge."""
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fwd = {tuple(x) for x in e.tolist()}
    if len(fwd) != len(e):
        return False
    return all((b, a) in fwd for a, b in fwd)


def signed_volume(vertices: np.ndarray, faces: np.ndarray) -> float:
    tri = vertices[faces]
    return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)


def _segments_hit_triangles(p0, p1, tri, eps=1e-12):
    """Whether each segment p0->p1 crosses the matching triangle (Moller-Trumbore)."""
    d = p1 - p0
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    h = np.cross(d, e2)
    a = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(a) > eps
    f = np.where(ok, 1.0 / np.where(ok, a, 1.0), 0.0)
    s = p0 - tri[:, 0]
    u = f * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    v = f * np.einsum("ij,ij->i", d, q)
    t = f * np.einsum("ij,ij->i", e2, q)
    return ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t >= 0) & (t <= 1)


def self_intersections(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Pairs of vertex-disjoint faces whose triangles intersect.

    Candidate pairs come from a centroid radius search; each pair is then
    tested edge-against-triangle in both directions. Coplanar contact is not
    reported.
    """
    tri = vertices[faces]
    cent = tri.mean(axis=1)
    radius = np.linalg.norm(tri - cent[:, None], axis=2).max()
    pairs = cKDTree(cent).query_pairs(2.0 * radius, output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    fa, fb = faces[pairs[:, 0]], faces[pairs[:, 1]]
    shared = (fa[:, :, None] == fb[:, None, :]).any(axis=(1, 2))
    pairs = pairs[~shared]
    ta, tb = tri[pairs[:, 0]], tri[pairs[:, 1]]
    hit = np.zeros(len(pairs), dtype=bool)
    for x, y in ((ta, tb), (tb, ta)):
        for i, j in ((0, 1), (1, 2), (2, 0)):
            hit |= _segments_hit_triangles(x[:, i], x[:, j], y)
    return pairs[hit]


# --------------------------------------------------------------------------
# synthetic capsule body

JOINT_NAMES = (
    "pelvis",
    "spine",
    "chest",
    "neck",
    "l_shoulder",
    "l_elbow",
    "r_shoulder",
    "r_elbow",
    "l_hip",
    "l_knee",
    "r_hip",
    "r_knee",
)
JOINT_PARENTS = (-1, 0, 1, 2, 2, 4, 2, 6, 0, 8, 0, 10)
BODY_JOINT_COUNT = len(JOINT_NAMES)


@dataclass(frozen=True)
class BodySpec:
    radial_segments: int = 32
    torso_radius: float = 0.15
    torso_bottom: float = 0.95
    torso_top: float = 1.45
    cylinder_rings: int = 11
    neck_latitude: float = 70.0
    head_radius: float = 0.11
    head_center_z: float = 1.73
    head_rings: int = 11
    shoulder_x: float = 0.20
    shoulder_z: float = 1.38
    upper_arm: float = 0.28
    forearm: float = 0.26
    arm_radii: tuple[float, float] = (0.05, 0.04)
    hip_x: float = 0.072
    hip_z: float = 0.82
    thigh: float = 0.38
    shin: float = 0.38
    leg_radii: tuple[float, float] = (0.06, 0.045)
    limb_ring_spacing: float = 0.04

    def validate(self) -> None:
        if self.radial_segments < 8:
            raise InvalidSpecError("radial_segments must be at least 8")
        if self.radial_segments % 4:
            raise InvalidSpecError("radial_segments must be a multiple of 4")
        if self.cylinder_rings < 3 or self.head_rings < 3:
            raise InvalidSpecError("too few rings")
        if min(self.arm_radii + self.leg_radii) <= 0 or self.torso_radius <= 0:
            raise InvalidSpecError("radii must be positive")
        if self.limb_ring_spacing <= 0:
            raise InvalidSpecError("limb_ring_spacing must be positive")
        if not 0 < self.neck_latitude < 90:
            raise InvalidSpecError("neck_latitude must lie in (0, 90)")

    def joint_positions(self) -> np.ndarray:
        sx, sz, hx, hz = self.shoulder_x, self.shoulder_z, self.hip_x, self.hip_z
        tb, tt = self.torso_bottom, self.torso_top
        neck_z = tt + self.torso_radius * np.sin(np.radians(self.neck_latitude))
        return np.array(
            [
                [0, 0, tb],
                [0, 0, tb + 0.4 * (tt - tb)],
                [0, 0, tb + 0.8 * (tt - tb)],
                [0, 0, neck_z],
                [sx, 0, sz],
                [sx + self.upper_arm, 0, sz],
                [-sx, 0, sz],
                [-sx - self.upper_arm, 0, sz],
                [hx, 0, hz],
                [hx, 0, hz - self.thigh],
                [-hx, 0, hz],
                [-hx, 0, hz - self.thigh],
            ],
            dtype=np.float64,
        )

    def bone_ends(self) -> np.ndarray:
        """End point of the segment each joint drives."""
        pos = self.joint_positions()
        ends = np.empty_like(pos)
        ends[0], ends[1], ends[2] = pos[1], pos[2], pos[3]
        ends[3] = [0, 0, self.head_center_z + self.head_radius]
        ends[4], ends[6] = pos[5], pos[7]
        reach = self.forearm
        ends[5] = pos[5] + [reach, 0, 0]
        ends[7] = pos[7] - [reach, 0, 0]
        ends[8], ends[10] = pos[9], pos[11]
        ends[9] = pos[9] - [0, 0, self.shin]
        ends[11] = pos[11] - [0, 0, self.shin]
        return ends


class _Builder:
    def __init__(self):
        self.verts: list[np.ndarray] = []
        self.parts: list[str] = []
        self.faces: list[tuple[int, int, int]] = []
        self.face_parts: list[str] = []
        self._n = 0

    def add(self, pts, part) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
        ids = np.arange(self._n, self._n + len(pts))
        self._n += len(pts)
        self.verts.append(pts)
        self.parts.extend([part] * len(pts))
        return ids

    def tri(self, a, b, c, part):
        self.faces.append((int(a), int(b), int(c)))
        self.face_parts.append(part)

    def quad(self, a, b, c, d, part):
        self.tri(a, b, c, part)
        self.tri(a, c, d, part)

    def positions(self) -> np.ndarray:
        return np.concatenate(self.verts)


def _perpendicular_frame(axis):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    helper = np.array([0.0, 0.0, 1.0]) if abs(axis[2]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(helper, axis)
    e1 /= np.linalg.norm(e1)
    return axis, e1, np.cross(axis, e1)


def _attach_limb(b: _Builder, loop, start, axis, length, radii, spacing, part):
    """Grow a capped tube from a boundary loop of existing vertices.

    Ring vertices reuse the angular positions of the loop vertices around the
    limb axis so that the transition band never twists. Returns the face
    range that was added.
    """
    pos = b.positions()
    axis, e1, e2 = _perpendicular_frame(axis)
    rel = pos[loop] - start
    ang = np.arctan2(rel @ e2, rel @ e1)
    first_face = len(b.faces)
    n_rings = max(2, int(np.ceil(length / spacing)) + 1)
    ts = np.linspace(0.0, length, n_rings)
    r0, r1 = radii
    rings = [np.asarray(loop)]
    circle = np.cos(ang)[:, None] * e1 + np.sin(ang)[:, None] * e2
    for t in ts:
        r = r0 + (r1 - r0) * t / length
        rings.append(b.add(start + t * axis + r * circle, part))
    end = start + length * axis
    for lat in (np.pi / 6, np.pi / 3):
        rings.append(b.add(end + r1 * np.sin(lat) * axis + r1 * np.cos(lat) * circle, part))
    pole = b.add(end + r1 * axis, part)[0]
    n = len(loop)
    for lo, hi in zip(rings[:-1], rings[1:]):
        for i in range(n):
            k = (i + 1) % n
            b.quad(lo[i], lo[k], hi[k], hi[i], part)
    last = rings[-1]
    for i in range(n):
        b.tri(last[i], last[(i + 1) % n], pole, part)
    # flip the whole tube if it came out inside-out
    verts = b.positions()
    fs = np.array(b.faces[first_face:])
    tri = verts[fs]
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    cent = tri.mean(axis=1) - start
    radial = cent - np.outer(cent @ axis, axis)
    if np.sum(np.einsum("ij,ij->i", normal, radial)) < 0:
        for i in range(first_face, len(b.faces)):
            a_, b_, c_ = b.faces[i]
            b.faces[i] = (a_, c_, b_)


def _hole_loop(ring_ids, i0, a, j0, bcols, n):
    """Boundary loop (vertex ids) of the ring-grid patch rows i0..i0+a, columns j0..j0+b."""
    cols = [(j0 + k) % n for k in range(bcols + 1)]
    loop = [ring_ids[i0][j] for j in cols]
    loop += [ring_ids[i0 + r][cols[-1]] for r in range(1, a + 1)]
    loop += [ring_ids[i0 + a][j] for j in reversed(cols[:-1])]
    loop += [ring_ids[i0 + r][cols[0]] for r in range(a - 1, 0, -1)]
    return np.array(loop)


def gen_capsule_body(spec: BodySpec | None = None) -> SkinnedMesh:
    """A watertight capsule humanoid in T-pose with a 12-joint skeleton.

    Torso and head form one latitude/longitude tube; arms and legs are tubes
    grown out of rectangular holes cut into the torso wall.
    """
    spec = BodySpec() if spec is None else spec
    spec.validate()
    n = spec.radial_segments
    r = spec.torso_radius
    phi = 2 * np.pi * np.arange(n) / n
    cphi, sphi = np.cos(phi), np.sin(phi)
    b = _Builder()

    # torso ring layout: lower cap, cylinder, upper cap up to the neck
    ring_defs = []  # (horizontal radius, z)
    for lat in (-75, -60, -45, -30, -15):
        th = np.radians(lat)
        ring_defs.append((r * np.cos(th), spec.torso_bottom + r * np.sin(th)))
    for z in np.linspace(spec.torso_bottom, spec.torso_top, spec.cylinder_rings):
        ring_defs.append((r, z))
    top_lats = [15, 30, 45, 60]
    top_lats = [x for x in top_lats if x < spec.neck_latitude - 4] + [spec.neck_latitude]
    for lat in top_lats:
        th = np.radians(lat)
        ring_defs.append((r * np.cos(th), spec.torso_top + r * np.sin(th)))
    torso_rings = [b.add(np.stack([rh * cphi, rh * sphi, np.full(n, z)], axis=1), "body") for rh, z in ring_defs]
    bottom_pole = b.add([0.0, 0.0, spec.torso_bottom - r], "body")[0]

    # holes: legs in the lower cap between -75 and -45 deg, arms in the wall
    leg_cols = max(2, 2 * int(round(n * 0.09375)))
    arm_cols = max(2, 2 * int(round(n * 0.0625)))
    zs = np.array([z for _, z in ring_defs])
    dz = (spec.torso_top - spec.torso_bottom) / (spec.cylinder_rings - 1)
    arm_rows = max(2, int(round(2 * spec.arm_radii[0] / dz)))
    cyl_lo = 5
    cyl_hi = 5 + spec.cylinder_rings - 1
    best = None
    for i0 in range(cyl_lo, cyl_hi - arm_rows + 1):
        score = abs(0.5 * (zs[i0] + zs[i0 + arm_rows]) - spec.shoulder_z)
        if best is None or score < best[0]:
            best = (score, i0)
    arm_i0 = best[1]
    holes = {
        "l_arm": (arm_i0, arm_rows, -arm_cols // 2, arm_cols),
        "r_arm": (arm_i0, arm_rows, n // 2 - arm_cols // 2, arm_cols),
        "l_leg": (0, 2, -leg_cols // 2, leg_cols),
        "r_leg": (0, 2, n // 2 - leg_cols // 2, leg_cols),
    }
    skip = set()
    for i0, a, j0, bc in holes.values():
        for i in range(i0, i0 + a):
            for k in range(bc):
                skip.add((i, (j0 + k) % n))

    for i in range(len(torso_rings) - 1):
        lo, hi = torso_rings[i], torso_rings[i + 1]
        for j in range(n):
            if (i, j) in skip:
                continue
            k = (j + 1) % n
            b.quad(lo[j], lo[k], hi[k], hi[j], "body")
    for j in range(n):
        b.tri(bottom_pole, torso_rings[0][(j + 1) % n], torso_rings[0][j], "body")

    # neck and head continue the torso tube
    head_rings = [torso_rings[-1]]
    hr = spec.head_radius
    for lat in np.linspace(-50, 78, spec.head_rings):
        th = np.radians(lat)
        rh = hr * np.cos(th)
        head_rings.append(
            b.add(np.stack([rh * cphi, rh * sphi, np.full(n, spec.head_center_z + hr * np.sin(th))], axis=1), "head")
        )
    top_pole = b.add([0.0, 0.0, spec.head_center_z + hr], "head")[0]
    for lo, hi in zip(head_rings[:-1], head_rings[1:]):
        for j in range(n):
            k = (j + 1) % n
            b.quad(lo[j], lo[k], hi[k], hi[j], "head")
    for j in range(n):
        b.tri(head_rings[-1][j], head_rings[-1][(j + 1) % n], top_pole, "head")

    # limbs
    sx, sz = spec.shoulder_x, spec.shoulder_z
    arm_len = spec.upper_arm + spec.forearm
    leg_len = spec.thigh + spec.shin
    first_leg_z = spec.torso_bottom - r - 0.03
    limb_defs = {
        "l_arm": (np.array([sx + 0.01, 0, sz]), [1, 0, 0], arm_len - 0.01, spec.arm_radii),
        "r_arm": (np.array([-sx - 0.01, 0, sz]), [-1, 0, 0], arm_len - 0.01, spec.arm_radii),
        "l_leg": (
            np.array([spec.hip_x, 0, first_leg_z]),
            [0, 0, -1],
            first_leg_z - (spec.hip_z - leg_len),
            spec.leg_radii,
        ),
        "r_leg": (
            np.array([-spec.hip_x, 0, first_leg_z]),
            [0, 0, -1],
            first_leg_z - (spec.hip_z - leg_len),
            spec.leg_radii,
        ),
    }
    for name, (start, axis, length, radii) in limb_defs.items():
        i0, a, j0, bc = holes[name]
        loop = _hole_loop(torso_rings, i0, a, j0, bc, n)
        _attach_limb(b, loop, start, axis, length, radii, spec.limb_ring_spacing, name)

    # drop vertices orphaned by the holes
    verts = b.positions()
    faces = np.array(b.faces, dtype=np.int64)
    used = np.zeros(len(verts), dtype=bool)
    used[faces.ravel()] = True
    remap = np.cumsum(used) - 1
    faces = remap[faces]
    parts = [p for p, u in zip(b.parts, used) if u]
    verts = verts[used]

    weights = _capsule_weights(verts, parts, spec)
    labels = tuple("head" if p == "head" else "body" if p == "body" else "limb" for p in b.face_parts)
    pos = spec.joint_positions()
    offsets = pos.copy()
    for j, p in enumerate(JOINT_PARENTS):
        if p >= 0:
            offsets[j] = pos[j] - pos[p]
    joints = JointTree(np.array(JOINT_PARENTS), offsets, JOINT_NAMES)
    return SkinnedMesh(verts, faces, joints, weights, labels)


_PART_BONES = {
    "body": ((0, 1, 2), "torso"),
    "head": ((2, 3), "head"),
    "l_arm": ((2, 4, 5), "arm"),
    "r_arm": ((2, 6, 7), "arm"),
    "l_leg": ((0, 8, 9), "leg"),
    "r_leg": ((0, 10, 11), "leg"),
}


def _point_segment_distance(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * ab), axis=1)


def _capsule_weights(verts, parts, spec: BodySpec) -> np.ndarray:
    """Linear falloff in distance-to-bone within 1.5 radii, per body part."""
    starts = spec.joint_positions()
    ends = spec.bone_ends()
    radius = {
        "torso": spec.torso_radius,
        "head": spec.head_radius,
        "arm": spec.arm_radii[0],
        "leg": spec.leg_radii[0],
    }
    parts = np.asarray(parts)
    w = np.zeros((len(verts), BODY_JOINT_COUNT))
    for part, (bones, kind) in _PART_BONES.items():
        sel = np.flatnonzero(parts == part)
        if len(sel) == 0:
            continue
        p = verts[sel]
        d = np.stack([_point_segment_distance(p, starts[j], ends[j]) for j in bones], axis=1)
        raw = np.clip(1.0 - (d - d.min(axis=1, keepdims=True)) / (1.5 * radius[kind]), 0.0, None)
        raw /= raw.sum(axis=1, keepdims=True)
        w[np.ix_(sel, bones)] = raw
    w /= w.sum(axis=1, keepdims=True)
    return w


def canonical_pose(joints: JointTree | None = None) -> Pose:
    """The X-pose: arms lowered to 45 degrees off the body axis, legs apart.

    Meshes that do not use the built-in 12-joint layout are taken to be
    modelled in their canonical pose already, so the identity is returned.
    """
    if joints is not None and (joints.count != BODY_JOINT_COUNT or (joints.names and joints.names != JOINT_NAMES)):
        return Pose.identity(joints.count)
    q = np.zeros((BODY_JOINT_COUNT, 4))
    q[:, 0] = 1.0
    y = np.array([0.0, 1.0, 0.0])
    q[JOINT_NAMES.index("l_shoulder")] = quat_from_axis_angle(y, np.radians(45.0))
    q[JOINT_NAMES.index("r_shoulder")] = quat_from_axis_angle(y, np.radians(-45.0))
    q[JOINT_NAMES.index("l_hip")] = quat_from_axis_angle(y, np.radians(-8.0))
    q[JOINT_NAMES.index("r_hip")] = quat_from_axis_angle(y, np.radians(8.0))
    return Pose(quat_normalize(q), np.zeros(3))


def pose_from_angles(angles: dict[str, Sequence[float]], translation=(0.0, 0.0, 0.0)) -> Pose:
    """Build a body pose from per-joint rotation vectors given in degrees."""
    q = np.zeros((BODY_JOINT_COUNT, 4))
    q[:, 0] = 1.0
    for name, rotvec in angles.items():
        rv = np.radians(np.asarray(rotvec, dtype=np.float64))
        ang = np.linalg.norm(rv)
        if ang > 0:
            q[JOINT_NAMES.index(name)] = quat_from_axis_angle(rv / ang, ang)
    return Pose(quat_normalize(q), np.asarray(translation, dtype=np.float64))
