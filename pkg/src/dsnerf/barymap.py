"""Barycentric correspondence between two posed copies of one skinned mesh.

A point is described by ``(face, u, v, h)``: the face whose centroid is
nearest, the barycentric coordinates of the point's orthogonal projection
onto that face's plane, and the signed height above the plane. Reading the
same description back on the matching face of another pose moves the point
with the surface. Everything here is vectorised over leading point axes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .errors import CorrespondenceError, DegenerateDirectionError, InvalidInputError, SingularTransformError
from .mesh import PosedMesh, Pose, SkinnedMesh, apply_transforms, face_frames, joint_transforms

# The kd-tree and the brute-force scan compute squared distances in
# different orders; candidates within this relative slack are re-ranked.
_TIE_SLACK = 1e-9


@dataclass(frozen=True)
class LocalCoords:
    face_idx: np.ndarray
    u: np.ndarray
    v: np.ndarray
    h: np.ndarray

    def __getitem__(self, item) -> "LocalCoords":
        return LocalCoords(self.face_idx[item], self.u[item], self.v[item], self.h[item])

    def __len__(self) -> int:
        return int(np.size(self.face_idx))


@dataclass(frozen=True)
class OutlierBounds:
    alpha: float = -4.0
    beta: float = 5.0
    gamma: float = 0.1

    def __post_init__(self):
        if not self.alpha < self.beta:
            raise InvalidInputError("outlier bounds need alpha < beta")
        if not self.gamma > 0:
            raise InvalidInputError("outlier bound gamma must be positive")


class FrameCache:
    """Per-face origins, edges, normals and inverse Gram matrices of one posed mesh."""

    def __init__(self, posed: PosedMesh):
        self.posed = posed
        self.origin, self.edge_u, self.edge_v, self.normal = face_frames(posed.vertices, posed.faces)
        uu = np.einsum("ij,ij->i", self.edge_u, self.edge_u)
        uv = np.einsum("ij,ij->i", self.edge_u, self.edge_v)
        vv = np.einsum("ij,ij->i", self.edge_v, self.edge_v)
        det = uu * vv - uv * uv
        self._inv = np.stack([vv / det, -uv / det, uu / det], axis=1)

    def encode_on(self, faces: np.ndarray, points: np.ndarray):
        w = points - self.origin[faces]
        eu, ev = self.edge_u[faces], self.edge_v[faces]
        wu = np.einsum("...j,...j->...", w, eu)
        wv = np.einsum("...j,...j->...", w, ev)
        inv = self._inv[faces]
        u = inv[..., 0] * wu + inv[..., 1] * wv
        v = inv[..., 1] * wu + inv[..., 2] * wv
        h = np.einsum("...j,...j->...", w, self.normal[faces])
        return u, v, h

    def decode(self, faces, u, v, h) -> np.ndarray:
        return (
            self.origin[faces]
            + u[..., None] * self.edge_u[faces]
            + v[..., None] * self.edge_v[faces]
            + h[..., None] * self.normal[faces]
        )


def frames_of(posed: PosedMesh) -> FrameCache:
    cache = getattr(posed, "_frame_cache", None)
    if cache is None:
        cache = FrameCache(posed)
        object.__setattr__(posed, "_frame_cache", cache)
    return cache


class FaceIndex:
    """Exact nearest-centroid lookup over the faces of one posed mesh.

    A kd-tree proposes the ``k`` closest centroids; those are re-scored with
    the same arithmetic as :meth:`query_brute` so results agree bit for bit,
    ties going to the lowest face index. Queries whose candidate list cannot
    certify the minimum fall back to the brute-force scan.
    """

    def __init__(self, posed: PosedMesh, k: int = 8):
        if posed.face_count == 0:
            raise InvalidInputError("cannot index an empty mesh")
        frames_of(posed)  # rejects degenerate faces up front
        self.posed = posed
        self.centroids = posed.triangles().mean(axis=1)
        self.centroids.setflags(write=False)
        self.k = min(k, len(self.centroids))
        self._tree = cKDTree(self.centroids)

    def __len__(self) -> int:
        return len(self.centroids)

    def query_brute(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        flat = p.reshape(-1, 3)
        out = np.empty(len(flat), dtype=np.int64)
        step = max(1, 2_000_000 // len(self.centroids))
        for s in range(0, len(flat), step):
            d2 = ((self.centroids[None, :, :] - flat[s : s + step, None, :]) ** 2).sum(-1)
            out[s : s + step] = np.argmin(d2, axis=1)
        return out.reshape(p.shape[:-1])

    def query(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        flat = p.reshape(-1, 3)
        if not np.all(np.isfinite(flat)):
            raise InvalidInputError("query points must be finite")
        if len(self.centroids) == 1:
            return np.zeros(p.shape[:-1], dtype=np.int64)
        _, cand = self._tree.query(flat, k=self.k)
        cand = np.sort(cand, axis=1)
        d2 = ((self.centroids[cand] - flat[:, None, :]) ** 2).sum(-1)
        best = np.argmin(d2, axis=1)
        out = cand[np.arange(len(flat)), best]
        if self.k < len(self.centroids):
            dmin = d2[np.arange(len(flat)), best]
            dmax = d2.max(axis=1)
            unsure = dmax <= dmin * (1 + _TIE_SLACK) + 1e-300
            if np.any(unsure):
                out[unsure] = self.query_brute(flat[unsure])
        return out.reshape(p.shape[:-1])


def build_face_index(posed: PosedMesh) -> FaceIndex:
    return FaceIndex(posed)


def encode_local(posed: PosedMesh, p, index: FaceIndex) -> LocalCoords:
    p = np.asarray(p, dtype=np.float64)
    faces = index.query(p)
    return encode_on_faces(posed, faces, p)


def encode_on_faces(posed: PosedMesh, faces, p) -> LocalCoords:
    """Local coordinates of ``p`` relative to given faces (no nearest-face search)."""
    faces = np.asarray(faces, dtype=np.int64)
    u, v, h = frames_of(posed).encode_on(faces, np.asarray(p, dtype=np.float64))
    return LocalCoords(faces, u, v, h)


def decode_local(posed: PosedMesh, coords: LocalCoords) -> np.ndarray:
    faces = np.asarray(coords.face_idx, dtype=np.int64)
    if np.any((faces < 0) | (faces >= posed.face_count)):
        raise IndexError("face index out of range")
    return frames_of(posed).decode(faces, np.asarray(coords.u), np.asarray(coords.v), np.asarray(coords.h))


def check_pair(src: PosedMesh, dst: PosedMesh) -> None:
    if src.source is dst.source:
        return
    if src.faces.shape != dst.faces.shape or not np.array_equal(src.faces, dst.faces):
        raise CorrespondenceError("posed meshes do not share face indexing")


def map_point(src: PosedMesh, src_index: FaceIndex, dst: PosedMesh, p):
    check_pair(src, dst)
    coords = encode_local(src, p, src_index)
    return decode_local(dst, coords), coords


def map_direction(src: PosedMesh, dst: PosedMesh, coords: LocalCoords, direction) -> np.ndarray:
    """Carry a direction through the face frame it starts in.

    Both the start point and ``start + direction`` are expressed against
    ``coords.face_idx``; the endpoint is never re-queried.
    """
    check_pair(src, dst)
    d = np.asarray(direction, dtype=np.float64)
    start = decode_local(src, coords)
    end = encode_on_faces(src, coords.face_idx, start + d)
    diff = decode_local(dst, end) - decode_local(dst, coords)
    norm = np.linalg.norm(diff, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise DegenerateDirectionError("mapped direction endpoints coincide")
    return diff / norm


def is_outlier(coords: LocalCoords, bounds: OutlierBounds = OutlierBounds()):
    u, v, h = np.asarray(coords.u), np.asarray(coords.v), np.asarray(coords.h)
    out = (u < bounds.alpha) | (v < bounds.alpha) | (u > bounds.beta) | (v > bounds.beta) | (np.abs(h) > bounds.gamma)
    return bool(out) if out.ndim == 0 else out


# --------------------------------------------------------------------------
# inverse-LBS baseline


class InverseLbs:
    """Maps points by inverting blend-weighted skinning transforms.

    Weights of a query point are the inverse-distance average of the weight
    rows of its ``k`` nearest posed vertices.
    """

    def __init__(self, posed: PosedMesh, k: int = 4):
        if k < 1:
            raise InvalidInputError("k must be at least 1")
        self.posed = posed
        self.mesh: SkinnedMesh = posed.source
        self.k = min(k, len(posed.vertices))
        self._tree = cKDTree(posed.vertices)
        self._src = joint_transforms(self.mesh.joints, posed.pose)

    def weights(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        dist, idx = self._tree.query(p, k=self.k)
        dist = dist.reshape(len(p), -1)
        idx = idx.reshape(len(p), -1)
        exact = dist[:, 0] <= 1e-15
        inv = 1.0 / np.where(exact[:, None], 1.0, dist)
        inv[exact] = 0.0
        inv[exact, 0] = 1.0
        w = np.einsum("nk,nkj->nj", inv, self.mesh.blend_weights[idx])
        return w / w.sum(axis=1, keepdims=True)

    def map(self, p, dst_pose: Pose, return_transforms: bool = False):
        p = np.asarray(p, dtype=np.float64)
        flat = p.reshape(-1, 3)
        w = self.weights(flat)
        g_src = np.einsum("nj,jab->nab", w, self._src)
        det = np.linalg.det(g_src[:, :3, :3])
        if np.any(np.abs(det) < 1e-12):
            raise SingularTransformError("blended skinning transform is singular")
        rest = apply_transforms(np.linalg.inv(g_src), flat)
        g_dst = np.einsum("nj,jab->nab", w, joint_transforms(self.mesh.joints, dst_pose))
        out = apply_transforms(g_dst, rest).reshape(p.shape)
        if return_transforms:
            return out, g_src, g_dst
        return out


def inverse_lbs_map(posed: PosedMesh, rest: SkinnedMesh, pose: Pose, dst_pose: Pose, p, k: int = 4) -> np.ndarray:
    if posed.source is not rest:
        raise CorrespondenceError("posed mesh was not produced from this rest mesh")
    if posed.pose is not pose and not (
        np.array_equal(posed.pose.joint_rotations, pose.joint_rotations)
        and np.array_equal(posed.pose.root_translation, pose.root_translation)
    ):
        raise CorrespondenceError("posed mesh does not match the given pose")
    return InverseLbs(posed, k).map(p, dst_pose)
