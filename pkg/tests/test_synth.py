import json

import numpy as np
import pytest

from dsnerf.errors import InvalidSpecError
from dsnerf.mesh import JointTree, Pose, SkinnedMesh, lbs_pose
from dsnerf.render import Camera, generate_rays, load_png
from dsnerf.synth import (
    LightSpec,
    Scene,
    SceneSpec,
    default_albedo,
    default_scene,
    make_dataset,
    moller_trumbore,
    novelty,
    render_groundtruth,
    ring_cameras,
    trace,
)


def plane_scene(light, albedo=1.0):
    """A single upward-facing triangle around the origin."""
    joints = JointTree(np.array([-1]), np.zeros((1, 3)))
    v = np.array([[-5.0, -5.0, 0.0], [5.0, -5.0, 0.0], [0.0, 5.0, 0.0]])
    mesh = SkinnedMesh(v, np.array([[0, 1, 2]]), joints, np.ones((3, 1)), ("body",))
    cam = Camera.look_at([0, 0, 3.0], [0, 0, 0], [0, 1, 0], 10.0, 5, 5)
    return Scene(mesh, [Pose.identity(1)], [cam], light, np.full((3, 3), albedo))


class TestLambert:
    def test_hand_evaluated(self):
        scene = plane_scene(LightSpec((0.0, 0.0, 1.0), 1.0, 0.0))
        img, mask, _ = render_groundtruth(scene, 0, 0)
        # centre pixel looks straight down at the origin, one metre below the light
        assert mask.all() and abs(img[2, 2, 0] - 1.0) < 1e-12

    def test_unlit_is_albedo(self, body):
        albedo = default_albedo(body)
        scene = Scene(body, [Pose.identity(body.joints.count)], ring_cameras(SceneSpec(image_size=24, focal=40)), LightSpec(intensity=0.0, ambient=1.0), albedo)
        img, mask, _ = render_groundtruth(scene, 0, 0)
        assert mask.any()
        cam = scene.cameras[0]
        rays = generate_rays(cam, cam.pixel_grid())
        hit, face, bary, _ = trace(lbs_pose(body, scene.poses[0]), rays)
        w = np.concatenate([1 - bary[hit].sum(1, keepdims=True), bary[hit]], axis=1)
        expected = np.einsum("nk,nkd->nd", w, albedo[body.faces[face[hit]]])
        assert np.abs(img.reshape(-1, 3)[hit] - expected).max() < 1e-12

    def test_bounded(self):
        scene = plane_scene(LightSpec((0.0, 0.0, 0.2), 50.0, 0.5))
        img, _, _ = render_groundtruth(scene, 0, 0)
        assert img.min() >= 0 and img.max() <= 1

    def test_back_faces_get_ambient_only(self):
        light = LightSpec((0, 0, 1.0), 3.0, 0.25)
        assert light.lambert(np.zeros((1, 3)), np.array([[0, 0, -1.0]]))[0] == 0.25

    def test_negative_intensity(self):
        with pytest.raises(InvalidSpecError):
            LightSpec(intensity=-1.0)


class TestTrace:
    def test_facing_away(self, body):
        scene = Scene(body, [Pose.identity(body.joints.count)], [Camera.look_at([0, 3, 1], [0, 6, 1], [0, 0, 1], 20.0, 8, 8)], LightSpec(), default_albedo(body), (0.5, 0.5, 0.5))
        img, mask, head = render_groundtruth(scene, 0, 0)
        assert not mask.any() and not head.any() and np.all(img == 0.5)

    def test_moller_trumbore_single(self):
        tri = np.array([[[0.0, 0, 0], [1, 0, 0], [0, 1, 0]]])
        t, b1, b2, ok = moller_trumbore(np.array([[0.2, 0.3, 1.0]]), np.array([[0, 0, -1.0]]), tri)
        assert ok[0] and abs(t[0] - 1) < 1e-12 and abs(b1[0] - 0.2) < 1e-12 and abs(b2[0] - 0.3) < 1e-12

    def test_matches_brute_force(self, posed_set):
        posed = posed_set[0]
        cam = Camera.look_at(posed.vertices.mean(0) + [0, 3.0, 0], posed.vertices.mean(0), [0, 0, 1], 30.0, 20, 20)
        rays = generate_rays(cam, cam.pixel_grid())
        hit, face, _, depth = trace(posed, rays)
        tri = posed.triangles()
        for r in np.nonzero(hit)[0][::7]:
            t, _, _, ok = moller_trumbore(np.repeat(rays.origins[r : r + 1], len(tri), 0), np.repeat(rays.directions[r : r + 1], len(tri), 0), tri)
            assert abs(t[ok].min() - depth[r]) < 1e-12

    def test_invariant_to_face_order(self, body):
        rng = np.random.default_rng(0)
        perm = rng.permutation(body.face_count)
        shuffled = SkinnedMesh(body.vertices, body.faces[perm], body.joints, body.blend_weights, tuple(np.array(body.region_labels)[perm]))
        pose = Pose.identity(body.joints.count)
        cams = ring_cameras(SceneSpec(image_size=24, focal=40))
        a = Scene(body, [pose], cams, LightSpec(), default_albedo(body))
        b = Scene(shuffled, [pose], cams[::-1], LightSpec(), default_albedo(body))
        for i, j in ((0, 4), (2, 2)):
            x, y = render_groundtruth(a, 0, i), render_groundtruth(b, 0, j)
            assert np.array_equal(x[1], y[1])
            assert np.abs(x[0] - y[0]).max() < 1e-12

    def test_mask_is_exact_hit_set(self, body):
        scene, _ = default_scene(SceneSpec(image_size=16, focal=25))
        img, mask, _ = render_groundtruth(scene, 0, 1)
        cam = scene.cameras[1]
        hit, *_ = trace(lbs_pose(scene.mesh, scene.poses[0]), generate_rays(cam, cam.pixel_grid()))
        assert np.array_equal(mask.ravel(), hit)


class TestDefaultScene:
    def test_layout(self):
        scene, split = default_scene()
        assert len(split["train_frames"]) == 10 and len(split["heldout_frames"]) == 3
        assert split["train_cameras"] == [0, 1, 2, 3] and split["heldout_cameras"] == [4]
        centers = np.array([c.center for c in scene.cameras[:4]])
        assert np.allclose(np.linalg.norm(centers[:, :2], axis=1), 3.2)
        angles = np.degrees(np.arctan2(centers[:, 1], centers[:, 0])) % 360
        assert np.allclose(np.diff(np.sort(angles)), 90.0)

    def test_heldout_poses_are_novel(self):
        scene, split = default_scene()
        train = [scene.poses[i] for i in split["train_frames"]]
        for i in split["heldout_frames"]:
            assert novelty(scene.poses[i], train) >= 30.0

    def test_heldout_at_mean_placement(self):
        scene, split = default_scene()
        mean = np.mean([scene.poses[i].root_translation for i in split["train_frames"]], axis=0)
        for i in split["heldout_frames"]:
            assert np.allclose(scene.poses[i].root_translation, mean)


class TestMakeDataset:
    def test_files_and_masks(self, dataset_dir):
        cams = json.loads((dataset_dir / "cameras.json").read_text())
        poses = json.loads((dataset_dir / "poses.json").read_text())
        assert cams["version"] == 1 and len(cams["cameras"]) == 5 and len(poses["frames"]) == 13
        for name in ("light.json", "mesh.json", "scene.json"):
            assert (dataset_dir / name).exists()
        for f in poses["train"]:
            for c in cams["train"]:
                assert (dataset_dir / "frames" / f"f{f}_c{c}.png").exists()
                assert load_png(dataset_dir / "masks" / f"f{f}_c{c}.png").any()
                assert (dataset_dir / "face_masks" / f"f{f}_c{c}.png").exists()

    def test_deterministic(self, tmp_path):
        spec = SceneSpec(image_size=12, focal=20, train_frames=2, heldout_frames=1)
        a = make_dataset(tmp_path / "a", spec, seed=5)
        b = make_dataset(tmp_path / "b", spec, seed=5)
        files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
        assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
        for rel in files:
            assert (a / rel).read_bytes() == (b / rel).read_bytes()
