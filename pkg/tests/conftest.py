from functools import lru_cache

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from dsnerf.mesh import BodySpec, canonical_pose, gen_capsule_body, lbs_pose, pose_from_angles

# one BLAS thread keeps every run bit-reproducible
_LIMIT = threadpool_limits(1)


@lru_cache(maxsize=None)
def make_body():
    return gen_capsule_body(BodySpec(radial_segments=16))


@pytest.fixture(scope="session")
def body():
    return make_body()


@pytest.fixture(scope="session")
def canon(body):
    return lbs_pose(body, canonical_pose(body.joints))


def random_pose(rng, scale=35.0, translation=0.3):
    names = ("spine", "chest", "neck", "l_shoulder", "l_elbow", "r_shoulder", "r_elbow", "l_hip", "l_knee", "r_hip", "r_knee")
    ang = {n: tuple(rng.uniform(-scale, scale, 3)) for n in names}
    ang["pelvis"] = (0.0, 0.0, rng.uniform(-90, 90))
    return pose_from_angles(ang, rng.uniform(-translation, translation, 3))


@pytest.fixture(scope="session")
def posed_set(body):
    rng = np.random.default_rng(11)
    return [lbs_pose(body, random_pose(rng)) for _ in range(10)]


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    from dsnerf.synth import make_dataset

    return make_dataset(tmp_path_factory.mktemp("data") / "ds", seed=0)


@pytest.fixture(scope="session")
def dataset(dataset_dir):
    from dsnerf.train import Dataset

    return Dataset(dataset_dir)


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(line)
