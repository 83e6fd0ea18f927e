import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from ptvton.pose import FRAME_H, FRAME_W, NUM_JOINTS, Pose

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_pose(rng, p_hidden=0.2, min_visible=1):
    kp = np.zeros((NUM_JOINTS, 3))
    kp[:, 0] = rng.uniform(0, FRAME_W - 1, NUM_JOINTS)
    kp[:, 1] = rng.uniform(0, FRAME_H - 1, NUM_JOINTS)
    kp[:, 2] = np.where(rng.random(NUM_JOINTS) < p_hidden, 0, rng.choice([1, 2], NUM_JOINTS))
    if (kp[:, 2] > 0).sum() < min_visible:
        kp[: min_visible, 2] = 2
    return Pose(kp)


@st.composite
def poses(draw, min_visible=1):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_pose(np.random.default_rng(seed), min_visible=min_visible)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    """A small raw synthetic dataset plus its ingested form."""
    from ptvton.data import ingest_dataset
    from ptvton.synthetic import make_dataset

    root = tmp_path_factory.mktemp("synthetic")
    make_dataset(root / "raw", seed=3, train_groups=4, catalog_garments=2, models_per_garment=2,
                 poses_per_model=2, test_groups=3)
    ingest_dataset(root / "raw", root / "data")
    return root


ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
