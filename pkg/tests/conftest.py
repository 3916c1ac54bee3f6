import numpy as np
import pytest

from bodynerf.data import generate_sequence, make_identity, ring_cameras
from bodynerf.inference import Capture

TINY_MODEL = dict(feature_channels=8, volume_channels=8, refiner_width=16, refiner_depth=2, attention_dim=8,
                  head_width=16, latent_dim=4)
TINY_TRAIN = dict(model=TINY_MODEL, n_inputs=3, rays_per_batch=64, n_samples=8, voxel_size=0.04, threshold=0.05,
                  log_window=10)


@pytest.fixture(scope="session")
def tiny_identity():
    return make_identity(0)


@pytest.fixture(scope="session")
def tiny_cameras():
    return ring_cameras(3, size=32, focal=40)


@pytest.fixture(scope="session")
def tiny_video(tiny_identity, tiny_cameras):
    tpl, colors = tiny_identity
    return generate_sequence(tpl, "wave", tiny_cameras[0], 6, 0, heldout=(2,), colors=colors, name="tiny_cam0")


@pytest.fixture(scope="session")
def tiny_capture(tiny_identity, tiny_cameras, tiny_video):
    tpl, colors = tiny_identity
    views = [generate_sequence(tpl, "wave", cam, 6, 0, heldout=(2,), colors=colors, name=f"tiny_cam{cam.camera_id}")
             for cam in tiny_cameras[1:]]
    return Capture(tiny_video, views)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance report ----------------------------------------------------------------------

ACCEPTANCE: dict = {}


def report_acceptance(number: int, title: str, ok: bool, detail: str, seconds: float) -> None:
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{seconds:.1f}s]"
    ACCEPTANCE[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
