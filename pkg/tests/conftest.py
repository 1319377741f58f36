import numpy as np
import pytest

from ctsdm.geometry import FanBeamGeometry
from ctsdm.kernels import numba_available

BACKENDS = ["numpy"] + (["numba"] if numba_available() else [])


@pytest.fixture(scope="session")
def small_geom():
    return FanBeamGeometry(num_views=60, num_detectors=96, image_size_px=64, pixel_spacing_mm=4.0)


@pytest.fixture(scope="session")
def tiny_geom():
    return FanBeamGeometry(num_views=12, num_detectors=16, image_size_px=16, pixel_spacing_mm=16.0)


@pytest.fixture(scope="session")
def desk_geom():
    return FanBeamGeometry.desk()


@pytest.fixture(scope="session")
def paper_geom():
    return FanBeamGeometry()


@pytest.fixture(scope="session")
def toy_model(desk_geom):
    """Small restorer and refiner trained for a few epochs on desk-scale phantoms."""
    from ctsdm.harness import desk_train_config
    from ctsdm.phantoms import phantom_set
    from ctsdm.sampling import build_schedule, partition_groups
    from ctsdm.training import train

    sched, part = build_schedule(180, 50, 9), partition_groups(180, 8)
    cfg = desk_train_config(epochs=3, widths=(8, 16, 32))
    restorer, refiner, _ = train(phantom_set(32, 64, seed=1), desk_geom, sched, part, cfg)
    return restorer, refiner, sched, part


class DeskModels:
    """Desk-recipe models trained on demand, one per training strategy."""

    def __init__(self, geom):
        from ctsdm.harness import DESK_TRAIN_IMAGES, DESK_TRAIN_SEED
        from ctsdm.phantoms import phantom_set
        from ctsdm.sampling import build_schedule, partition_groups

        self.geom = geom
        self.sched, self.part = build_schedule(180, 50, 9), partition_groups(180, 8)
        self.train_images = phantom_set(DESK_TRAIN_IMAGES, 64, seed=DESK_TRAIN_SEED)
        self.cache = {}

    def __getitem__(self, strategy):
        from ctsdm.harness import desk_train_config
        from ctsdm.training import train

        if strategy not in self.cache:
            r, i, _ = train(self.train_images, self.geom, self.sched, self.part, desk_train_config(strategy))
            self.cache[strategy] = (r, i)
        return self.cache[strategy]


@pytest.fixture(scope="session")
def desk_models(desk_geom):
    return DeskModels(desk_geom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
