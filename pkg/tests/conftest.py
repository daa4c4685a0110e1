import numpy as np
import pytest

from kv2ct.geometry import GeometrySpec, Volume3D
from kv2ct.phantom import PhantomSpec, generate


@pytest.fixture(scope="session")
def desk_phantom():
    return generate(PhantomSpec())


@pytest.fixture(scope="session")
def small_geom():
    # odd pixel counts put a pixel centre on the central ray
    return GeometrySpec(detector_pixels=(65, 65), detector_pitch_mm=1.0)


def blob_volume(n=24, spacing=2.0, seed=0, n_blobs=4):
    """Soft-edged random ellipsoids in air, centred on the isocenter."""
    rng = np.random.default_rng(seed)
    x = np.arange(n) - (n - 1) / 2.0
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    hu = np.full((n, n, n), -1000.0)
    for _ in range(n_blobs):
        c = rng.uniform(-n / 5, n / 5, 3)
        r = rng.uniform(n / 10, n / 5, 3)
        d = ((X - c[0]) / r[0]) ** 2 + ((Y - c[1]) / r[1]) ** 2 + ((Z - c[2]) / r[2]) ** 2
        hu = np.maximum(hu, np.where(d <= 1.0, rng.uniform(0, 1000), -1000.0))
    return Volume3D.centered(hu, (spacing,) * 3)


def mini_config_dict(workspace):
    """The desk preset cut down to a few shifts and epochs, for pipeline smoke runs."""
    import tomli
    from kv2ct.config import preset_text

    d = tomli.loads(preset_text("desk"))
    d["workspace"] = str(workspace)
    d["primary"]["grss"].update(shift_range_mm=0.6, shift_step_mm=0.6)
    d["primary"]["train"].update(epochs=2, batch_size=16, warmup_epochs=1)
    d["secondary"]["grss"].update(shift_range_mm=0.3, shift_step_mm=0.3)
    d["secondary"]["train"].update(epochs=2, batch_size=4, warmup_epochs=1)
    d["eval"]["gamma"] = ["3,3,10"]
    return d


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
