import numpy as np
import pytest

from tbcal.frontend import DetectorModel, PulseShape
from tbcal.pipeline import Acquisition, RunConfig
from tbcal.source import SourceConfig


def small_run(**kw):
    """A fast spontaneous regime-II run (2 ms, 20 blocks)."""
    d = dict(
        source=SourceConfig(gain=1e-3, mean_flux=5e8),
        detector1=DetectorModel(eta=0.4, pulse=PulseShape("rectangular", 1e-8), name="D1"),
        detector2=DetectorModel(eta=0.6, pulse=PulseShape("rectangular", 1e-8), name="D2"),
        acquisition=Acquisition(dt=1e-9, duration=2e-3, n_segments=20, tau_max=5e-8),
        seed=11,
    )
    d.update(kw)
    return RunConfig(**d)


@pytest.fixture
def run():
    return small_run()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def smoke_dict():
    return {
        "seed": 7,
        "source": {"mode": "spontaneous", "gain": 1e-3, "mean_flux": 5e8},
        "detectors": [
            {"name": "D1", "eta": 0.4, "pulse": {"kind": "rectangular", "width": 1e-8}},
            {"name": "D2", "eta": 0.6, "pulse": {"kind": "rectangular", "width": 1e-8}},
        ],
        "acquisition": {"dt": 1e-9, "duration": 1e-3, "n_segments": 10, "tau_max": 5e-8},
        "estimators": [{"name": "IntegratedSPDC"}, {"name": "RatioSPDC"}],
    }


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
