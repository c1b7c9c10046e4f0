import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from rscnet import numerics as nx  # noqa: E402
from rscnet.data import SyntheticChannelConfig, generate_synthetic, normalize  # noqa: E402
from rscnet.model import ModelConfig  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


def tiny_config(**overrides):
    """N_f=5, W=2, M=3, N_h=3, C=3 on a 3x4x10 sample."""
    base = dict(n_antennas=3, n_subcarriers=4, n_timesteps=10, window_frames=5,
                compression_ratio=3 / 60, encoder_width=2, lstm_hidden=3, n_classes=3)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def f64():
    with nx.precision(np.float64):
        yield np.float64


@pytest.fixture(params=nx.available_backends())
def backend(request):
    previous = nx.get_backend()
    nx.set_backend(request.param)
    yield request.param
    nx.set_backend(previous)


@pytest.fixture(scope="session")
def small_split():
    """Normalised 7-class synthetic data at reduced size (5 frames x 2 windows)."""
    cfg = SyntheticChannelConfig(n_subcarriers=6, n_timesteps=20, seed=3)
    return normalize(generate_synthetic(cfg, n_per_class=5, split_sizes=(32, 14, 14)))


@pytest.fixture(scope="session")
def small_model_config():
    return ModelConfig(n_antennas=3, n_subcarriers=6, n_timesteps=20, window_frames=10,
                       compression_ratio=1 / 20, encoder_width=2)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, title, detail = results[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number}. {title}: {detail}")
