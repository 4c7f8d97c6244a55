import sys
from pathlib import Path

import hypothesis
import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from encoder_backends import ToyBackend  # noqa: E402
from pipeline_io import generate_toy_dataset, load_dataset  # noqa: E402

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False, deadline=None)
hypothesis.settings.register_profile("default-torch", max_examples=25, deadline=None)
hypothesis.settings.load_profile("default-torch")


@pytest.fixture(autouse=True)
def quiet_progress(monkeypatch):
    monkeypatch.setenv("PINADAPT_QUIET", "1")
    monkeypatch.delenv("PINADAPT_TRACE", raising=False)
    monkeypatch.delenv("OTEL_EXPORTER_OTLP_ENDPOINT", raising=False)


@pytest.fixture(scope="session")
def toy_backend():
    return ToyBackend(layer_split=1)


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    return generate_toy_dataset(root, seed=0, n_train=16, n_val=8)


@pytest.fixture(scope="session")
def toy_train(toy_data):
    return list(load_dataset(toy_data.train))


@pytest.fixture(scope="session")
def toy_shifted_val(toy_data):
    return list(load_dataset(toy_data.shifted_val))


def random_features(seed: int, shape=(8, 6, 5), scale: float = 3.0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=generator, dtype=torch.float64) * scale


def stack_images(samples) -> torch.Tensor:
    return torch.stack([s.image for s in samples])
