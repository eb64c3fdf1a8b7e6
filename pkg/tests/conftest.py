import numpy as np
import pytest

from ssdeformer.model import DeformerModel, ModelConfig
from ssdeformer.synthgen import DatasetConfig, generate_dataset

TINY = dict(
    contact_width=8,
    force_width=8,
    hyper_width=16,
    theta_width=8,
    field_width=16,
    precision="f64",
)


def tiny_model(n_objects=2, seed=0, **overrides) -> DeformerModel:
    return DeformerModel(ModelConfig(n_objects=n_objects, seed=seed, **{**TINY, **overrides}))


@pytest.fixture(scope="session")
def micro_dataset():
    """Two objects, two deformations each, with small clouds and query sets."""
    return generate_dataset(DatasetConfig(n_objects=2, n_deforms=2, seed=5, surface_samples=500, queries=24))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# --------------------------------------------------------------------------- acceptance reporting

ACCEPTANCE = {}


def record_criterion(number: int, title: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE[number] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if passed else 'FAIL'}  {title}  {detail}")
