import logging

import numpy as np
import pytest

from feasiflow.app.base_dist import BaseKind
from feasiflow.app.coupling_flow import FlowModel, build_flow
from feasiflow.app.data_pipeline import Label, LabeledDataset


@pytest.fixture(autouse=True)
def quiet_logging():
    logging.getLogger("feasiflow").setLevel(logging.WARNING)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def perturbed_flow(
    dim: int,
    num_layers: int,
    seed: int = 0,
    scale: float = 0.3,
    width: int = 8,
    depth: int = 3,
    base_kind: BaseKind = BaseKind.GAUSSIAN,
) -> FlowModel:
    """A small flow whose zero-initialized output layers have been randomized."""
    model = build_flow(dim, num_layers, width=width, depth=depth, seed=seed,
                       base_kind=base_kind, accept_width=width)
    noise = np.random.default_rng(seed + 1000).standard_normal(model.num_parameters())
    model.set_flat_params(model.get_flat_params() + scale * noise)
    return model


@pytest.fixture
def make_flow():
    return perturbed_flow


@pytest.fixture
def toy_dataset():
    embeddings = np.array([[0.0, 1.0], [1.0, 0.5], [-1.0, 2.0], [3.0, -1.0]])
    labels = [Label.FEASIBLE, Label.FEASIBLE, Label.INFEASIBLE, None]
    return LabeledDataset(embeddings, labels, ["a", "b", "c", "d"])
