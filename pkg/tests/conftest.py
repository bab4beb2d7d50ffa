"""Shared fixtures: a tiny dataset and small untrained float64 models."""

import pytest
import torch

from stagedpgd.core.dataset import DatasetSpec, generate_dataset
from stagedpgd.core.models import DifferentiableModel, ModelSet, build_net
from stagedpgd.core.objectives import TextBank

TINY_WIDTHS = [4, 8, 8, 8]


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run end-to-end training tests"
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


def tiny_spec(**overrides) -> DatasetSpec:
    values = dict(
        image_size=24,
        grid_size=3,
        min_shapes=1,
        max_shapes=2,
        min_shape_size=8,
        max_shape_size=10,
        train_size=8,
        val_size=2,
        test_size=4,
        seed=3,
    )
    values.update(overrides)
    return DatasetSpec(**values)


def make_model(head_kind, name=None, seed=0, dtype=torch.float64, origin="scratch"):
    """Untrained model with the tiny widths."""
    architecture = {"widths": list(TINY_WIDTHS)}
    if head_kind == "clip_retrieval":
        architecture["embed_dim"] = 16
    if head_kind == "detection":
        architecture["grid_size"] = 3
    torch.manual_seed(seed)
    net = build_net(head_kind, architecture)
    model = DifferentiableModel(
        net,
        head_kind,
        backbone_origin=origin,
        architecture=architecture,
        name=name or ("clip" if head_kind == "clip_retrieval" else head_kind),
    )
    return model.to_precision(dtype)


@pytest.fixture(scope="session")
def dataset():
    """Tiny generated dataset (24 x 24 images, 3 x 3 grid)."""
    return generate_dataset(tiny_spec())


@pytest.fixture(scope="session")
def samples(dataset):
    return dataset.test


@pytest.fixture(scope="session")
def clip_model():
    return make_model("clip_retrieval", seed=1)


@pytest.fixture(scope="session")
def seg_model():
    return make_model("segmentation", seed=2)


@pytest.fixture(scope="session")
def det_model():
    return make_model("detection", seed=3)


@pytest.fixture(scope="session")
def models(clip_model, seg_model, det_model):
    return ModelSet(
        clip=clip_model,
        dense={"segmentation": seg_model, "detection": det_model},
        control={
            "segmentation": make_model("segmentation", "segmentation-control", seed=4),
            "detection": make_model("detection", "detection-control", seed=5),
        },
    )


@pytest.fixture(scope="session")
def bank(clip_model, samples):
    return TextBank.build(clip_model, TextBank.unique_captions(samples))
