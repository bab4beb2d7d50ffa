"""Tests for training module."""

import pytest
import torch

from stagedpgd.core.config import ClipTrainingConfig, DenseTrainingConfig, derive_seed
from stagedpgd.core.models import ModelError
from stagedpgd.core.training import (
    GateError,
    TrainingSummary,
    backbones_differ,
    contrastive_loss,
    derive_dense_model,
    train_toy_clip,
    training_seeds,
)

WIDTHS = (4, 8, 8, 8)
CLIP_CFG = ClipTrainingConfig(epochs=1, batch_size=4, embed_dim=16, recall_gate=0.0)
DENSE_CFG = DenseTrainingConfig(epochs=1, batch_size=4, miou_gate=0.0, map_gate=0.0)


@pytest.fixture(scope="module")
def trained_clip(dataset):
    model, summary = train_toy_clip(dataset.train, dataset.test, CLIP_CFG, WIDTHS, seed=1)
    return model, summary


def test_train_clip_summary(trained_clip):
    """Test the contrastive run records its metric, gate and losses."""
    model, summary = trained_clip
    assert model.head_kind == "clip_retrieval"
    assert model.backbone_origin == "scratch"
    assert model.dtype == torch.float32
    assert summary.metric_name == "Recall@1"
    assert 0.0 <= summary.metric_value <= 1.0
    assert model.metrics == {"recall_at_1": summary.metric_value}
    assert len(summary.losses) == 1
    assert summary.passed


def test_train_clip_is_deterministic(dataset, trained_clip):
    """Test the same seed trains the same weights."""
    model, _ = trained_clip
    again, _ = train_toy_clip(dataset.train, dataset.test, CLIP_CFG, WIDTHS, seed=1)
    assert again.backbone_checksum() == model.backbone_checksum()


def test_train_clip_gate(dataset):
    """Test a missed gate raises GateError carrying the summary."""
    strict = ClipTrainingConfig(epochs=1, batch_size=4, embed_dim=16, recall_gate=1.01)
    with pytest.raises(GateError, match="below the gate") as excinfo:
        train_toy_clip(dataset.train, dataset.test, strict, WIDTHS, seed=1)
    assert excinfo.value.summary is not None
    assert not excinfo.value.summary.passed

    _, summary = train_toy_clip(
        dataset.train, dataset.test, strict, WIDTHS, seed=1, enforce_gate=False
    )
    assert not summary.passed


def test_train_clip_empty_split(dataset):
    """Test training refuses an empty split."""
    with pytest.raises(ModelError, match="empty training split"):
        train_toy_clip([], dataset.test, CLIP_CFG, WIDTHS, seed=1)


@pytest.mark.parametrize("head_kind", ["segmentation", "detection"])
def test_derive_dense_model(dataset, trained_clip, head_kind):
    """Test derived models start from the contrastive backbone and leave it untouched."""
    clip_model, _ = trained_clip
    before = clip_model.backbone_checksum()
    model, summary = derive_dense_model(
        clip_model, head_kind, dataset.train, dataset.test, DENSE_CFG, seed=2
    )

    assert clip_model.backbone_checksum() == before
    assert model.name == head_kind
    assert model.backbone_origin == "derived_from_clip"
    assert model.parent_checksum == before
    assert backbones_differ(model, clip_model)
    assert summary.gate == 0.0
    assert summary.metric_name == ("mIoU" if head_kind == "segmentation" else "cell-mAP")
    if head_kind == "detection":
        assert model.architecture["grid_size"] == 3


def test_control_model(dataset, trained_clip):
    """Test the control model has a fresh frozen backbone and no gate."""
    clip_model, _ = trained_clip
    model, summary = derive_dense_model(
        clip_model,
        "segmentation",
        dataset.train,
        dataset.test,
        DENSE_CFG,
        seed=3,
        freeze_backbone=True,
    )

    assert model.name == "segmentation-control"
    assert model.backbone_origin == "scratch"
    assert model.parent_checksum is None
    assert summary.gate is None and summary.passed
    assert not any(p.requires_grad for p in model.net.backbone.parameters())
    assert backbones_differ(model, clip_model)


def test_dense_gate(dataset, trained_clip):
    """Test a missed dense gate raises GateError."""
    clip_model, _ = trained_clip
    strict = DenseTrainingConfig(epochs=1, batch_size=4, miou_gate=1.01)
    with pytest.raises(GateError, match="segmentation mIoU"):
        derive_dense_model(clip_model, "segmentation", dataset.train, dataset.test, strict, seed=2)


def test_derive_unknown_head(dataset, trained_clip):
    """Test unknown head kinds are rejected."""
    clip_model, _ = trained_clip
    with pytest.raises(ModelError, match="Unknown dense head kind"):
        derive_dense_model(clip_model, "depth", dataset.train, dataset.test, DENSE_CFG, seed=2)


def test_contrastive_loss_shared_captions():
    """Test identical captions split the target mass."""
    emb = torch.nn.functional.normalize(torch.randn(3, 4, generator=torch.Generator().manual_seed(0)), dim=1)
    scale = torch.tensor(0.0)
    loss = contrastive_loss(emb, emb, scale, ["a red circle", "a red circle", "a blue square"])
    assert torch.isfinite(loss)
    assert loss.item() > 0


def test_training_seeds():
    """Test the named training streams."""
    seeds = training_seeds(4, ["segmentation"])
    assert set(seeds) == {"clip", "segmentation", "segmentation-control"}
    assert seeds["clip"] == derive_seed(4, "train-clip")
    assert seeds["segmentation"] == derive_seed(4, "train-dense:segmentation")
    assert seeds["segmentation-control"] == derive_seed(4, "train-control:segmentation")


def test_summary_to_dict():
    """Test the summary serializes its pass flag."""
    summary = TrainingSummary("clip", "clip_retrieval", "Recall@1", 0.5, 0.7, 1)
    assert summary.to_dict()["passed"] is False
