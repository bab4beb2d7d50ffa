"""Tests for checkpoint module."""

import numpy as np
import pytest
import torch

from stagedpgd.core.checkpoint import (
    CHECKPOINT_FORMAT,
    CheckpointError,
    checkpoint_paths,
    load_checkpoint,
    load_text_bank_captions,
    read_manifest,
    save_checkpoint,
    save_text_bank_captions,
)
from stagedpgd.core.workspace import atomic_write_json, read_json

from .conftest import make_model


@pytest.fixture
def saved(tmp_path):
    """A float32 detection model saved to a temporary directory."""
    model = make_model("detection", seed=12, dtype=torch.float32)
    model.metrics = {"cell-mAP": 0.5}
    save_checkpoint(model, tmp_path, {"training": {"epochs": 1}})
    return model, tmp_path


def test_round_trip_preserves_outputs(saved, samples):
    """Test a reloaded model predicts exactly like the saved one."""
    model, directory = saved
    loaded = load_checkpoint(directory, "detection", torch.float32)
    images = np.stack([s.image for s in samples]).astype(np.float32)

    assert np.array_equal(model.predict(images), loaded.predict(images))
    assert loaded.metrics == {"cell-mAP": 0.5}
    assert loaded.architecture["grid_size"] == 3


def test_load_in_double_precision(saved):
    """Test checkpoints load in the requested precision."""
    _, directory = saved
    assert load_checkpoint(directory, "detection").dtype == torch.float64


def test_manifest_fields(saved):
    """Test the manifest records lineage and tensor layout."""
    model, directory = saved
    manifest = read_manifest(directory, "detection")

    assert manifest["format"] == CHECKPOINT_FORMAT
    assert manifest["head_kind"] == "detection"
    assert manifest["backbone_checksum"] == model.backbone_checksum()
    assert manifest["training"] == {"epochs": 1}
    total = sum(t["nbytes"] for t in manifest["tensors"])
    assert checkpoint_paths(directory, "detection")[0].stat().st_size == total


def test_checksum_mismatch(saved):
    """Test a tampered backbone checksum is detected."""
    _, directory = saved
    manifest_path = checkpoint_paths(directory, "detection")[1]
    manifest = read_json(manifest_path)
    manifest["backbone_checksum"] = "0" * 64
    atomic_write_json(manifest_path, manifest)

    with pytest.raises(CheckpointError, match="checksum mismatch"):
        load_checkpoint(directory, "detection")


def test_truncated_binary(saved):
    """Test a short binary file is detected."""
    _, directory = saved
    bin_path = checkpoint_paths(directory, "detection")[0]
    bin_path.write_bytes(bin_path.read_bytes()[:100])

    with pytest.raises(CheckpointError, match="runs past the end"):
        load_checkpoint(directory, "detection")


def test_missing_checkpoint(tmp_path):
    """Test missing checkpoints raise CheckpointError."""
    with pytest.raises(CheckpointError, match="Cannot read checkpoint"):
        load_checkpoint(tmp_path, "clip")


def test_missing_binary(saved):
    """Test a manifest without its tensor file is reported as unreadable."""
    _, directory = saved
    checkpoint_paths(directory, "detection")[0].unlink()

    with pytest.raises(CheckpointError, match="Cannot read checkpoint detection"):
        load_checkpoint(directory, "detection")


def test_malformed_manifest(saved):
    """Test a manifest that is not JSON is reported through the manifest reader."""
    _, directory = saved
    checkpoint_paths(directory, "detection")[1].write_text("{not json", encoding="utf-8")

    with pytest.raises(CheckpointError, match="Malformed JSON"):
        read_manifest(directory, "detection")
    with pytest.raises(CheckpointError, match="Cannot read checkpoint detection"):
        load_checkpoint(directory, "detection")


def test_unsupported_format(saved):
    """Test foreign manifests are refused."""
    _, directory = saved
    manifest_path = checkpoint_paths(directory, "detection")[1]
    manifest = read_json(manifest_path)
    manifest["format"] = "pickle"
    atomic_write_json(manifest_path, manifest)

    with pytest.raises(CheckpointError, match="unsupported checkpoint format"):
        load_checkpoint(directory, "detection")


def test_text_bank_captions(tmp_path):
    """Test the caption order is persisted with its checksum."""
    save_text_bank_captions(["a red circle", "a blue square"], tmp_path, "abc")
    captions, checksum = load_text_bank_captions(tmp_path)
    assert captions == ["a red circle", "a blue square"]
    assert checksum == "abc"

    with pytest.raises(CheckpointError):
        load_text_bank_captions(tmp_path / "missing")
