"""Tests for workspace module."""

import os

import pytest

from stagedpgd.core.workspace import (
    OverwriteRefusedError,
    RunWorkspace,
    WorkspaceError,
    atomic_write_bytes,
    atomic_write_json,
    directory_checksum,
    dumps_json,
    read_json,
)


@pytest.fixture
def workspace(tmp_path):
    """A fresh run directory."""
    return RunWorkspace(tmp_path / "run")


def test_atomic_write_leaves_no_temporaries(tmp_path):
    """Test writes create parents and leave only the target file."""
    path = atomic_write_bytes(tmp_path / "a" / "b" / "data.bin", b"payload")
    assert path.read_bytes() == b"payload"
    assert [p.name for p in path.parent.iterdir()] == ["data.bin"]


def test_atomic_write_cleans_up_on_failure(tmp_path, monkeypatch):
    """Test a failed rename removes the temporary file and keeps the old contents."""
    target = tmp_path / "data.bin"
    target.write_bytes(b"old")

    def broken_replace(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", broken_replace)
    with pytest.raises(WorkspaceError, match="disk full"):
        atomic_write_bytes(target, b"new")

    assert target.read_bytes() == b"old"
    assert [p.name for p in tmp_path.iterdir()] == ["data.bin"]


def test_json_is_canonical(tmp_path):
    """Test JSON output has sorted keys and a trailing newline."""
    assert dumps_json({"b": 1, "a": [1, 2]}) == '{\n  "a": [\n    1,\n    2\n  ],\n  "b": 1\n}\n'
    path = atomic_write_json(tmp_path / "x.json", {"b": 1, "a": 2})
    assert read_json(path) == {"a": 2, "b": 1}


def test_read_json_errors(tmp_path):
    """Test missing and malformed JSON raise WorkspaceError."""
    with pytest.raises(WorkspaceError, match="Missing artifact"):
        read_json(tmp_path / "missing.json")

    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(WorkspaceError, match="Malformed JSON"):
        read_json(bad)


def test_directory_checksum(tmp_path):
    """Test the checksum covers names and contents but not excluded files."""
    for name in ("a", "b"):
        root = tmp_path / name
        (root / "sub").mkdir(parents=True)
        (root / "x.txt").write_text("x")
        (root / "sub" / "y.txt").write_text("y")
    assert directory_checksum(tmp_path / "a") == directory_checksum(tmp_path / "b")

    (tmp_path / "b" / "run_record.json").write_text("{}")
    assert directory_checksum(tmp_path / "a") != directory_checksum(tmp_path / "b")
    assert directory_checksum(tmp_path / "a") == directory_checksum(
        tmp_path / "b", exclude=["run_record.json"]
    )

    (tmp_path / "b" / "sub" / "y.txt").write_text("z")
    assert directory_checksum(tmp_path / "a") != directory_checksum(
        tmp_path / "b", exclude=["run_record.json"]
    )


def test_layout(workspace):
    """Test the fixed run directory layout."""
    root = workspace.path
    assert root.is_dir()
    assert workspace.dataset_dir == root / "dataset"
    assert workspace.checkpoints_dir == root / "checkpoints"
    assert workspace.row_dir("t1-segmentation-staged") == root / "attacks" / "t1-segmentation-staged"
    assert workspace.triptych_dir == root / "reports" / "triptychs"
    assert workspace.config_path.name == "config.yaml"
    assert not workspace.has_dataset()
    assert not workspace.has_checkpoint("clip")


def test_open_without_create(tmp_path):
    """Test opening a missing run directory without creating it."""
    with pytest.raises(WorkspaceError, match="is not a run directory"):
        RunWorkspace(tmp_path / "absent", create=False)


def test_prepare_dataset_dir(workspace):
    """Test an existing dataset is only replaced with overwrite."""
    target = workspace.prepare_dataset_dir()
    (target / "spec.json").write_text("{}")

    with pytest.raises(OverwriteRefusedError, match="--overwrite"):
        workspace.prepare_dataset_dir()
    assert (target / "spec.json").exists()

    target = workspace.prepare_dataset_dir(overwrite=True)
    assert target.is_dir()
    assert list(target.iterdir()) == []


def test_missing(workspace):
    """Test missing() reports absent paths only."""
    present = atomic_write_bytes(workspace.path / "here.bin", b"")
    absent = workspace.path / "gone.bin"
    assert workspace.missing([present, absent]) == [str(absent)]
