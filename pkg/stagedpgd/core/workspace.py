"""Run directory layout, atomic artifact writes and checksums."""

import hashlib
import json
import logging
import os
import shutil
import tempfile
from pathlib import Path
from typing import Any, Iterable, Optional, Union

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


class WorkspaceError(Exception):
    """Base exception for run-directory errors."""
    pass


class OverwriteRefusedError(WorkspaceError):
    """Exception raised when an existing artifact would be replaced without permission."""
    pass


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """
    Write bytes to a file through a temporary sibling and an atomic rename.

    Args:
        path: Destination file
        data: File contents

    Returns:
        Path of the written file

    Raises:
        WorkspaceError: If the write fails (no partial file is left behind)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except Exception as e:
        logger.error(f"Failed to write {path}: {e}")
        Path(tmp_name).unlink(missing_ok=True)
        raise WorkspaceError(f"Failed to write {path}: {e}") from e

    logger.debug(f"Wrote {path} ({len(data)} bytes)")
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Write UTF-8 text atomically."""
    return atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(obj: Any) -> str:
    """Canonical JSON text: sorted keys, two-space indent, trailing newline."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def atomic_write_json(path: PathLike, obj: Any) -> Path:
    """Write an object as canonical JSON atomically."""
    return atomic_write_text(path, dumps_json(obj))


def read_json(path: PathLike) -> Any:
    """Read a JSON file, raising WorkspaceError if it is missing or malformed."""
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise WorkspaceError(f"Missing artifact: {path}") from e
    except json.JSONDecodeError as e:
        raise WorkspaceError(f"Malformed JSON in {path}: {e}") from e


def file_sha256(path: PathLike) -> str:
    """SHA-256 hex digest of a file's contents."""
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def directory_checksum(directory: PathLike, exclude: Iterable[str] = ()) -> str:
    """
    Checksum a directory tree over its sorted relative paths and file contents.

    Args:
        directory: Root of the tree
        exclude: Relative paths (POSIX form) to leave out

    Returns:
        SHA-256 hex digest
    """
    directory = Path(directory)
    skipped = set(exclude)
    digest = hashlib.sha256()

    for path in sorted(p for p in directory.rglob("*") if p.is_file()):
        rel = path.relative_to(directory).as_posix()
        if rel in skipped or path.name.endswith(".tmp"):
            continue
        digest.update(rel.encode("utf-8"))
        digest.update(b"\0")
        digest.update(file_sha256(path).encode("ascii"))
        digest.update(b"\n")

    return digest.hexdigest()


class RunWorkspace:
    """Represents one run's output directory with its fixed layout."""

    def __init__(self, path: Optional[PathLike] = None, create: bool = True):
        """
        Initialize a RunWorkspace.

        Args:
            path: Output directory. If None, uses the current directory.
            create: Create the directory when it does not exist
        """
        self.path = Path(path) if path else Path.cwd()
        if create:
            self.path.mkdir(parents=True, exist_ok=True)
        elif not self.path.is_dir():
            raise WorkspaceError(f"{self.path} is not a run directory")

    @property
    def dataset_dir(self) -> Path:
        return self.path / "dataset"

    @property
    def checkpoints_dir(self) -> Path:
        return self.path / "checkpoints"

    @property
    def attacks_dir(self) -> Path:
        return self.path / "attacks"

    @property
    def reports_dir(self) -> Path:
        return self.path / "reports"

    @property
    def triptych_dir(self) -> Path:
        return self.reports_dir / "triptychs"

    @property
    def config_path(self) -> Path:
        return self.path / "config.yaml"

    @property
    def record_path(self) -> Path:
        return self.path / "run_record.json"

    def row_dir(self, row_id: str) -> Path:
        """Directory holding the per-sample results of one attack row."""
        return self.attacks_dir / row_id

    def has_dataset(self) -> bool:
        """Check whether a generated dataset is present."""
        return (self.dataset_dir / "spec.json").is_file() and (
            self.dataset_dir / "annotations.jsonl"
        ).is_file()

    def has_checkpoint(self, name: str) -> bool:
        """Check whether a named checkpoint (binary + manifest) is present."""
        return (self.checkpoints_dir / f"{name}.bin").is_file() and (
            self.checkpoints_dir / f"{name}.json"
        ).is_file()

    def prepare_dataset_dir(self, overwrite: bool = False) -> Path:
        """
        Make sure the dataset directory can be (re)written.

        Args:
            overwrite: Remove an existing dataset instead of refusing

        Returns:
            The (empty) dataset directory

        Raises:
            OverwriteRefusedError: If a dataset exists and overwrite is False
        """
        target = self.dataset_dir
        if target.exists() and any(target.iterdir()):
            if not overwrite:
                raise OverwriteRefusedError(
                    f"{target} already contains a dataset; pass --overwrite to replace it"
                )
            logger.info(f"Removing existing dataset at {target}")
            shutil.rmtree(target)

        target.mkdir(parents=True, exist_ok=True)
        return target

    def missing(self, paths: Iterable[PathLike]) -> list:
        """Return the subset of paths that do not exist."""
        return [str(p) for p in paths if not Path(p).exists()]
