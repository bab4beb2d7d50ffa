"""Flat binary checkpoints with JSON manifests, and the persisted text bank."""

import logging
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .models import DifferentiableModel, build_net
from .workspace import atomic_write_bytes, atomic_write_json, read_json, WorkspaceError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "stagedpgd-flat-v1"
TEXT_BANK_FILE = "text_bank.json"


class CheckpointError(Exception):
    """Exception raised for unreadable or inconsistent checkpoints."""
    pass


def checkpoint_paths(directory: Path, name: str) -> Tuple[Path, Path]:
    directory = Path(directory)
    return directory / f"{name}.bin", directory / f"{name}.json"


def save_checkpoint(
    model: DifferentiableModel, directory: Path, extra: Optional[Dict] = None
) -> Tuple[Path, Path]:
    """
    Write a model as concatenated little-endian float32 tensors plus a JSON manifest.

    Args:
        model: Model to save (any precision; stored as float32)
        directory: Checkpoint directory
        extra: Additional manifest fields (e.g. the training summary)

    Returns:
        Tuple of (binary path, manifest path)
    """
    bin_path, manifest_path = checkpoint_paths(directory, model.name)

    tensors, chunks, offset = [], [], 0
    for key, tensor in model.net.state_dict().items():
        array = tensor.detach().to(torch.float32).cpu().numpy().astype("<f4")
        data = array.tobytes()
        tensors.append({"name": key, "shape": list(array.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)

    manifest = {
        "format": CHECKPOINT_FORMAT,
        "name": model.name,
        "head_kind": model.head_kind,
        "backbone_origin": model.backbone_origin,
        "backbone_checksum": model.backbone_checksum(),
        "parent_checksum": model.parent_checksum,
        "architecture": model.architecture,
        "hyperparams": model.hyperparams,
        "metrics": model.metrics,
        "tensors": tensors,
    }
    if extra:
        manifest.update(extra)

    try:
        atomic_write_bytes(bin_path, b"".join(chunks))
        atomic_write_json(manifest_path, manifest)
    except WorkspaceError as e:
        raise CheckpointError(f"Failed to save checkpoint {model.name}: {e}") from e

    logger.info(f"Saved checkpoint {model.name} ({offset} bytes) to {directory}")
    return bin_path, manifest_path


def load_checkpoint(
    directory: Path, name: str, dtype: torch.dtype = torch.float64
) -> DifferentiableModel:
    """
    Rebuild a model from its checkpoint and verify the stored backbone checksum.

    Args:
        directory: Checkpoint directory
        name: Checkpoint name (e.g. "clip", "segmentation")
        dtype: Precision to return the model in

    Returns:
        DifferentiableModel in eval mode

    Raises:
        CheckpointError: If files are missing, malformed or fail verification
    """
    manifest = read_manifest(directory, name)
    try:
        blob = checkpoint_paths(directory, name)[0].read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {name}: {e}") from e

    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{name}: unsupported checkpoint format {manifest.get('format')!r}")

    net = build_net(manifest["head_kind"], manifest.get("architecture", {}))
    state = {}
    for entry in manifest["tensors"]:
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"{name}: tensor {entry['name']} runs past the end of the file")
        array = np.frombuffer(blob[entry["offset"]:end], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.copy())

    try:
        net.load_state_dict(state)
    except RuntimeError as e:
        raise CheckpointError(f"{name}: tensors do not match the architecture: {e}") from e

    model = DifferentiableModel(
        net,
        manifest["head_kind"],
        backbone_origin=manifest.get("backbone_origin", "scratch"),
        parent_checksum=manifest.get("parent_checksum"),
        architecture=manifest.get("architecture", {}),
        hyperparams=manifest.get("hyperparams", {}),
        name=manifest.get("name", name),
    )
    model.metrics = dict(manifest.get("metrics", {}))

    if model.backbone_checksum() != manifest.get("backbone_checksum"):
        raise CheckpointError(f"{name}: backbone checksum mismatch")

    logger.debug(f"Loaded checkpoint {name} as {dtype}")
    return model.to_precision(dtype)


def read_manifest(directory: Path, name: str) -> Dict:
    """Manifest of a stored checkpoint."""
    try:
        return read_json(checkpoint_paths(directory, name)[1])
    except WorkspaceError as e:
        raise CheckpointError(f"Cannot read checkpoint {name}: {e}") from e


def save_text_bank_captions(captions, directory: Path, checksum: str) -> Path:
    """Persist the bank's caption order (embeddings are recomputed from the model)."""
    return atomic_write_json(
        Path(directory) / TEXT_BANK_FILE, {"captions": list(captions), "checksum": checksum}
    )


def load_text_bank_captions(directory: Path) -> Tuple[list, str]:
    try:
        data = read_json(Path(directory) / TEXT_BANK_FILE)
    except WorkspaceError as e:
        raise CheckpointError(str(e)) from e
    return data["captions"], data["checksum"]
