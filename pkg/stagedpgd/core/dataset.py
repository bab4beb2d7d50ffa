"""Synthetic colored-shapes dataset with captions, segmentation masks and grid cell labels."""

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image

from .workspace import atomic_write_bytes, atomic_write_json, atomic_write_text, read_json

logger = logging.getLogger(__name__)

COLORS = ("red", "green", "blue")
SHAPES = ("circle", "square", "triangle")
NUM_CLASSES = 1 + len(COLORS) * len(SHAPES)
SPLITS = ("train", "val", "test")

BASE_RGB = {
    "red": (200, 55, 50),
    "green": (60, 170, 65),
    "blue": (55, 75, 205),
}

# Gap in pixels kept between shape bounding boxes so no shape occludes another
_PLACEMENT_GAP = 2
_PLACEMENT_ATTEMPTS = 200


class DatasetError(ValueError):
    """Exception raised for invalid dataset specs or unreadable dataset directories."""
    pass


def class_id(color: str, shape: str) -> int:
    """Class id of a (color, shape) pair; 0 is background."""
    return 1 + COLORS.index(color) * len(SHAPES) + SHAPES.index(shape)


def class_name(cid: int) -> str:
    """Human-readable name of a class id."""
    if cid == 0:
        return "background"
    color, shape = divmod(cid - 1, len(SHAPES))
    return f"{COLORS[color]} {SHAPES[shape]}"


def caption_for(class_ids) -> str:
    """Templated caption naming each class once, in class-id order."""
    return " and ".join(f"a {class_name(c)}" for c in sorted(set(int(c) for c in class_ids)))


def tokenize(caption: str) -> List[str]:
    """Whitespace tokens plus adjacent-pair tokens, so colors stay bound to their shapes."""
    words = caption.split()
    return words + [f"{a}_{b}" for a, b in zip(words, words[1:])]


def caption_vocabulary() -> List[str]:
    """Closed token vocabulary of the caption template."""
    words = ["a", "and", *COLORS, *SHAPES]
    pairs = [f"a_{c}" for c in COLORS]
    pairs += [f"{c}_{s}" for c in COLORS for s in SHAPES]
    pairs += [f"{s}_and" for s in SHAPES]
    pairs.append("and_a")
    return words + pairs


@dataclass(frozen=True)
class DatasetSpec:
    """Generation parameters of the synthetic dataset."""

    image_size: int = 48
    min_shapes: int = 1
    max_shapes: int = 3
    min_shape_size: int = 12
    max_shape_size: int = 18
    grid_size: int = 6
    train_size: int = 3000
    val_size: int = 200
    test_size: int = 100
    color_jitter: int = 20
    noise_level: int = 12
    seed: int = 0

    def validate(self) -> None:
        """
        Check that the spec can produce consistent samples.

        Raises:
            DatasetError: Naming the offending field
        """
        if self.image_size < 8:
            raise DatasetError("image_size must be at least 8")
        if self.grid_size < 1 or self.image_size % self.grid_size:
            raise DatasetError("grid_size must be positive and divide image_size")
        if not 1 <= self.min_shapes <= self.max_shapes <= NUM_CLASSES - 1:
            raise DatasetError(
                f"min_shapes/max_shapes must satisfy 1 <= min <= max <= {NUM_CLASSES - 1}"
            )
        if not 4 <= self.min_shape_size <= self.max_shape_size:
            raise DatasetError("min_shape_size/max_shape_size must satisfy 4 <= min <= max")

        per_row = self.image_size // (self.max_shape_size + _PLACEMENT_GAP)
        if per_row * per_row < self.max_shapes:
            raise DatasetError(
                f"image_size {self.image_size} is too small for {self.max_shapes} shapes "
                f"of size {self.max_shape_size}"
            )
        for name in ("train_size", "val_size", "test_size"):
            if getattr(self, name) < 0:
                raise DatasetError(f"{name} must be non-negative")
        if not 0 <= self.color_jitter <= 60 or not 0 <= self.noise_level <= 60:
            raise DatasetError("color_jitter and noise_level must lie in [0, 60]")

    def split_size(self, split: str) -> int:
        return getattr(self, f"{split}_size")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SyntheticSample:
    """One image with its caption, per-pixel mask and per-cell labels."""

    sample_id: str
    pixels: np.ndarray  # H x W x 3 uint8
    caption: str
    seg_mask: np.ndarray  # H x W uint8 class ids
    cell_labels: np.ndarray  # G x G x 2 int64 (objectness, class id)

    @property
    def image(self) -> np.ndarray:
        """Pixels as float64 intensities in [0, 1]."""
        return self.pixels.astype(np.float64) / 255.0

    @property
    def checksum(self) -> str:
        """SHA-256 of the uint8 pixels."""
        return hashlib.sha256(np.ascontiguousarray(self.pixels).tobytes()).hexdigest()

    @property
    def cell_classes(self) -> np.ndarray:
        """Per-cell class ids with 0 for cells without an object."""
        return self.cell_labels[..., 1] * self.cell_labels[..., 0]

    @property
    def class_ids(self) -> List[int]:
        return [int(c) for c in np.unique(self.seg_mask) if c != 0]


@dataclass
class SyntheticDataset:
    """Train/val/test splits generated from one spec."""

    spec: DatasetSpec
    splits: Dict[str, List[SyntheticSample]] = field(default_factory=dict)

    @property
    def train(self) -> List[SyntheticSample]:
        return self.splits["train"]

    @property
    def val(self) -> List[SyntheticSample]:
        return self.splits["val"]

    @property
    def test(self) -> List[SyntheticSample]:
        return self.splits["test"]


def _shape_footprint(shape: str, size: int) -> np.ndarray:
    """Boolean size x size footprint rasterized with integer arithmetic only."""
    # Pixel centers in doubled coordinates are odd integers 1, 3, ..., 2*size - 1
    centers = 2 * np.arange(size, dtype=np.int64) + 1
    py, px = np.meshgrid(centers, centers, indexing="ij")

    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "circle":
        return (px - size) ** 2 + (py - size) ** 2 <= size * size
    if shape == "triangle":
        return 2 * np.abs(px - size) <= py
    raise DatasetError(f"Unknown shape: {shape}")


def _place_boxes(rng: np.random.Generator, spec: DatasetSpec, sizes: List[int]) -> List[Tuple[int, int]]:
    """Top-left corners of non-overlapping boxes, or an empty list when placement fails."""
    placed: List[Tuple[int, int, int]] = []
    for size in sizes:
        for _ in range(_PLACEMENT_ATTEMPTS):
            y = int(rng.integers(0, spec.image_size - size + 1))
            x = int(rng.integers(0, spec.image_size - size + 1))
            if all(
                y + size + _PLACEMENT_GAP <= py
                or py + psize + _PLACEMENT_GAP <= y
                or x + size + _PLACEMENT_GAP <= px
                or px + psize + _PLACEMENT_GAP <= x
                for py, px, psize in placed
            ):
                placed.append((y, x, size))
                break
        else:
            return []
    return [(y, x) for y, x, _ in placed]


def compute_cell_labels(seg_mask: np.ndarray, grid_size: int) -> np.ndarray:
    """
    Label each grid cell with the foreground class covering most of it.

    A cell is an object cell when its dominant foreground class covers at least a
    quarter of the cell's pixels.

    Args:
        seg_mask: H x W class-id mask
        grid_size: Number of cells per side

    Returns:
        grid_size x grid_size x 2 array of (objectness, class id)
    """
    cell = seg_mask.shape[0] // grid_size
    labels = np.zeros((grid_size, grid_size, 2), dtype=np.int64)

    for gy in range(grid_size):
        for gx in range(grid_size):
            block = seg_mask[gy * cell:(gy + 1) * cell, gx * cell:(gx + 1) * cell]
            counts = np.bincount(block.ravel(), minlength=NUM_CLASSES)
            best = int(np.argmax(counts[1:])) + 1
            if counts[best] * 4 >= cell * cell:
                labels[gy, gx] = (1, best)

    return labels


def _render_sample(rng: np.random.Generator, spec: DatasetSpec, sample_id: str) -> SyntheticSample:
    """Draw one sample from the generator stream."""
    size_px = spec.image_size

    for _ in range(50):
        count = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
        classes = sorted(int(c) + 1 for c in rng.choice(NUM_CLASSES - 1, size=count, replace=False))
        sizes = [int(rng.integers(spec.min_shape_size, spec.max_shape_size + 1)) for _ in classes]
        corners = _place_boxes(rng, spec, sizes)
        if corners:
            break
    else:
        raise DatasetError(f"Could not place shapes for {sample_id}; image_size is too small")

    background = int(rng.integers(90, 161))
    canvas = np.full((size_px, size_px, 3), background, dtype=np.int64)
    mask = np.zeros((size_px, size_px), dtype=np.uint8)

    for cid, size, (y, x) in zip(classes, sizes, corners):
        color_idx, shape_idx = divmod(cid - 1, len(SHAPES))
        footprint = _shape_footprint(SHAPES[shape_idx], size)
        base = np.array(BASE_RGB[COLORS[color_idx]], dtype=np.int64)
        jitter = rng.integers(-spec.color_jitter, spec.color_jitter + 1, size=3)

        region = canvas[y:y + size, x:x + size]
        region[footprint] = base + jitter
        mask[y:y + size, x:x + size][footprint] = cid

    noise = rng.integers(-spec.noise_level, spec.noise_level + 1, size=canvas.shape)
    pixels = np.clip(canvas + noise, 0, 255).astype(np.uint8)

    return SyntheticSample(
        sample_id=sample_id,
        pixels=pixels,
        caption=caption_for(classes),
        seg_mask=mask,
        cell_labels=compute_cell_labels(mask, spec.grid_size),
    )


def generate_dataset(spec: DatasetSpec) -> SyntheticDataset:
    """
    Generate train/val/test splits as a pure function of the spec.

    Args:
        spec: Dataset spec (its seed included)

    Returns:
        SyntheticDataset whose masks, cell labels and captions agree by construction

    Raises:
        DatasetError: If the spec is degenerate
    """
    spec.validate()
    logger.info(f"Generating dataset (seed={spec.seed}, image_size={spec.image_size})...")

    dataset = SyntheticDataset(spec=spec)
    for index, split in enumerate(SPLITS):
        rng = np.random.default_rng([spec.seed, index])
        dataset.splits[split] = [
            _render_sample(rng, spec, f"{split}-{i:05d}") for i in range(spec.split_size(split))
        ]
        logger.debug(f"Generated {len(dataset.splits[split])} {split} samples")

    return dataset


def png_bytes(array: np.ndarray) -> bytes:
    """Encode a uint8 array as PNG."""
    buffer = io.BytesIO()
    Image.fromarray(array).save(buffer, format="PNG")
    return buffer.getvalue()


def save_dataset(dataset: SyntheticDataset, directory: Path) -> Path:
    """
    Persist a dataset as PNG images, PNG masks and one JSON-lines annotation file.

    Args:
        dataset: Generated dataset
        directory: Target directory (expected to be empty)

    Returns:
        The dataset directory
    """
    directory = Path(directory)
    lines = []

    for split in SPLITS:
        for sample in dataset.splits[split]:
            image_rel = f"images/{sample.sample_id}.png"
            mask_rel = f"masks/{sample.sample_id}.png"
            atomic_write_bytes(directory / image_rel, png_bytes(sample.pixels))
            atomic_write_bytes(directory / mask_rel, png_bytes(sample.seg_mask))
            lines.append(
                json.dumps(
                    {
                        "id": sample.sample_id,
                        "split": split,
                        "caption": sample.caption,
                        "image": image_rel,
                        "mask": mask_rel,
                        "cell_labels": sample.cell_labels.tolist(),
                    },
                    sort_keys=True,
                )
            )

    atomic_write_text(directory / "annotations.jsonl", "\n".join(lines) + "\n")
    atomic_write_json(directory / "spec.json", dataset.spec.to_dict())
    logger.info(f"Saved {len(lines)} samples to {directory}")
    return directory


def load_dataset(directory: Path) -> SyntheticDataset:
    """
    Load a dataset written by save_dataset.

    Raises:
        DatasetError: If the directory is missing files or is inconsistent
    """
    directory = Path(directory)
    try:
        spec = DatasetSpec(**read_json(directory / "spec.json"))
        records = [
            json.loads(line)
            for line in (directory / "annotations.jsonl").read_text(encoding="utf-8").splitlines()
            if line.strip()
        ]
    except Exception as e:
        raise DatasetError(f"Cannot read dataset at {directory}: {e}") from e

    dataset = SyntheticDataset(spec=spec, splits={split: [] for split in SPLITS})
    for record in records:
        try:
            with Image.open(directory / record["image"]) as img:
                pixels = np.array(img.convert("RGB"), dtype=np.uint8)
            with Image.open(directory / record["mask"]) as img:
                mask = np.array(img, dtype=np.uint8)
        except OSError as e:
            raise DatasetError(f"Cannot read images of {record['id']}: {e}") from e

        dataset.splits[record["split"]].append(
            SyntheticSample(
                sample_id=record["id"],
                pixels=pixels,
                caption=record["caption"],
                seg_mask=mask,
                cell_labels=np.array(record["cell_labels"], dtype=np.int64),
            )
        )

    logger.info(f"Loaded {len(records)} samples from {directory}")
    return dataset
