"""Toy contrastive image-text model, dense-task derivatives and the input-gradient contract."""

import copy
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import NUM_CLASSES, caption_vocabulary, tokenize

logger = logging.getLogger(__name__)

HEAD_KINDS = ("clip_retrieval", "segmentation", "detection")
DENSE_HEAD_KINDS = ("segmentation", "detection")
BACKBONE_ORIGINS = ("scratch", "derived_from_clip")

# Shared by every model so one delta means the same thing to all of them
PIXEL_MEAN = 0.5
PIXEL_STD = 0.25

DEFAULT_WIDTHS = (16, 32, 48, 64)
MAX_LOGIT_SCALE = math.log(100.0)
_EVAL_CHUNK = 64


class ModelError(Exception):
    """Exception raised for model construction, head/target mismatches and gradient failures."""
    pass


def preprocess(images: torch.Tensor) -> torch.Tensor:
    """N x H x W x C intensities in [0, 1] to normalized N x C x H x W."""
    return (images.permute(0, 3, 1, 2) - PIXEL_MEAN) / PIXEL_STD


class Backbone(nn.Module):
    """Four-level convolutional encoder with smooth activations."""

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS):
        super().__init__()
        if len(widths) != 4:
            raise ModelError(f"Backbone needs four widths, got {list(widths)}")
        self.stem = nn.Conv2d(3, widths[0], 3, padding=1)
        self.stages = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], 3, stride=2, padding=1) for i in range(3)
        )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = [F.silu(self.stem(x))]
        for stage in self.stages:
            features.append(F.silu(stage(features[-1])))
        return features


class ClipNet(nn.Module):
    """Dual encoder: backbone + projection for images, token bag + projection for text."""

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, embed_dim: int = 64):
        super().__init__()
        self.vocabulary = caption_vocabulary()
        self.token_index = {token: i for i, token in enumerate(self.vocabulary)}
        self.backbone = Backbone(widths)
        self.image_proj = nn.Linear(widths[-1], embed_dim)
        self.token_embedding = nn.EmbeddingBag(len(self.vocabulary), embed_dim, mode="mean")
        self.text_proj = nn.Linear(embed_dim, embed_dim)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))

    def encode_image(self, x: torch.Tensor) -> torch.Tensor:
        pooled = self.backbone(x)[-1].mean(dim=(2, 3))
        return F.normalize(self.image_proj(pooled), dim=-1)

    def encode_text(self, captions: Sequence[str]) -> torch.Tensor:
        ids, offsets = [], []
        for caption in captions:
            offsets.append(len(ids))
            try:
                ids.extend(self.token_index[token] for token in tokenize(caption))
            except KeyError as e:
                raise ModelError(f"Token {e} is outside the caption vocabulary") from e
        device = self.token_embedding.weight.device
        bag = self.token_embedding(
            torch.tensor(ids, dtype=torch.long, device=device),
            torch.tensor(offsets, dtype=torch.long, device=device),
        )
        return F.normalize(self.text_proj(bag), dim=-1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode_image(x)


class SegmentationNet(nn.Module):
    """Per-pixel classifier over multi-level backbone features."""

    def __init__(self, widths: Sequence[int] = DEFAULT_WIDTHS, num_classes: int = NUM_CLASSES):
        super().__init__()
        self.backbone = Backbone(widths)
        self.fuse = nn.Conv2d(widths[1] + widths[2] + widths[3], 32, 1)
        self.classify = nn.Conv2d(32, num_classes, 1)
        self.pixel_head = nn.Conv2d(widths[0], num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        f0, f1, f2, f3 = self.backbone(x)
        size = f1.shape[-2:]
        fused = torch.cat(
            [
                f1,
                F.interpolate(f2, size=size, mode="bilinear", align_corners=False),
                F.interpolate(f3, size=size, mode="bilinear", align_corners=False),
            ],
            dim=1,
        )
        coarse = self.classify(F.silu(self.fuse(fused)))
        coarse = F.interpolate(coarse, size=f0.shape[-2:], mode="bilinear", align_corners=False)
        return coarse + self.pixel_head(f0)


class DetectionNet(nn.Module):
    """Per-cell classifier (class 0 = no object) on the coarsest backbone level."""

    def __init__(
        self,
        widths: Sequence[int] = DEFAULT_WIDTHS,
        num_classes: int = NUM_CLASSES,
        grid_size: int = 6,
    ):
        super().__init__()
        self.grid_size = grid_size
        self.backbone = Backbone(widths)
        self.hidden = nn.Conv2d(widths[3], 64, 1)
        self.classify = nn.Conv2d(64, num_classes, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        features = F.adaptive_avg_pool2d(self.backbone(x)[-1], self.grid_size)
        return self.classify(F.silu(self.hidden(features)))


def build_net(head_kind: str, architecture: Dict) -> nn.Module:
    """
    Instantiate the network for a head kind from its architecture record.

    Args:
        head_kind: One of HEAD_KINDS
        architecture: Dict with "widths" and head-specific sizes

    Returns:
        Freshly initialized nn.Module
    """
    widths = tuple(architecture.get("widths", DEFAULT_WIDTHS))
    if head_kind == "clip_retrieval":
        return ClipNet(widths, architecture.get("embed_dim", 64))
    if head_kind == "segmentation":
        return SegmentationNet(widths, architecture.get("num_classes", NUM_CLASSES))
    if head_kind == "detection":
        return DetectionNet(
            widths, architecture.get("num_classes", NUM_CLASSES), architecture.get("grid_size", 6)
        )
    raise ModelError(f"Unknown head kind: {head_kind}")


def tensor_checksum(module: nn.Module) -> str:
    """SHA-256 over a module's state dict, in key order, as float32 bytes."""
    digest = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().to(torch.float32).cpu().numpy().astype("<f4").tobytes())
    return digest.hexdigest()


def dense_cross_entropy(logits: torch.Tensor, target) -> torch.Tensor:
    """
    Cross-entropy averaged over every pixel or cell position.

    Args:
        logits: 1 x K x h x w (or N x K x h x w) class scores
        target: h x w (or N x h x w) integer class ids

    Raises:
        ModelError: If the target does not match the head's spatial layout
    """
    target = torch.as_tensor(np.asarray(target), dtype=torch.long)
    if target.dim() == 2:
        target = target.unsqueeze(0)
    if tuple(target.shape[-2:]) != tuple(logits.shape[-2:]) or target.shape[0] != logits.shape[0]:
        raise ModelError(
            f"Target shape {tuple(target.shape)} does not match head output {tuple(logits.shape)}"
        )
    if target.min() < 0 or target.max() >= logits.shape[1]:
        raise ModelError("Target contains class ids outside the head's range")
    return F.cross_entropy(logits, target)


class DifferentiableModel:
    """A network plus its head kind, lineage and the deterministic input-gradient contract."""

    def __init__(
        self,
        net: nn.Module,
        head_kind: str,
        backbone_origin: str = "scratch",
        parent_checksum: Optional[str] = None,
        architecture: Optional[Dict] = None,
        hyperparams: Optional[Dict] = None,
        name: Optional[str] = None,
    ):
        """
        Initialize a DifferentiableModel.

        Args:
            net: Underlying torch module
            head_kind: One of HEAD_KINDS
            backbone_origin: "scratch" or "derived_from_clip"
            parent_checksum: Backbone checksum of the CLIP model this one was derived from
            architecture: Constructor record used to rebuild the net from a checkpoint
            hyperparams: Training hyperparameters, echoed into manifests
            name: Identifier used in logs and error messages
        """
        if head_kind not in HEAD_KINDS:
            raise ModelError(f"Unknown head kind: {head_kind}")
        if backbone_origin not in BACKBONE_ORIGINS:
            raise ModelError(f"Unknown backbone origin: {backbone_origin}")
        self.net = net.eval()
        self.head_kind = head_kind
        self.backbone_origin = backbone_origin
        self.parent_checksum = parent_checksum
        self.architecture = dict(architecture or {})
        self.hyperparams = dict(hyperparams or {})
        self.name = name or head_kind
        self.metrics: Dict[str, float] = {}

    def __repr__(self):
        return f"DifferentiableModel({self.name}, head={self.head_kind}, dtype={self.dtype})"

    @property
    def dtype(self) -> torch.dtype:
        return next(self.net.parameters()).dtype

    @property
    def numpy_dtype(self):
        return np.float64 if self.dtype == torch.float64 else np.float32

    @property
    def is_dense(self) -> bool:
        return self.head_kind in DENSE_HEAD_KINDS

    @property
    def temperature(self) -> float:
        """Softmax temperature learned by the contrastive model."""
        if self.head_kind != "clip_retrieval":
            raise ModelError(f"{self.name} has no retrieval temperature")
        return float(torch.exp(-self.net.logit_scale.detach()))

    def to_precision(self, dtype: torch.dtype) -> "DifferentiableModel":
        """Copy of this model with parameters cast to dtype, in eval mode."""
        clone = copy.copy(self)
        clone.net = copy.deepcopy(self.net).to(dtype).eval()
        clone.metrics = dict(self.metrics)
        return clone

    def backbone_checksum(self) -> str:
        return tensor_checksum(self.net.backbone)

    def _as_batch(self, images: np.ndarray) -> torch.Tensor:
        images = np.asarray(images)
        if images.ndim == 3:
            images = images[None]
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ModelError(f"Expected N x H x W x 3 images, got {images.shape}")
        return torch.tensor(images, dtype=self.dtype)

    def outputs(self, images: torch.Tensor) -> torch.Tensor:
        """Differentiable head outputs: image embeddings for CLIP, logits for dense heads."""
        return self.net(preprocess(images))

    @torch.no_grad()
    def predict(self, images: np.ndarray) -> np.ndarray:
        """Head outputs for a batch of images, evaluated in chunks."""
        batch = self._as_batch(images)
        chunks = [self.outputs(batch[i:i + _EVAL_CHUNK]) for i in range(0, len(batch), _EVAL_CHUNK)]
        return torch.cat(chunks).numpy()

    def image_embeddings(self, images: np.ndarray) -> np.ndarray:
        if self.head_kind != "clip_retrieval":
            raise ModelError(f"{self.name} does not produce image embeddings")
        return self.predict(images)

    @torch.no_grad()
    def text_embeddings(self, captions: Sequence[str]) -> np.ndarray:
        if self.head_kind != "clip_retrieval":
            raise ModelError(f"{self.name} has no text encoder")
        return self.net.encode_text(list(captions)).numpy()

    def predict_masks(self, images: np.ndarray) -> np.ndarray:
        """Per-pixel argmax class ids, N x H x W."""
        if self.head_kind != "segmentation":
            raise ModelError(f"{self.name} is not a segmentation model")
        return self.predict(images).argmax(axis=1)

    def predict_cells(self, images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Per-cell (objectness score, foreground class), each N x G x G."""
        if self.head_kind != "detection":
            raise ModelError(f"{self.name} is not a detection model")
        logits = torch.from_numpy(self.predict(images))
        probs = torch.softmax(logits, dim=1).numpy()
        objectness = 1.0 - probs[:, 0]
        classes = probs[:, 1:].argmax(axis=1) + 1
        return objectness, classes

    def value_and_grad(
        self, image: np.ndarray, loss_fn: Callable[[torch.Tensor], torch.Tensor]
    ) -> Tuple[float, np.ndarray]:
        """
        Evaluate a scalar loss of the head outputs and its gradient w.r.t. the image.

        Args:
            image: H x W x C image
            loss_fn: Maps head outputs (batch of one) to a scalar tensor

        Returns:
            Tuple of (loss, gradient with the image's shape)
        """
        x = self._as_batch(image).requires_grad_(True)
        loss = loss_fn(self.outputs(x))
        (grad,) = torch.autograd.grad(loss, x)
        return float(loss.detach()), grad[0].numpy().astype(np.asarray(image).dtype, copy=False)


def input_gradient(model: DifferentiableModel, image: np.ndarray, target) -> Tuple[float, np.ndarray]:
    """
    Loss and input gradient of a model at one image.

    Args:
        model: Model to differentiate
        image: H x W x C image
        target: Integer mask / cell-class grid for dense heads, or any object with a
            ``loss(outputs)`` method (the CLIP KL target)

    Returns:
        Tuple of (loss, d loss / d image)

    Raises:
        ModelError: If the target does not fit the head, or evaluation fails
    """
    if hasattr(target, "loss"):
        loss_fn = target.loss
    else:
        if not model.is_dense:
            raise ModelError(f"{model.name}: {model.head_kind} models need a loss target, not labels")
        labels = np.asarray(target)

        def loss_fn(logits):
            return dense_cross_entropy(logits, labels)

    try:
        return model.value_and_grad(image, loss_fn)
    except ModelError as e:
        raise ModelError(f"{model.name}: {e}") from e
    except Exception as e:
        raise ModelError(f"{model.name}: gradient evaluation failed: {e}") from e


@dataclass
class ModelSet:
    """The CLIP model plus the dense models (and their controls) keyed by head kind."""

    clip: DifferentiableModel
    dense: Dict[str, DifferentiableModel] = field(default_factory=dict)
    control: Dict[str, DifferentiableModel] = field(default_factory=dict)

    def dense_model(self, head_kind: str) -> DifferentiableModel:
        try:
            return self.dense[head_kind]
        except KeyError as e:
            raise ModelError(f"No {head_kind} model is loaded") from e

    def control_model(self, head_kind: str) -> DifferentiableModel:
        try:
            return self.control[head_kind]
        except KeyError as e:
            raise ModelError(f"No {head_kind} control model is loaded") from e
