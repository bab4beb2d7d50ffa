"""Training of the contrastive model and its dense derivatives, with quality gates."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .config import ClipTrainingConfig, DenseTrainingConfig, derive_seed
from .dataset import SyntheticSample
from .metrics import DENSE_METRIC_NAMES, dense_task_metric, recall_at_1
from .models import (
    Backbone,
    ClipNet,
    DifferentiableModel,
    ModelError,
    build_net,
    dense_cross_entropy,
    preprocess,
)
from .objectives import TextBank, task_target

logger = logging.getLogger(__name__)


class GateError(Exception):
    """Exception raised when a trained model misses its quality gate."""

    def __init__(self, message: str, summary: Optional["TrainingSummary"] = None):
        self.summary = summary
        super().__init__(message)


@dataclass
class TrainingSummary:
    """Outcome of one training run."""

    name: str
    head_kind: str
    metric_name: str
    metric_value: float
    gate: Optional[float]
    epochs: int
    losses: List[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.gate is None or self.metric_value >= self.gate

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["passed"] = self.passed
        return data


def _stack_images(samples: Sequence[SyntheticSample]) -> torch.Tensor:
    return torch.tensor(np.stack([s.pixels for s in samples]), dtype=torch.float32) / 255.0


def _batches(rng: np.random.Generator, n: int, batch_size: int):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _seed_torch(seed: int) -> None:
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def contrastive_loss(
    image_embeddings: torch.Tensor, text_embeddings: torch.Tensor, logit_scale: torch.Tensor, captions
) -> torch.Tensor:
    """
    Symmetric cross-entropy over the image-text similarity matrix.

    Identical captions inside a batch all count as positives, with the target mass
    split evenly between them.
    """
    logits = logit_scale.exp() * image_embeddings @ text_embeddings.T
    codes = {c: i for i, c in enumerate(dict.fromkeys(captions))}
    ids = torch.tensor([codes[c] for c in captions])
    targets = (ids[:, None] == ids[None, :]).to(logits.dtype)
    targets = targets / targets.sum(dim=1, keepdim=True)
    image_loss = -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()
    text_loss = -(targets * F.log_softmax(logits.T, dim=1)).sum(dim=1).mean()
    return (image_loss + text_loss) / 2


def train_toy_clip(
    train: Sequence[SyntheticSample],
    test: Sequence[SyntheticSample],
    hyperparams: ClipTrainingConfig,
    widths: Sequence[int],
    seed: int,
    eval_dtype: torch.dtype = torch.float64,
    enforce_gate: bool = True,
) -> Tuple[DifferentiableModel, TrainingSummary]:
    """
    Train the contrastive model and check test-bank Recall@1 against the gate.

    Args:
        train: Training samples
        test: Test samples; their distinct captions form the retrieval bank
        hyperparams: Epochs, batch size, learning rate, embedding size and gate
        widths: Backbone widths
        seed: Training seed
        eval_dtype: Precision the gate is measured in
        enforce_gate: Raise GateError when the gate is missed

    Returns:
        Tuple of (float32 model, summary)

    Raises:
        GateError: If Recall@1 is below the gate and enforce_gate is True
    """
    if not train:
        raise ModelError("Cannot train on an empty training split")
    _seed_torch(seed)
    rng = np.random.default_rng(seed)

    architecture = {"widths": list(widths), "embed_dim": hyperparams.embed_dim}
    net = ClipNet(widths, hyperparams.embed_dim)
    images = _stack_images(train)
    captions = [s.caption for s in train]

    steps = hyperparams.epochs * math.ceil(len(train) / hyperparams.batch_size)
    optimizer = torch.optim.Adam(net.parameters(), lr=hyperparams.learning_rate)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(steps, 1))

    logger.info(f"Training contrastive model on {len(train)} samples for {hyperparams.epochs} epochs...")
    losses = []
    net.train()
    for epoch in range(hyperparams.epochs):
        total, count = 0.0, 0
        for batch in _batches(rng, len(train), hyperparams.batch_size):
            batch_captions = [captions[i] for i in batch]
            loss = contrastive_loss(
                net.encode_image(preprocess(images[batch])),
                net.encode_text(batch_captions),
                net.logit_scale,
                batch_captions,
            )
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            with torch.no_grad():
                net.logit_scale.clamp_(0.0, math.log(100.0))
            total += float(loss) * len(batch)
            count += len(batch)
        losses.append(total / count)
        logger.debug(f"clip epoch {epoch + 1}: loss {losses[-1]:.4f}")

    model = DifferentiableModel(
        net,
        "clip_retrieval",
        backbone_origin="scratch",
        architecture=architecture,
        hyperparams=asdict(hyperparams),
        name="clip",
    )

    evaluated = model.to_precision(eval_dtype)
    bank = TextBank.build(evaluated, TextBank.unique_captions(test))
    recall = recall_at_1(
        evaluated, np.stack([s.image for s in test]), bank, [s.caption for s in test]
    )
    model.metrics = {"recall_at_1": recall}

    summary = TrainingSummary(
        name="clip",
        head_kind="clip_retrieval",
        metric_name="Recall@1",
        metric_value=recall,
        gate=hyperparams.recall_gate,
        epochs=hyperparams.epochs,
        losses=losses,
    )
    logger.info(f"Contrastive model test Recall@1 = {recall:.3f} (gate {hyperparams.recall_gate})")
    if enforce_gate and not summary.passed:
        raise GateError(
            f"Contrastive model Recall@1 {recall:.3f} is below the gate {hyperparams.recall_gate}",
            summary,
        )
    return model, summary


def derive_dense_model(
    clip_model: DifferentiableModel,
    head_kind: str,
    train: Sequence[SyntheticSample],
    test: Sequence[SyntheticSample],
    hyperparams: DenseTrainingConfig,
    seed: int,
    eval_dtype: torch.dtype = torch.float64,
    freeze_backbone: bool = False,
    enforce_gate: bool = True,
) -> Tuple[DifferentiableModel, TrainingSummary]:
    """
    Fine-tune a dense head on a backbone copied from the contrastive model.

    With freeze_backbone the backbone is instead freshly initialized and kept fixed;
    that control model shares nothing with the contrastive model and has no gate.

    Args:
        clip_model: Trained contrastive model
        head_kind: "segmentation" or "detection"
        train: Training samples
        test: Test samples the gate is measured on
        hyperparams: Epochs, batch size, learning rate and gates
        seed: Training seed
        eval_dtype: Precision the gate is measured in
        freeze_backbone: Train the random-backbone control model instead
        enforce_gate: Raise GateError when the gate is missed

    Returns:
        Tuple of (float32 model, summary)
    """
    if head_kind not in DENSE_METRIC_NAMES:
        raise ModelError(f"Unknown dense head kind: {head_kind}")
    if not train:
        raise ModelError("Cannot train on an empty training split")
    _seed_torch(seed)
    rng = np.random.default_rng(seed)

    widths = clip_model.architecture.get("widths")
    architecture = {"widths": list(widths)}
    if head_kind == "detection":
        architecture["grid_size"] = int(train[0].cell_labels.shape[0])
    net = build_net(head_kind, architecture)

    name = f"{head_kind}-control" if freeze_backbone else head_kind
    parent = clip_model.backbone_checksum()
    if freeze_backbone:
        net.backbone = Backbone(widths)
        for param in net.backbone.parameters():
            param.requires_grad_(False)
        origin, parent = "scratch", None
    else:
        net.backbone.load_state_dict(clip_model.net.backbone.state_dict())
        origin = "derived_from_clip"

    images = _stack_images(train)
    targets = torch.tensor(np.stack([task_target(s, head_kind) for s in train]))

    trainable = [p for p in net.parameters() if p.requires_grad]
    steps = hyperparams.epochs * math.ceil(len(train) / hyperparams.batch_size)
    optimizer = torch.optim.Adam(trainable, lr=hyperparams.learning_rate)
    scheduler = torch.optim.lr_scheduler.CosineAnnealingLR(optimizer, T_max=max(steps, 1))

    logger.info(f"Training {name} model for {hyperparams.epochs} epochs...")
    losses = []
    net.train()
    for epoch in range(hyperparams.epochs):
        total, count = 0.0, 0
        for batch in _batches(rng, len(train), hyperparams.batch_size):
            loss = dense_cross_entropy(net(preprocess(images[batch])), targets[batch])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            scheduler.step()
            total += float(loss) * len(batch)
            count += len(batch)
        losses.append(total / count)
        logger.debug(f"{name} epoch {epoch + 1}: loss {losses[-1]:.4f}")

    hyper = asdict(hyperparams)
    hyper["head_kinds"] = list(hyperparams.head_kinds)
    hyper["freeze_backbone"] = freeze_backbone
    model = DifferentiableModel(
        net,
        head_kind,
        backbone_origin=origin,
        parent_checksum=parent,
        architecture=architecture,
        hyperparams=hyper,
        name=name,
    )

    metric_name = DENSE_METRIC_NAMES[head_kind]
    value = dense_task_metric(
        model.to_precision(eval_dtype), np.stack([s.image for s in test]), test
    )
    model.metrics = {metric_name: value}

    gate = None
    if not freeze_backbone:
        gate = hyperparams.miou_gate if head_kind == "segmentation" else hyperparams.map_gate
    summary = TrainingSummary(
        name=name,
        head_kind=head_kind,
        metric_name=metric_name,
        metric_value=value,
        gate=gate,
        epochs=hyperparams.epochs,
        losses=losses,
    )
    logger.info(f"{name} test {metric_name} = {value:.3f}" + (f" (gate {gate})" if gate else ""))
    if enforce_gate and not summary.passed:
        raise GateError(f"{name} {metric_name} {value:.3f} is below the gate {gate}", summary)
    return model, summary


def training_seeds(master: int, head_kinds: Sequence[str]) -> Dict[str, int]:
    """Named training seed streams for one run."""
    seeds = {"clip": derive_seed(master, "train-clip")}
    for head_kind in head_kinds:
        seeds[head_kind] = derive_seed(master, f"train-dense:{head_kind}")
        seeds[f"{head_kind}-control"] = derive_seed(master, f"train-control:{head_kind}")
    return seeds


def backbones_differ(model: DifferentiableModel, clip_model: DifferentiableModel) -> bool:
    """True when fine-tuning moved the dense backbone away from its parent."""
    return model.backbone_checksum() != clip_model.backbone_checksum()
