"""Attack objectives: dense-task loss, CLIP prediction-distribution KL and their weighted sum."""

import hashlib
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from .dataset import SyntheticSample
from .models import DifferentiableModel, input_gradient
from .perturb import clamp_valid

logger = logging.getLogger(__name__)

# Lower bound applied to every probability before renormalization; keeps log q finite
SMOOTHING_FLOOR = 1e-12


class ObjectiveError(ValueError):
    """Exception raised for invalid objective inputs."""
    pass


@dataclass(frozen=True)
class TextBank:
    """Ordered captions and their unit-norm text embeddings."""

    captions: Tuple[str, ...]
    embeddings: np.ndarray

    def __post_init__(self):
        captions = tuple(self.captions)
        embeddings = np.array(self.embeddings, copy=True)
        if not captions:
            raise ObjectiveError("Text bank is empty")
        if len(set(captions)) != len(captions):
            raise ObjectiveError("Text bank captions must be unique")
        if embeddings.ndim != 2 or embeddings.shape[0] != len(captions):
            raise ObjectiveError(
                f"Expected {len(captions)} x D embeddings, got {embeddings.shape}"
            )
        norms = np.linalg.norm(embeddings, axis=1)
        if not np.allclose(norms, 1.0, atol=1e-5):
            raise ObjectiveError("Text bank embeddings must have unit norm")
        embeddings.setflags(write=False)
        object.__setattr__(self, "captions", captions)
        object.__setattr__(self, "embeddings", embeddings)
        object.__setattr__(self, "_index", {c: i for i, c in enumerate(captions)})

    def __len__(self):
        return len(self.captions)

    @staticmethod
    def unique_captions(samples: Sequence[SyntheticSample]) -> List[str]:
        """Distinct captions in order of first appearance."""
        return list(dict.fromkeys(s.caption for s in samples))

    @classmethod
    def build(cls, clip_model: DifferentiableModel, captions: Sequence[str]) -> "TextBank":
        """Embed captions with the CLIP text encoder, in the model's precision."""
        captions = list(captions)
        if not captions:
            raise ObjectiveError("Text bank is empty")
        return cls(tuple(captions), clip_model.text_embeddings(captions))

    def index_of(self, caption: str) -> int:
        try:
            return self._index[caption]
        except KeyError as e:
            raise ObjectiveError(f"Caption not in text bank: {caption!r}") from e

    def targets(self, captions: Sequence[str]) -> np.ndarray:
        """Bank index of each caption."""
        return np.array([self.index_of(c) for c in captions], dtype=np.int64)

    def checksum(self) -> str:
        return hashlib.sha256("\n".join(self.captions).encode("utf-8")).hexdigest()

    def to_dict(self) -> Dict:
        return {"captions": list(self.captions), "checksum": self.checksum()}


@dataclass(frozen=True)
class PredictionDistribution:
    """Smoothed softmax over the text bank; every entry is positive and they sum to 1."""

    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        raw = np.asarray(self.probs)
        tolerance = 1e-9 if raw.dtype == np.float64 else 1e-6
        probs = raw.astype(np.float64)
        if probs.ndim != 1 or probs.size == 0:
            raise ObjectiveError(f"Expected a non-empty probability vector, got {probs.shape}")
        if np.any(probs <= 0) or abs(probs.sum() - 1.0) > tolerance:
            raise ObjectiveError("Probabilities must be positive and sum to 1")
        object.__setattr__(self, "probs", probs)

    def __len__(self):
        return self.probs.size


def smoothed_softmax(similarities: torch.Tensor, temperature: float) -> torch.Tensor:
    """
    Softmax of similarities / temperature, floored at SMOOTHING_FLOOR and renormalized.

    Args:
        similarities: (..., M) cosine similarities
        temperature: Positive softmax temperature

    Returns:
        Tensor of the same shape whose last axis is a strictly positive distribution
    """
    if not temperature > 0:
        raise ObjectiveError(f"Temperature must be positive, got {temperature}")
    probs = torch.softmax(similarities / temperature, dim=-1).clamp_min(SMOOTHING_FLOOR)
    return probs / probs.sum(dim=-1, keepdim=True)


def distribution_from_similarities(similarities, temperature: float) -> PredictionDistribution:
    """Smoothed distribution for a similarity vector, computed in the vector's precision."""
    sims = np.asarray(similarities)
    if not np.issubdtype(sims.dtype, np.floating):
        sims = sims.astype(np.float64)
    sims = torch.as_tensor(sims)
    return PredictionDistribution(smoothed_softmax(sims, temperature).numpy())


def clip_distribution(
    clip_model: DifferentiableModel,
    image: np.ndarray,
    bank: TextBank,
    temperature: Optional[float] = None,
) -> PredictionDistribution:
    """
    The CLIP model's smoothed prediction distribution over the bank for one image.

    Args:
        clip_model: Contrastive model
        image: H x W x C image
        bank: Text bank to rank
        temperature: Softmax temperature; defaults to the model's learned one

    Returns:
        PredictionDistribution of length len(bank)
    """
    if bank is None or len(bank) == 0:
        raise ObjectiveError("Text bank is empty")
    if clip_model.head_kind != "clip_retrieval":
        raise ObjectiveError(f"{clip_model.name} is not a contrastive model")
    temperature = clip_model.temperature if temperature is None else temperature

    # Same ops as ClipKLTarget.loss, so the KL is exactly zero at the clean image
    with torch.no_grad():
        batch = torch.tensor(np.asarray(image)[None], dtype=clip_model.dtype)
        embedding = clip_model.outputs(batch)[0]
        bank_embeddings = torch.tensor(bank.embeddings, dtype=clip_model.dtype)
        similarities = (embedding @ bank_embeddings.T).numpy()
    return distribution_from_similarities(similarities, temperature)


def kl_divergence(p, q) -> float:
    """
    KL(p || q) for two smoothed distributions over the same bank.

    Args:
        p: Reference distribution (PredictionDistribution or array)
        q: Compared distribution

    Returns:
        Non-negative KL divergence in nats
    """
    p = p.probs if isinstance(p, PredictionDistribution) else np.asarray(p, dtype=np.float64)
    q = q.probs if isinstance(q, PredictionDistribution) else np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ObjectiveError(f"Distributions differ in length: {p.shape} vs {q.shape}")
    if np.any(p <= 0) or np.any(q <= 0):
        raise ObjectiveError("KL inputs must be smoothed (strictly positive)")
    # Rounding can leave a tiny negative value for nearly equal inputs
    return max(float(np.sum(p * (np.log(p) - np.log(q)))), 0.0)


def task_target(sample: SyntheticSample, head_kind: str) -> np.ndarray:
    """Ground-truth labels a dense head is attacked against."""
    if head_kind == "segmentation":
        return sample.seg_mask.astype(np.int64)
    if head_kind == "detection":
        return sample.cell_classes.astype(np.int64)
    raise ObjectiveError(f"{head_kind} is not a dense head kind")


def task_objective(
    task_model: DifferentiableModel, image: np.ndarray, target: np.ndarray
) -> Tuple[float, np.ndarray]:
    """
    Dense-task cross-entropy at an image and its input gradient.

    Raises:
        ObjectiveError: If the model is not a dense model
    """
    if not task_model.is_dense:
        raise ObjectiveError(f"{task_model.name} is not a dense-task model")
    return input_gradient(task_model, image, target)


class ClipKLTarget:
    """Loss target computing KL(p || q) from image embeddings for a fixed clean distribution."""

    def __init__(self, bank: TextBank, clean: PredictionDistribution, temperature: float, dtype):
        self.bank_embeddings = torch.tensor(bank.embeddings, dtype=dtype)
        self.clean_probs = torch.tensor(clean.probs, dtype=dtype)
        self.log_clean = torch.log(self.clean_probs)
        self.temperature = temperature

    def loss(self, embeddings: torch.Tensor) -> torch.Tensor:
        q = smoothed_softmax(embeddings[0] @ self.bank_embeddings.T, self.temperature)
        return torch.sum(self.clean_probs * (self.log_clean - torch.log(q)))


class ClipKLObjective:
    """KL divergence of the CLIP prediction at an image from the one at a fixed clean image."""

    def __init__(
        self,
        clip_model: DifferentiableModel,
        x_clean: np.ndarray,
        bank: TextBank,
        temperature: Optional[float] = None,
    ):
        self.clip_model = clip_model
        self.temperature = clip_model.temperature if temperature is None else temperature
        self.clean = clip_distribution(clip_model, x_clean, bank, self.temperature)
        self._target = ClipKLTarget(bank, self.clean, self.temperature, clip_model.dtype)

    def __call__(self, image: np.ndarray) -> Tuple[float, np.ndarray]:
        return input_gradient(self.clip_model, image, self._target)


def clip_kl_objective(
    clip_model: DifferentiableModel,
    x_clean: np.ndarray,
    x_current: np.ndarray,
    bank: TextBank,
    temperature: Optional[float] = None,
) -> Tuple[float, np.ndarray]:
    """
    KL(p(x_clean) || q(x_current)) and its gradient w.r.t. x_current.

    Returns:
        Tuple of (kl, gradient); the value is 0 when x_current equals x_clean
    """
    return ClipKLObjective(clip_model, x_clean, bank, temperature)(x_current)


def joint_objective(
    task_model: DifferentiableModel,
    clip_model: DifferentiableModel,
    image: np.ndarray,
    target: np.ndarray,
    bank: TextBank,
    weight_w: float,
    x_clean: Optional[np.ndarray] = None,
    kl_objective: Optional[ClipKLObjective] = None,
) -> Tuple[float, np.ndarray]:
    """
    Task loss plus weight_w times the CLIP KL, with the matching summed gradient.

    Args:
        task_model: Dense model
        clip_model: Contrastive model
        image: Current image
        target: Dense labels
        bank: Text bank
        weight_w: Non-negative KL weight; 0 reproduces the task objective exactly
        x_clean: Clean image anchoring the KL (defaults to image)
        kl_objective: Prebuilt KL objective with a cached clean distribution

    Returns:
        Tuple of (loss, gradient)
    """
    if weight_w < 0:
        raise ObjectiveError(f"Joint weight must be non-negative, got {weight_w}")
    if kl_objective is None:
        kl_objective = ClipKLObjective(clip_model, image if x_clean is None else x_clean, bank)

    task_loss, task_grad = task_objective(task_model, image, target)
    kl, kl_grad = kl_objective(image)
    return task_loss + weight_w * kl, task_grad + weight_w * kl_grad


def gradient_cosine(a: np.ndarray, b: np.ndarray) -> Optional[float]:
    """Cosine between two flattened gradients, or None when either one is zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    norm_a, norm_b = np.linalg.norm(a), np.linalg.norm(b)
    if norm_a == 0 or norm_b == 0:
        return None
    return float(np.clip(a @ b / (norm_a * norm_b), -1.0, 1.0))


def _norms(grad: np.ndarray) -> Tuple[float, float]:
    flat = np.asarray(grad, dtype=np.float64).ravel()
    return float(np.abs(flat).sum()), float(np.linalg.norm(flat))


def _mean_norms(norms: List[Tuple[float, float]]) -> Optional[Dict[str, float]]:
    if not norms:
        return None
    arr = np.array(norms)
    return {"l1": float(arr[:, 0].mean()), "l2": float(arr[:, 1].mean())}


@dataclass
class ConflictReport:
    """Per-sample cosines between task and CLIP-KL gradients at a perturbed point."""

    head_kind: str
    cosines: Dict[str, Optional[float]] = field(default_factory=dict)
    task_grad_norms: List[Tuple[float, float]] = field(default_factory=list)
    kl_grad_norms: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def flagged(self) -> List[str]:
        """Samples where one of the gradients vanished."""
        return [sid for sid, c in self.cosines.items() if c is None]

    @property
    def median(self) -> Optional[float]:
        values = [c for c in self.cosines.values() if c is not None]
        return float(np.median(values)) if values else None

    def to_dict(self) -> Dict:
        return {
            "head_kind": self.head_kind,
            "median_cosine": self.median,
            "flagged": self.flagged,
            "task_grad_norm": _mean_norms(self.task_grad_norms),
            "kl_grad_norm": _mean_norms(self.kl_grad_norms),
            "cosines": dict(self.cosines),
        }


def gradient_conflict_report(
    task_model: DifferentiableModel,
    clip_model: DifferentiableModel,
    samples: Sequence[SyntheticSample],
    bank: TextBank,
    eps: float,
    seed: int,
) -> ConflictReport:
    """
    Compare task and CLIP-KL gradient directions over a set of samples.

    The KL gradient vanishes at the clean image, so both gradients are taken at a
    perturbed point x + U(-eps, eps) drawn from a per-sample seeded stream.

    Args:
        task_model: Dense model
        clip_model: Contrastive model
        samples: Samples to measure
        bank: Text bank
        eps: Radius of the perturbed points
        seed: Base seed of the perturbation streams

    Returns:
        ConflictReport with one cosine (or None) per sample
    """
    report = ConflictReport(head_kind=task_model.head_kind)
    dtype = task_model.numpy_dtype

    for index, sample in enumerate(samples):
        x = sample.image.astype(dtype)
        rng = np.random.default_rng([seed, index])
        point = clamp_valid(x + rng.uniform(-eps, eps, size=x.shape).astype(dtype))

        _, task_grad = task_objective(task_model, point, task_target(sample, task_model.head_kind))
        _, kl_grad = ClipKLObjective(clip_model, x, bank)(point)

        report.cosines[sample.sample_id] = gradient_cosine(task_grad, kl_grad)
        report.task_grad_norms.append(_norms(task_grad))
        report.kl_grad_norms.append(_norms(kl_grad))

    if report.flagged:
        logger.warning(f"{len(report.flagged)} samples had a vanishing gradient at the perturbed point")
    return report
