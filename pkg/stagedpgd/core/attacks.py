"""Attack strategies: single-model PGD, joint-objective PGD and staged two-stage PGD."""

import io
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .dataset import SyntheticSample, png_bytes
from .models import DENSE_HEAD_KINDS, DifferentiableModel, ModelSet
from .objectives import (
    ClipKLObjective,
    TextBank,
    gradient_cosine,
    task_objective,
    task_target,
)
from .perturb import (
    BudgetSplit,
    OracleError,
    Perturbation,
    PgdConfig,
    clamp_valid,
    compose_perturbations,
    pgd_ascent,
)
from .workspace import atomic_write_bytes, atomic_write_json, read_json

logger = logging.getLogger(__name__)

STRATEGIES = ("single_task", "joint", "staged", "order_reversed")
SINGLE_TARGETS = ("dense", "clip", "control")
TABLES = ("table1", "table2", "table3")

# delta int16 dump: value = round(delta * 255 * 128), i.e. 1/128 of a gray level
DELTA_DUMP_SCALE = 255 * 128


class AttackError(Exception):
    """Exception raised for invalid attack specs or unreadable attack results."""
    pass


def format_levels(eps: float) -> str:
    """Budget in 8-bit gray levels, e.g. 8/255 -> '8'."""
    return f"{eps * 255:.6g}"


@dataclass(frozen=True)
class AttackSpec:
    """One attack row: strategy, target models, budgets and step schedules."""

    row_id: str
    strategy: str
    head_kind: str
    eps_total: float
    task_cfg: PgdConfig = field(default_factory=PgdConfig)
    clip_cfg: PgdConfig = field(default_factory=PgdConfig)
    split: Optional[BudgetSplit] = None
    target: str = "dense"
    joint_weight: float = 1.0
    table: str = "table1"
    label: str = ""
    compute_matched: bool = False

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise AttackError(f"Unknown strategy: {self.strategy}")
        if self.head_kind not in DENSE_HEAD_KINDS:
            raise AttackError(f"Unknown dense head kind: {self.head_kind}")
        if self.target not in SINGLE_TARGETS:
            raise AttackError(f"Unknown attack target: {self.target}")
        if self.table not in TABLES:
            raise AttackError(f"Unknown table: {self.table}")
        if not self.eps_total >= 0:
            raise AttackError(f"eps_total must be non-negative, got {self.eps_total}")
        if self.joint_weight < 0:
            raise AttackError(f"joint_weight must be non-negative, got {self.joint_weight}")

        if self.strategy in ("staged", "order_reversed"):
            if self.split is None:
                raise AttackError(f"{self.row_id}: {self.strategy} attacks need a budget split")
            if abs(self.split.eps_total - self.eps_total) > 1e-12:
                raise AttackError(f"{self.row_id}: split total does not match eps_total")
            if self.strategy == "staged" and not self.split.is_canonical:
                logger.warning(
                    f"{self.row_id}: task budget {format_levels(self.split.eps_task)}/255 is not "
                    f"larger than the CLIP budget {format_levels(self.split.eps_clip)}/255"
                )

    @property
    def eps_task(self) -> float:
        if self.split is not None:
            return self.split.eps_task
        return self.eps_total if self.strategy == "joint" or self.target != "clip" else 0.0

    @property
    def eps_clip(self) -> float:
        if self.split is not None:
            return self.split.eps_clip
        return self.eps_total if self.strategy == "single_task" and self.target == "clip" else 0.0

    @property
    def iterations(self) -> int:
        """Gradient steps the row spends in total."""
        if self.strategy in ("staged", "order_reversed"):
            return self.task_cfg.iterations + self.clip_cfg.iterations
        if self.strategy == "single_task" and self.target == "clip":
            return self.clip_cfg.iterations
        return self.task_cfg.iterations

    @property
    def run_key(self) -> str:
        """
        Directory name shared by every row that performs the same computation.

        CLIP-only rows do not depend on the head kind they are reported under.
        """
        if self.strategy == "single_task":
            parts = ["clip" if self.target == "clip" else self.head_kind, f"pgd-{self.target}"]
        else:
            parts = [self.head_kind, self.strategy.replace("_", "-")]

        if self.split is not None:
            parts.append(f"t{format_levels(self.split.eps_task)}-c{format_levels(self.split.eps_clip)}")
        else:
            parts.append(f"e{format_levels(self.eps_total)}")

        cfgs = [self.task_cfg, self.clip_cfg]
        if self.strategy == "single_task":
            cfgs = [self.clip_cfg if self.target == "clip" else self.task_cfg]
        elif self.strategy == "joint":
            cfgs = [self.task_cfg]
        parts.append("i" + "-".join(str(c.iterations) for c in cfgs))
        parts.append("a" + "-".join(format_levels(c.alpha) for c in cfgs))
        parts.append("-".join(c.init_mode[0] for c in cfgs))
        if self.strategy == "joint":
            parts.append(f"w{self.joint_weight:g}")
        return "_".join(parts)

    def to_dict(self) -> Dict:
        return {
            "row_id": self.row_id,
            "run_key": self.run_key,
            "table": self.table,
            "label": self.label,
            "compute_matched": self.compute_matched,
            "strategy": self.strategy,
            "target": self.target,
            "head_kind": self.head_kind,
            "eps_total": self.eps_total,
            "eps_task": self.eps_task,
            "eps_clip": self.eps_clip,
            "ratio": None if self.split is None or math.isinf(self.split.ratio) else self.split.ratio,
            "joint_weight": self.joint_weight,
            "iterations": self.iterations,
            "task_cfg": {k: v for k, v in vars(self.task_cfg).items() if k != "seed"},
            "clip_cfg": {k: v for k, v in vars(self.clip_cfg).items() if k != "seed"},
        }


@dataclass
class AttackResult:
    """Per-sample outcome: stage deltas, the composed delta and the adversarial image."""

    sample_id: str
    strategy: str
    delta_task: Perturbation
    delta_clip: Perturbation
    delta_composed: Perturbation
    adversarial: np.ndarray
    traces: Dict[str, List[float]] = field(default_factory=dict)
    cosines: List[Optional[float]] = field(default_factory=list)
    partial: bool = False
    error: Optional[str] = None
    clean_checksum: Optional[str] = None

    def reconstruct(self, clean: np.ndarray) -> np.ndarray:
        """Adversarial image from the clean image and the stored composed delta."""
        return clamp_valid(clean + self.delta_composed.delta)

    def metadata(self) -> Dict:
        return {
            "sample_id": self.sample_id,
            "strategy": self.strategy,
            "budgets": {
                "task": self.delta_task.budget,
                "clip": self.delta_clip.budget,
                "composed": self.delta_composed.budget,
            },
            "linf": {
                "task": self.delta_task.linf,
                "clip": self.delta_clip.linf,
                "composed": self.delta_composed.linf,
            },
            "traces": self.traces,
            "cosines": self.cosines,
            "partial": self.partial,
            "error": self.error,
            "clean_checksum": self.clean_checksum,
        }


def _dense_oracle(model: DifferentiableModel, sample: SyntheticSample):
    labels = task_target(sample, model.head_kind)

    def oracle(image):
        return task_objective(model, image, labels)

    return oracle


def _clean_image(sample: SyntheticSample, model: DifferentiableModel) -> np.ndarray:
    return sample.image.astype(model.numpy_dtype)


def _finish(
    sample: SyntheticSample,
    strategy: str,
    x: np.ndarray,
    delta_task: Perturbation,
    delta_clip: Perturbation,
    split: Optional[BudgetSplit] = None,
    **extra,
) -> AttackResult:
    composed, adversarial = compose_perturbations(delta_task, delta_clip, x, split)
    return AttackResult(
        sample_id=sample.sample_id,
        strategy=strategy,
        delta_task=delta_task,
        delta_clip=delta_clip,
        delta_composed=composed,
        adversarial=adversarial,
        clean_checksum=sample.checksum,
        **extra,
    )


def attack_single_task(
    model: DifferentiableModel,
    sample: SyntheticSample,
    eps: float,
    cfg: PgdConfig,
    bank: Optional[TextBank] = None,
) -> AttackResult:
    """
    PGD against one model: the dense task loss, or the CLIP KL for a contrastive model.

    Args:
        model: Dense model, control model or CLIP model
        sample: Sample to perturb
        eps: L-infinity budget
        cfg: PGD step schedule
        bank: Text bank, required for the CLIP model

    Returns:
        AttackResult whose stage delta for the other model is zero
    """
    x = _clean_image(sample, model)
    if model.is_dense:
        result = pgd_ascent(_dense_oracle(model, sample), x, eps, cfg, "task", sample.sample_id)
        delta_task, delta_clip = result.perturbation, Perturbation.zeros(x.shape, x.dtype, "clip")
        traces = {"task": result.trace}
    else:
        if bank is None:
            raise AttackError("Attacking the CLIP model needs a text bank")
        kl = ClipKLObjective(model, x, bank)
        result = pgd_ascent(kl, x, eps, cfg, "clip", sample.sample_id)
        delta_task, delta_clip = Perturbation.zeros(x.shape, x.dtype, "task"), result.perturbation
        traces = {"clip": result.trace}

    return _finish(sample, "single_task", x, delta_task, delta_clip, traces=traces)


def attack_joint(
    task_model: DifferentiableModel,
    clip_model: DifferentiableModel,
    sample: SyntheticSample,
    eps: float,
    weight_w: float,
    cfg: PgdConfig,
    bank: TextBank,
) -> AttackResult:
    """
    PGD on task loss + weight_w * CLIP KL within one shared budget.

    Records the cosine between the two gradient terms at every iteration.
    """
    x = _clean_image(sample, task_model)
    labels = task_target(sample, task_model.head_kind)
    kl = ClipKLObjective(clip_model, x, bank)
    cosines: List[Optional[float]] = []

    def oracle(image):
        task_loss, task_grad = task_objective(task_model, image, labels)
        kl_value, kl_grad = kl(image)
        cosines.append(gradient_cosine(task_grad, kl_grad))
        return task_loss + weight_w * kl_value, task_grad + weight_w * kl_grad

    result = pgd_ascent(oracle, x, eps, cfg, "task", sample.sample_id)
    # Last oracle call evaluates the final iterate, not a step
    return _finish(
        sample,
        "joint",
        x,
        result.perturbation,
        Perturbation.zeros(x.shape, x.dtype, "clip"),
        traces={"joint": result.trace},
        cosines=cosines[: cfg.iterations] if eps > 0 else [],
    )


def attack_staged(
    task_model: DifferentiableModel,
    clip_model: DifferentiableModel,
    sample: SyntheticSample,
    split: BudgetSplit,
    task_cfg: PgdConfig,
    clip_cfg: PgdConfig,
    bank: TextBank,
) -> AttackResult:
    """
    Stage I: PGD on the task loss within eps_task. Stage II: PGD on the CLIP KL within
    eps_clip, centered on the Stage I output, which it never modifies.

    A Stage II failure keeps the Stage I delta and marks the result partial.
    """
    x = _clean_image(sample, task_model)
    stage1 = pgd_ascent(
        _dense_oracle(task_model, sample), x, split.eps_task, task_cfg, "task", sample.sample_id
    )

    traces = {"task": stage1.trace}
    partial, error = False, None
    try:
        kl = ClipKLObjective(clip_model, x, bank)
        stage2 = pgd_ascent(
            kl,
            stage1.adversarial,
            split.eps_clip,
            replace(clip_cfg, init_mode="clean"),
            "clip",
            sample.sample_id,
        )
        delta_clip = stage2.perturbation
        traces["clip"] = stage2.trace
    except OracleError as e:
        logger.warning(f"Stage II failed, keeping Stage I only: {e}")
        delta_clip = Perturbation(np.zeros_like(x), split.eps_clip, "clip")
        partial, error = True, str(e)

    return _finish(
        sample,
        "staged",
        x,
        stage1.perturbation,
        delta_clip,
        split,
        traces=traces,
        partial=partial,
        error=error,
    )


def attack_order_reversed(
    task_model: DifferentiableModel,
    clip_model: DifferentiableModel,
    sample: SyntheticSample,
    split: BudgetSplit,
    task_cfg: PgdConfig,
    clip_cfg: PgdConfig,
    bank: TextBank,
) -> AttackResult:
    """The staged attack with the CLIP stage first and the task stage second."""
    x = _clean_image(sample, task_model)
    kl = ClipKLObjective(clip_model, x, bank)
    stage1 = pgd_ascent(kl, x, split.eps_clip, clip_cfg, "clip", sample.sample_id)

    traces = {"clip": stage1.trace}
    partial, error = False, None
    try:
        stage2 = pgd_ascent(
            _dense_oracle(task_model, sample),
            stage1.adversarial,
            split.eps_task,
            replace(task_cfg, init_mode="clean"),
            "task",
            sample.sample_id,
        )
        delta_task = stage2.perturbation
        traces["task"] = stage2.trace
    except OracleError as e:
        logger.warning(f"Second stage failed, keeping the CLIP stage only: {e}")
        delta_task = Perturbation(np.zeros_like(x), split.eps_task, "task")
        partial, error = True, str(e)

    return _finish(
        sample,
        "order_reversed",
        x,
        delta_task,
        stage1.perturbation,
        split,
        traces=traces,
        partial=partial,
        error=error,
    )


def _run_single(spec, models, sample, bank, task_cfg, clip_cfg):
    if spec.target == "clip":
        return attack_single_task(models.clip, sample, spec.eps_total, clip_cfg, bank)
    if spec.target == "control":
        model = models.control_model(spec.head_kind)
    else:
        model = models.dense_model(spec.head_kind)
    return attack_single_task(model, sample, spec.eps_total, task_cfg, bank)


def _run_joint(spec, models, sample, bank, task_cfg, clip_cfg):
    return attack_joint(
        models.dense_model(spec.head_kind),
        models.clip,
        sample,
        spec.eps_total,
        spec.joint_weight,
        task_cfg,
        bank,
    )


def _run_two_stage(attack: Callable) -> Callable:
    def run(spec, models, sample, bank, task_cfg, clip_cfg):
        return attack(
            models.dense_model(spec.head_kind),
            models.clip,
            sample,
            spec.split,
            task_cfg,
            clip_cfg,
            bank,
        )

    return run


_RUNNERS = {
    "single_task": _run_single,
    "joint": _run_joint,
    "staged": _run_two_stage(attack_staged),
    "order_reversed": _run_two_stage(attack_order_reversed),
}


def run_attack(
    spec: AttackSpec,
    models: ModelSet,
    sample: SyntheticSample,
    bank: TextBank,
    task_seed: int = 0,
    clip_seed: int = 0,
) -> AttackResult:
    """
    Run one attack row on one sample.

    Args:
        spec: Attack row
        models: Loaded models
        sample: Sample to perturb
        bank: Text bank
        task_seed: Seed of the task-stage random start
        clip_seed: Seed of the CLIP-stage random start

    Returns:
        AttackResult
    """
    runner = _RUNNERS[spec.strategy]
    return runner(
        spec,
        models,
        sample,
        bank,
        spec.task_cfg.with_seed(task_seed),
        spec.clip_cfg.with_seed(clip_seed),
    )


# Persistence: <id>.npz (deltas, adversarial), <id>.json (metadata), <id>.adv.png,
# <id>.delta.npy (int16 dump of task/clip/composed deltas)


def result_paths(row_dir: Path, sample_id: str) -> Dict[str, Path]:
    row_dir = Path(row_dir)
    return {
        "arrays": row_dir / f"{sample_id}.npz",
        "metadata": row_dir / f"{sample_id}.json",
        "image": row_dir / f"{sample_id}.adv.png",
        "dump": row_dir / f"{sample_id}.delta.npy",
    }


def delta_dump(result: AttackResult) -> np.ndarray:
    """Stage deltas as int16 in units of 1/128 gray level, stacked task/clip/composed."""
    stacked = np.stack(
        [result.delta_task.delta, result.delta_clip.delta, result.delta_composed.delta]
    )
    return np.clip(np.round(stacked * DELTA_DUMP_SCALE), -32768, 32767).astype(np.int16)


def save_attack_result(result: AttackResult, row_dir: Path) -> Dict[str, Path]:
    """Write one sample's result files atomically."""
    paths = result_paths(row_dir, result.sample_id)

    buffer = io.BytesIO()
    np.savez(
        buffer,
        delta_task=result.delta_task.delta,
        delta_clip=result.delta_clip.delta,
        delta_composed=result.delta_composed.delta,
        adversarial=result.adversarial,
    )
    atomic_write_bytes(paths["arrays"], buffer.getvalue())

    buffer = io.BytesIO()
    np.save(buffer, delta_dump(result))
    atomic_write_bytes(paths["dump"], buffer.getvalue())

    pixels = np.round(result.adversarial * 255).astype(np.uint8)
    atomic_write_bytes(paths["image"], png_bytes(pixels))
    atomic_write_json(paths["metadata"], result.metadata())
    return paths


def save_attack_failure(row_dir: Path, sample_id: str, error: str) -> Path:
    path = result_paths(row_dir, sample_id)["metadata"]
    atomic_write_json(path, {"sample_id": sample_id, "failed": True, "error": error})
    return path


def has_result(row_dir: Path, sample_id: str) -> bool:
    """True when a complete (non-failed) result is stored for the sample."""
    paths = result_paths(row_dir, sample_id)
    if not (paths["metadata"].is_file() and paths["arrays"].is_file()):
        return False
    try:
        return not read_json(paths["metadata"]).get("failed", False)
    except Exception:
        return False


def load_attack_result(row_dir: Path, sample: SyntheticSample) -> AttackResult:
    """
    Load a stored result and check that the composed delta reproduces the adversarial image.

    Raises:
        AttackError: If files are missing, the sample failed, the clean image changed
            or reconstruction disagrees
    """
    paths = result_paths(row_dir, sample.sample_id)
    try:
        meta = read_json(paths["metadata"])
        with np.load(paths["arrays"]) as arrays:
            data = {k: arrays[k] for k in arrays.files}
    except Exception as e:
        raise AttackError(f"Cannot read result for {sample.sample_id} in {row_dir}: {e}") from e
    if meta.get("failed"):
        raise AttackError(f"Attack on {sample.sample_id} failed: {meta.get('error')}")
    if meta.get("clean_checksum") != sample.checksum:
        raise AttackError(f"{sample.sample_id}: stored result was computed on a different clean image")

    budgets = meta["budgets"]
    result = AttackResult(
        sample_id=sample.sample_id,
        strategy=meta["strategy"],
        delta_task=Perturbation(data["delta_task"], budgets["task"], "task"),
        delta_clip=Perturbation(data["delta_clip"], budgets["clip"], "clip"),
        delta_composed=Perturbation(data["delta_composed"], budgets["composed"], "composed"),
        adversarial=data["adversarial"],
        traces=meta.get("traces", {}),
        cosines=meta.get("cosines", []),
        partial=meta.get("partial", False),
        error=meta.get("error"),
        clean_checksum=meta["clean_checksum"],
    )

    clean = sample.image.astype(result.adversarial.dtype)
    if not np.array_equal(result.reconstruct(clean), result.adversarial):
        raise AttackError(f"{sample.sample_id}: stored delta does not reproduce the adversarial image")
    return result
