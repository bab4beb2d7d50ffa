"""L-infinity perturbation engine: clamping, projection, sign-gradient PGD and budget splits."""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

STAGE_TAGS = ("task", "clip", "composed")
INIT_MODES = ("clean", "random_uniform")

# Oracle contract: image -> (loss, d loss / d image)
GradOracle = Callable[[np.ndarray], Tuple[float, np.ndarray]]


class PerturbationError(ValueError):
    """Exception raised for invalid perturbation arguments."""
    pass


class OracleError(PerturbationError):
    """Exception raised when a gradient oracle fails or returns non-finite values."""

    def __init__(self, message: str, sample_id: Optional[str] = None):
        self.sample_id = sample_id
        prefix = f"sample {sample_id}: " if sample_id is not None else ""
        super().__init__(f"{prefix}{message}")


def budget_tolerance(dtype) -> float:
    """
    Slack allowed on L-infinity budget checks for a floating dtype.

    Args:
        dtype: numpy dtype of the perturbation

    Returns:
        1e-9 for 64-bit arrays, 1e-6 for anything narrower
    """
    return 1e-9 if np.dtype(dtype).itemsize >= 8 else 1e-6


def check_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    """Validate that an array looks like an H x W x C image."""
    if not isinstance(image, np.ndarray) or image.ndim != 3:
        raise PerturbationError(f"{name} must be an H x W x C array, got {getattr(image, 'shape', None)}")
    if not np.issubdtype(image.dtype, np.floating):
        raise PerturbationError(f"{name} must be a floating array, got {image.dtype}")
    return image


@dataclass(frozen=True)
class Perturbation:
    """An additive delta together with its L-infinity budget and the stage that produced it."""

    delta: np.ndarray
    budget: float
    stage_tag: str = "task"

    def __post_init__(self):
        if self.stage_tag not in STAGE_TAGS:
            raise PerturbationError(f"Unknown stage tag: {self.stage_tag}")
        if not self.budget >= 0:
            raise PerturbationError(f"Budget must be non-negative, got {self.budget}")

        delta = np.array(self.delta, copy=True)
        delta.setflags(write=False)
        object.__setattr__(self, "delta", delta)
        object.__setattr__(self, "budget", float(self.budget))

        if delta.size and self.linf > self.budget + budget_tolerance(delta.dtype):
            raise PerturbationError(
                f"{self.stage_tag} delta has L-inf norm {self.linf:.3e} above budget {self.budget:.3e}"
            )

    @property
    def linf(self) -> float:
        """L-infinity norm of the delta."""
        return float(np.max(np.abs(self.delta))) if self.delta.size else 0.0

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.delta.shape

    @classmethod
    def zeros(cls, shape, dtype=np.float64, stage_tag: str = "task") -> "Perturbation":
        """Zero perturbation with a zero budget."""
        return cls(np.zeros(shape, dtype=dtype), 0.0, stage_tag)


@dataclass(frozen=True)
class BudgetSplit:
    """Split of a total L-infinity budget between the task stage and the CLIP stage."""

    eps_task: float
    eps_clip: float
    ratio: float
    eps_total: float

    def __post_init__(self):
        if self.eps_task < 0 or self.eps_clip < 0:
            raise PerturbationError("Stage budgets must be non-negative")
        if not self.ratio > 0:
            raise PerturbationError(f"Budget ratio must be positive, got {self.ratio}")
        if abs(self.eps_total - (self.eps_task + self.eps_clip)) > 1e-12:
            raise PerturbationError("eps_total must equal eps_task + eps_clip")
        if self.eps_clip > 0 and not math.isclose(
            self.ratio, self.eps_task / self.eps_clip, rel_tol=1e-9
        ):
            raise PerturbationError("ratio must equal eps_task / eps_clip")

    @property
    def is_canonical(self) -> bool:
        """True when the task stage receives the larger share of the budget."""
        return self.ratio > 1

    @classmethod
    def from_components(cls, eps_task: float, eps_clip: float) -> "BudgetSplit":
        """Build a split from explicit stage budgets (eps_clip = 0 gives an infinite ratio)."""
        ratio = eps_task / eps_clip if eps_clip > 0 else math.inf
        return cls(float(eps_task), float(eps_clip), ratio, float(eps_task) + float(eps_clip))


@dataclass(frozen=True)
class PgdConfig:
    """Step size, iteration count and start point of one PGD run."""

    alpha: float = 2 / 255
    iterations: int = 10
    init_mode: str = "clean"
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise PerturbationError(f"alpha must be positive, got {self.alpha}")
        if int(self.iterations) != self.iterations or self.iterations < 1:
            raise PerturbationError(f"iterations must be a positive integer, got {self.iterations}")
        if self.init_mode not in INIT_MODES:
            raise PerturbationError(
                f"init_mode must be one of {', '.join(INIT_MODES)}, got {self.init_mode}"
            )

    def with_seed(self, seed: int) -> "PgdConfig":
        return replace(self, seed=int(seed))


@dataclass
class AscentResult:
    """Outcome of one projected sign-gradient ascent run."""

    perturbation: Perturbation
    adversarial: np.ndarray
    loss: float
    initial_loss: float
    trace: List[float] = field(default_factory=list)


def clamp_valid(image: np.ndarray) -> np.ndarray:
    """
    Clip every pixel into the valid [0, 1] range.

    Args:
        image: Array of pixel intensities

    Returns:
        New array with the same shape and dtype
    """
    return np.clip(image, 0.0, 1.0)


def project_linf(delta: Union[Perturbation, np.ndarray], eps: float) -> Perturbation:
    """
    Project a delta onto the L-infinity ball of radius eps.

    Args:
        delta: Perturbation or raw delta array
        eps: Ball radius

    Returns:
        Perturbation with every element clipped into [-eps, eps] and budget eps

    Raises:
        PerturbationError: If eps is negative
    """
    if not eps >= 0:
        raise PerturbationError(f"eps must be non-negative, got {eps}")

    if isinstance(delta, Perturbation):
        values, tag = delta.delta, delta.stage_tag
    else:
        values, tag = np.asarray(delta), "task"

    return Perturbation(np.clip(values, -eps, eps), eps, tag)


def pgd_step(
    x_t: np.ndarray,
    grad: np.ndarray,
    alpha: float,
    x_clean: np.ndarray,
    eps: float,
) -> np.ndarray:
    """
    One signed-gradient ascent step followed by projection and range clamping.

    Args:
        x_t: Current iterate
        grad: Loss gradient at x_t
        alpha: Step size in pixel units
        x_clean: Center of the L-infinity ball
        eps: Ball radius

    Returns:
        The next iterate, inside the ball and inside [0, 1]
    """
    grad = np.asarray(grad)
    if grad.shape != x_t.shape or x_clean.shape != x_t.shape:
        raise PerturbationError(
            f"Shape mismatch: x_t {x_t.shape}, grad {grad.shape}, x_clean {x_clean.shape}"
        )

    stepped = x_t + alpha * np.sign(grad)
    projected = project_linf(stepped - x_clean, eps)
    return clamp_valid(x_clean + projected.delta)


def _evaluate(oracle: GradOracle, image: np.ndarray, sample_id: Optional[str]) -> Tuple[float, np.ndarray]:
    """Call a gradient oracle and check what it returns."""
    try:
        loss, grad = oracle(image)
    except OracleError:
        raise
    except Exception as e:
        raise OracleError(f"gradient oracle failed: {e}", sample_id) from e

    grad = np.asarray(grad, dtype=image.dtype)
    if grad.shape != image.shape:
        raise OracleError(f"oracle gradient shape {grad.shape} != image shape {image.shape}", sample_id)
    if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
        raise OracleError("oracle returned a non-finite loss or gradient", sample_id)

    return float(loss), grad


def pgd_ascent(
    grad_oracle: GradOracle,
    x: np.ndarray,
    eps: float,
    cfg: PgdConfig,
    stage_tag: str = "task",
    sample_id: Optional[str] = None,
) -> AscentResult:
    """
    Maximize a loss over the L-infinity ball around x with projected sign-gradient ascent.

    Args:
        grad_oracle: Callable returning (loss, input gradient) at an image
        x: Ball center (clean image, or the previous stage's output)
        eps: Ball radius
        cfg: Step size, iterations, start point and seed
        stage_tag: Tag stored on the returned perturbation
        sample_id: Identifier attached to oracle failures

    Returns:
        AscentResult with delta = x_T - x, the final iterate and the loss trace

    Raises:
        PerturbationError: If eps is negative
        OracleError: If the oracle fails or returns non-finite values
    """
    check_image(x, "x")
    if not eps >= 0:
        raise PerturbationError(f"eps must be non-negative, got {eps}")

    if eps == 0:
        loss, _ = _evaluate(grad_oracle, x, sample_id)
        return AscentResult(
            perturbation=Perturbation.zeros(x.shape, x.dtype, stage_tag),
            adversarial=x.copy(),
            loss=loss,
            initial_loss=loss,
            trace=[loss],
        )

    if cfg.alpha > eps:
        logger.warning(f"Step size {cfg.alpha:.5f} exceeds the budget {eps:.5f} it drives")

    x_t = x.copy()
    if cfg.init_mode == "random_uniform":
        rng = np.random.default_rng(cfg.seed)
        noise = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
        x_t = clamp_valid(x + project_linf(noise, eps).delta)

    trace: List[float] = []
    for _ in range(cfg.iterations):
        loss, grad = _evaluate(grad_oracle, x_t, sample_id)
        trace.append(loss)
        x_t = pgd_step(x_t, grad, cfg.alpha, x, eps)

    final_loss, _ = _evaluate(grad_oracle, x_t, sample_id)
    trace.append(final_loss)

    logger.debug(f"PGD ({stage_tag}) eps={eps:.5f}: loss {trace[0]:.5f} -> {final_loss:.5f}")

    return AscentResult(
        perturbation=Perturbation(x_t - x, eps, stage_tag),
        adversarial=x_t,
        loss=final_loss,
        initial_loss=trace[0],
        trace=trace,
    )


def split_budget(eps_total: float, ratio: float) -> BudgetSplit:
    """
    Divide a total budget so that eps_task / eps_clip = ratio.

    Args:
        eps_total: Total L-infinity budget
        ratio: Task-to-CLIP budget ratio (lambda)

    Returns:
        BudgetSplit with eps_task = eps_total*ratio/(1+ratio), eps_clip = eps_total/(1+ratio)

    Raises:
        PerturbationError: If eps_total is negative or ratio is not positive
    """
    if not eps_total >= 0:
        raise PerturbationError(f"eps_total must be non-negative, got {eps_total}")
    if not ratio > 0:
        raise PerturbationError(f"Budget ratio must be positive, got {ratio}")

    eps_task = eps_total * ratio / (1 + ratio)
    eps_clip = eps_total / (1 + ratio)
    return BudgetSplit(eps_task, eps_clip, float(ratio), eps_task + eps_clip)


def compose_perturbations(
    delta_task: Perturbation,
    delta_clip: Perturbation,
    x: np.ndarray,
    split: Optional[BudgetSplit] = None,
) -> Tuple[Perturbation, np.ndarray]:
    """
    Add the two stage deltas and fold the final range clamp back into the sum.

    Args:
        delta_task: Task-stage perturbation
        delta_clip: CLIP-stage perturbation
        x: Clean image
        split: Active budget split; when given, stage budgets must match it

    Returns:
        Tuple of (composed perturbation, adversarial image) where the adversarial
        image equals clamp_valid(x + composed.delta) bit for bit

    Raises:
        PerturbationError: On shape mismatch, budget mismatch or a budget violation
    """
    check_image(x, "x")
    if delta_task.shape != x.shape or delta_clip.shape != x.shape:
        raise PerturbationError(
            f"Shape mismatch: task {delta_task.shape}, clip {delta_clip.shape}, image {x.shape}"
        )

    if split is not None:
        if abs(delta_task.budget - split.eps_task) > 1e-12 or abs(
            delta_clip.budget - split.eps_clip
        ) > 1e-12:
            raise PerturbationError("Stage budgets do not match the active budget split")

    bound = delta_task.budget + delta_clip.budget
    raw = delta_task.delta + delta_clip.delta
    if raw.size and np.max(np.abs(raw)) > bound + budget_tolerance(raw.dtype):
        raise PerturbationError("Composed delta exceeds eps_task + eps_clip")

    delta = clamp_valid(x + raw) - x
    adversarial = clamp_valid(x + delta)
    return Perturbation(delta, bound, "composed"), adversarial
