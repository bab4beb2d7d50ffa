"""Run configuration: YAML loading, validation, fraction budgets and seed derivation."""

import hashlib
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml

from .dataset import DatasetError, DatasetSpec
from .models import DEFAULT_WIDTHS, DENSE_HEAD_KINDS
from .perturb import INIT_MODES
from .workspace import atomic_write_text

logger = logging.getLogger(__name__)

PRECISIONS = ("float64", "float32")
TABLE1_METHODS = ("pgd-dense", "pgd-clip", "pgd-control", "joint", "staged")

# (eps_total, ratio) rows of the order ablation and the split sweep
DEFAULT_ORDER_SWEEP = ((8 / 255, 3.0), (8 / 255, 1 / 3))
DEFAULT_SPLIT_SWEEP = (
    (4 / 255, 1.0),
    (6 / 255, 0.5),
    (6 / 255, 2.0),
    (8 / 255, 1 / 3),
    (8 / 255, 1.0),
    (8 / 255, 3.0),
)


class ConfigError(Exception):
    """Exception raised for invalid configuration files or values."""

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


def derive_seed(master: int, name: str) -> int:
    """
    Derive a named sub-seed from the master seed.

    Args:
        master: Master seed
        name: Stream name, e.g. "dataset" or "attack:test-00003:task"

    Returns:
        First 8 bytes of SHA-256("<master>|<name>") as an unsigned little-endian integer
    """
    digest = hashlib.sha256(f"{int(master)}|{name}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def parse_fraction(value: Any, key: str) -> float:
    """Parse a number written as int, float or a fraction string such as "8/255"."""
    if isinstance(value, bool):
        raise ConfigError(f"expected a number, got {value!r}", key)
    if isinstance(value, (int, float)):
        return float(value)
    if isinstance(value, str):
        try:
            return float(Fraction(value.strip()))
        except (ValueError, ZeroDivisionError) as e:
            raise ConfigError(f"cannot parse {value!r} as a number", key) from e
    raise ConfigError(f"expected a number, got {value!r}", key)


def format_fraction(value: float) -> Union[str, float]:
    """Inverse of parse_fraction for budgets: multiples of 1/255 print as "n/255"."""
    levels = round(value * 255)
    if levels and float(Fraction(levels, 255)) == value:
        return f"{levels}/255"
    return value


@dataclass(frozen=True)
class ClipTrainingConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 3e-3
    embed_dim: int = 64
    recall_gate: float = 0.70


@dataclass(frozen=True)
class DenseTrainingConfig:
    epochs: int = 12
    batch_size: int = 32
    learning_rate: float = 3e-3
    head_kinds: Tuple[str, ...] = DENSE_HEAD_KINDS
    miou_gate: float = 0.60
    map_gate: float = 0.60
    controls: bool = True


@dataclass(frozen=True)
class TrainingConfig:
    widths: Tuple[int, ...] = DEFAULT_WIDTHS
    clip: ClipTrainingConfig = field(default_factory=ClipTrainingConfig)
    dense: DenseTrainingConfig = field(default_factory=DenseTrainingConfig)


@dataclass(frozen=True)
class AttackConfig:
    """Canonical attack settings and the rows derived from them."""

    num_samples: Optional[int] = None
    eps_total: float = 8 / 255
    ratio: float = 3.0
    step_size: float = 2 / 255
    iterations: int = 10
    init_mode: str = "clean"
    kl_init_mode: str = "random_uniform"
    joint_weight: float = 1.0
    table1: Tuple[str, ...] = TABLE1_METHODS
    compute_matched: bool = True
    order_sweep: Tuple[Tuple[float, float], ...] = DEFAULT_ORDER_SWEEP
    split_sweep: Tuple[Tuple[float, float], ...] = DEFAULT_SPLIT_SWEEP
    workers: int = 1


@dataclass(frozen=True)
class ReportConfig:
    triptychs: int = 4
    diagnostics: bool = True


@dataclass(frozen=True)
class RunConfig:
    """Everything one run needs; fully serializable through to_dict()."""

    seed: int = 0
    output_dir: str = "runs/default"
    precision: str = "float64"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    report: ReportConfig = field(default_factory=ReportConfig)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["training"]["widths"] = list(self.training.widths)
        data["training"]["dense"]["head_kinds"] = list(self.training.dense.head_kinds)
        attack = data["attack"]
        attack["eps_total"] = format_fraction(self.attack.eps_total)
        attack["step_size"] = format_fraction(self.attack.step_size)
        attack["table1"] = list(self.attack.table1)
        for name in ("order_sweep", "split_sweep"):
            attack[name] = [[format_fraction(e), r] for e, r in getattr(self.attack, name)]
        return data

    def with_overrides(
        self, seed: Optional[int] = None, output_dir: Optional[str] = None
    ) -> "RunConfig":
        """Apply CLI overrides; a new master seed also re-derives the dataset seed."""
        config = self
        if seed is not None and seed != self.seed:
            config = replace(
                config,
                seed=int(seed),
                dataset=replace(config.dataset, seed=derive_seed(seed, "dataset")),
            )
        if output_dir is not None:
            config = replace(config, output_dir=str(output_dir))
        return config


def _check_keys(section: Dict[str, Any], cls, prefix: str) -> None:
    allowed = {f.name for f in fields(cls)}
    for key in section:
        if key not in allowed:
            raise ConfigError("unknown configuration key", f"{prefix}{key}")


def _section(data: Dict[str, Any], name: str, prefix: str = "") -> Dict[str, Any]:
    value = data.get(name) or {}
    if not isinstance(value, dict):
        raise ConfigError("expected a mapping", f"{prefix}{name}")
    return value


def _int(value: Any, key: str, minimum: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"expected an integer >= {minimum}, got {value!r}", key)
    return value


def _typed(value: Any, default: Any, key: str) -> Any:
    """Check a value against the type of the field's default."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected true or false, got {value!r}", key)
        return value
    if isinstance(default, int) or default is None:
        if value is None and default is None:
            return None
        return _int(value, key)
    if isinstance(default, float):
        return parse_fraction(value, key)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"expected a string, got {value!r}", key)
    return value


def _build(cls, section: Dict[str, Any], prefix: str, converters: Dict[str, Any] = None):
    """Instantiate a config dataclass, converting and type-checking each key."""
    _check_keys(section, cls, prefix)
    converters = converters or {}
    defaults = cls()
    values = {}
    for key, value in section.items():
        name = f"{prefix}{key}"
        if key in converters:
            values[key] = converters[key](value, name)
        else:
            values[key] = _typed(value, getattr(defaults, key), name)
    return cls(**values)


def _sweep(value: Any, key: str) -> Tuple[Tuple[float, float], ...]:
    if not isinstance(value, (list, tuple)):
        raise ConfigError("expected a list of [eps_total, ratio] pairs", key)
    rows = []
    for i, row in enumerate(value):
        if not isinstance(row, (list, tuple)) or len(row) != 2:
            raise ConfigError("expected an [eps_total, ratio] pair", f"{key}[{i}]")
        eps, ratio = parse_fraction(row[0], f"{key}[{i}]"), parse_fraction(row[1], f"{key}[{i}]")
        if eps < 0 or ratio <= 0:
            raise ConfigError("eps_total must be >= 0 and ratio > 0", f"{key}[{i}]")
        rows.append((eps, ratio))
    return tuple(rows)


def _choices(allowed: Tuple[str, ...]):
    def convert(value, key):
        items = tuple(value) if isinstance(value, (list, tuple)) else None
        if items is None or any(v not in allowed for v in items):
            raise ConfigError(f"expected a list drawn from {', '.join(allowed)}", key)
        return items

    return convert


def config_from_dict(data: Optional[Dict[str, Any]]) -> RunConfig:
    """
    Build and validate a RunConfig from parsed YAML.

    Args:
        data: Mapping as produced by yaml.safe_load (None means all defaults)

    Returns:
        RunConfig with the dataset seed resolved

    Raises:
        ConfigError: Naming the dotted path of the offending key
    """
    data = data or {}
    if not isinstance(data, dict):
        raise ConfigError("configuration file must contain a mapping")
    _check_keys(data, RunConfig, "")

    seed = _int(data.get("seed", 0), "seed")
    precision = data.get("precision", "float64")
    if precision not in PRECISIONS:
        raise ConfigError(f"expected one of {', '.join(PRECISIONS)}", "precision")

    dataset_section = dict(_section(data, "dataset"))
    dataset_section.setdefault("seed", derive_seed(seed, "dataset"))
    dataset = _build(DatasetSpec, dataset_section, "dataset.")
    try:
        dataset.validate()
    except DatasetError as e:
        raise ConfigError(str(e), "dataset") from e

    training_section = _section(data, "training")
    _check_keys(training_section, TrainingConfig, "training.")
    widths = tuple(training_section.get("widths", DEFAULT_WIDTHS))
    if len(widths) != 4:
        raise ConfigError("expected four widths", "training.widths")
    for width in widths:
        _int(width, "training.widths", 1)
    clip = _build(ClipTrainingConfig, _section(training_section, "clip", "training."), "training.clip.")
    dense = _build(
        DenseTrainingConfig,
        _section(training_section, "dense", "training."),
        "training.dense.",
        {"head_kinds": _choices(DENSE_HEAD_KINDS)},
    )
    training = TrainingConfig(widths=widths, clip=clip, dense=dense)

    attack = _build(
        AttackConfig,
        _section(data, "attack"),
        "attack.",
        {
            "eps_total": parse_fraction,
            "ratio": parse_fraction,
            "step_size": parse_fraction,
            "joint_weight": parse_fraction,
            "table1": _choices(TABLE1_METHODS),
            "order_sweep": _sweep,
            "split_sweep": _sweep,
        },
    )
    _validate_attack(attack)

    report = _build(ReportConfig, _section(data, "report"), "report.")
    _int(report.triptychs, "report.triptychs")

    return RunConfig(
        seed=seed,
        output_dir=str(data.get("output_dir", RunConfig.output_dir)),
        precision=precision,
        dataset=dataset,
        training=training,
        attack=attack,
        report=report,
    )


def _validate_attack(attack: AttackConfig) -> None:
    if attack.num_samples is not None:
        _int(attack.num_samples, "attack.num_samples", 1)
    _int(attack.iterations, "attack.iterations", 1)
    _int(attack.workers, "attack.workers", 1)
    if attack.eps_total < 0:
        raise ConfigError("must be non-negative", "attack.eps_total")
    if attack.ratio <= 0:
        raise ConfigError("must be positive", "attack.ratio")
    if attack.step_size <= 0:
        raise ConfigError("must be positive", "attack.step_size")
    if attack.joint_weight < 0:
        raise ConfigError("must be non-negative", "attack.joint_weight")
    for name in ("init_mode", "kl_init_mode"):
        if getattr(attack, name) not in INIT_MODES:
            raise ConfigError(f"expected one of {', '.join(INIT_MODES)}", f"attack.{name}")


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    """
    Load a run configuration from a YAML file (defaults when path is None).

    Raises:
        ConfigError: If the file is missing, is not valid YAML or fails validation
    """
    if path is None:
        return config_from_dict({})

    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError as e:
        raise ConfigError(f"configuration file not found: {path}") from e
    except yaml.YAMLError as e:
        raise ConfigError(f"invalid YAML in {path}: {e}") from e

    config = config_from_dict(data)
    logger.debug(f"Loaded configuration from {path}")
    return config


def dump_config(config: RunConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=True, default_flow_style=False)


def save_config(config: RunConfig, path: Union[str, Path]) -> Path:
    """Write the resolved configuration as YAML; loading it back gives an equal RunConfig."""
    return atomic_write_text(path, dump_config(config))
