"""Evaluation suite, table/JSON reports, trend checks and image triptychs."""

import csv
import io
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .attacks import AttackResult, AttackSpec
from .dataset import SyntheticSample, png_bytes
from .metrics import (
    DENSE_METRIC_NAMES,
    UndefinedASRError,
    asr,
    dense_task_metric,
    format_asr,
    recall_at_1,
)
from .models import ModelSet
from .objectives import TextBank, gradient_conflict_report
from .workspace import atomic_write_bytes, atomic_write_json, atomic_write_text

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1

_METRIC_COLUMNS = [
    "dense_metric",
    "dense_clean",
    "dense_adv",
    "dense_asr",
    "recall_clean",
    "recall_adv",
    "recall_asr",
    "samples",
    "partial",
    "missing",
]
TABLE_COLUMNS = {
    "table1": ["row_id", "label", "head_kind", "iterations", "eps_total"] + _METRIC_COLUMNS,
    "table2": ["row_id", "label", "head_kind", "eps_task", "eps_clip"] + _METRIC_COLUMNS,
    "table3": ["row_id", "label", "head_kind", "eps_total", "eps_task", "eps_clip"]
    + _METRIC_COLUMNS,
}
_BUDGET_COLUMNS = ("eps_total", "eps_task", "eps_clip")
_ASR_COLUMNS = ("dense_asr", "recall_asr")


class ReportError(Exception):
    """Exception raised when a report cannot be assembled or written."""
    pass


@dataclass
class MetricRow:
    """Clean and adversarial metrics of one row, with gaps left as None."""

    table: str
    row_id: str
    label: str
    head_kind: str
    strategy: str
    target: str = "dense"
    compute_matched: bool = False
    iterations: int = 0
    eps_total: float = 0.0
    eps_task: float = 0.0
    eps_clip: float = 0.0
    dense_metric: str = ""
    dense_clean: Optional[float] = None
    dense_adv: Optional[float] = None
    dense_asr: Optional[float] = None
    recall_clean: Optional[float] = None
    recall_adv: Optional[float] = None
    recall_asr: Optional[float] = None
    samples: int = 0
    partial: int = 0
    missing: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return not self.missing and self.dense_adv is not None


@dataclass
class MetricReport:
    """All rows of one run plus the configuration echo, seed, diagnostics and trend checks."""

    seed: int
    config: Dict
    rows: List[MetricRow] = field(default_factory=list)
    diagnostics: Dict = field(default_factory=dict)
    trends: List[Dict] = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION

    def table(self, name: str) -> List[MetricRow]:
        return [row for row in self.rows if row.table == name]

    def row(self, row_id: str) -> MetricRow:
        for row in self.rows:
            if row.row_id == row_id:
                return row
        raise ReportError(f"No row {row_id} in the report")

    def to_dict(self) -> Dict:
        return {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "config": self.config,
            "columns": TABLE_COLUMNS,
            "rows": [asdict(row) for row in self.rows],
            "diagnostics": self.diagnostics,
            "trends": self.trends,
        }


def _safe_asr(before: Optional[float], after: Optional[float], notes: List[str], what: str):
    if before is None or after is None:
        return None
    try:
        return asr(before, after)
    except UndefinedASRError as e:
        notes.append(f"{what}: {e}")
        return None


def _stack(images: Sequence[np.ndarray]) -> np.ndarray:
    return np.stack(list(images))


def run_evaluation_suite(
    models: ModelSet,
    specs: Sequence[AttackSpec],
    results: Dict[str, Dict[str, AttackResult]],
    samples: Sequence[SyntheticSample],
    bank: TextBank,
    config: Optional[Dict] = None,
    seed: int = 0,
    diagnostics_seed: Optional[int] = None,
    diagnostic_eps: float = 8 / 255,
) -> MetricReport:
    """
    Evaluate clean and adversarial metrics for every attack row.

    Dense metrics of a row are always measured on the derived dense model of the
    row's head kind, also when the attack targeted the control model.

    Args:
        models: Loaded models
        specs: Attack rows
        results: Per-row results keyed by row_id then sample_id
        samples: Evaluated samples
        bank: Text bank
        config: Configuration echo
        seed: Master seed
        diagnostics_seed: Seed of the gradient-conflict sample points; None skips diagnostics
        diagnostic_eps: Radius of the sample points

    Returns:
        MetricReport; rows with missing samples carry gaps instead of metrics
    """
    if not samples:
        raise ReportError("Cannot evaluate an empty sample set")
    dtype = models.clip.numpy_dtype
    clean_images = _stack(s.image.astype(dtype) for s in samples)
    captions = [s.caption for s in samples]

    recall_clean = recall_at_1(models.clip, clean_images, bank, captions)
    head_kinds = list(dict.fromkeys(spec.head_kind for spec in specs)) or list(models.dense)
    dense_clean = {
        hk: dense_task_metric(models.dense_model(hk), clean_images, samples) for hk in head_kinds
    }

    report = MetricReport(seed=seed, config=dict(config or {}))
    for hk in head_kinds:
        report.rows.append(
            MetricRow(
                table="table1",
                row_id=f"t1-{hk}-clean",
                label="Clean",
                head_kind=hk,
                strategy="clean",
                dense_metric=DENSE_METRIC_NAMES[hk],
                dense_clean=dense_clean[hk],
                recall_clean=recall_clean,
                samples=len(samples),
            )
        )

    for spec in specs:
        row = _evaluate_row(
            spec,
            models,
            results.get(spec.row_id, {}),
            samples,
            bank,
            clean_images,
            dense_clean[spec.head_kind],
            recall_clean,
        )
        report.rows.append(row)

    if diagnostics_seed is not None:
        report.diagnostics = _diagnostics(
            models, specs, results, samples, bank, head_kinds, diagnostics_seed, diagnostic_eps, report
        )
    report.trends = check_trends(report)
    return report


def _evaluate_row(
    spec: AttackSpec,
    models: ModelSet,
    row_results: Dict[str, AttackResult],
    samples: Sequence[SyntheticSample],
    bank: TextBank,
    clean_images: np.ndarray,
    dense_clean: float,
    recall_clean: float,
) -> MetricRow:
    row = MetricRow(
        table=spec.table,
        row_id=spec.row_id,
        label=spec.label or spec.row_id,
        head_kind=spec.head_kind,
        strategy=spec.strategy,
        target=spec.target,
        compute_matched=spec.compute_matched,
        iterations=spec.iterations,
        eps_total=spec.eps_total,
        eps_task=spec.eps_task,
        eps_clip=spec.eps_clip,
        dense_metric=DENSE_METRIC_NAMES[spec.head_kind],
        dense_clean=dense_clean,
        recall_clean=recall_clean,
    )
    row.missing = [s.sample_id for s in samples if s.sample_id not in row_results]
    row.samples = len(samples) - len(row.missing)
    row.partial = sum(1 for r in row_results.values() if r.partial)
    if row.missing:
        logger.warning(f"{spec.row_id}: {len(row.missing)} samples missing, leaving a gap")
        return row

    adversarial = _stack(row_results[s.sample_id].adversarial for s in samples)
    if adversarial.shape != clean_images.shape:
        raise ReportError(f"{spec.row_id}: adversarial images do not match the clean images")
    row.dense_adv = dense_task_metric(models.dense_model(spec.head_kind), adversarial, samples)
    row.recall_adv = recall_at_1(models.clip, adversarial, bank, [s.caption for s in samples])
    row.dense_asr = _safe_asr(dense_clean, row.dense_adv, row.notes, "dense ASR")
    row.recall_asr = _safe_asr(recall_clean, row.recall_adv, row.notes, "retrieval ASR")
    return row


def _diagnostics(models, specs, results, samples, bank, head_kinds, seed, diagnostic_eps, report) -> Dict:
    diagnostics: Dict = {"conflict": {}, "joint_cosines": {}, "kl_increase": {}, "transfer": {}}

    for hk in head_kinds:
        conflict = gradient_conflict_report(
            models.dense_model(hk), models.clip, samples, bank, diagnostic_eps, seed
        )
        diagnostics["conflict"][hk] = conflict.to_dict()

    for spec in specs:
        row_results = results.get(spec.row_id, {})
        if not row_results:
            continue
        if spec.strategy == "joint":
            cosines = [c for r in row_results.values() for c in r.cosines if c is not None]
            diagnostics["joint_cosines"][spec.row_id] = (
                float(np.median(cosines)) if cosines else None
            )
        if spec.strategy == "staged":
            traces = [r.traces.get("clip") for r in row_results.values()]
            traces = [t for t in traces if t]
            increased = sum(1 for t in traces if t[-1] > t[0])
            diagnostics["kl_increase"][spec.row_id] = increased / len(traces) if traces else None

    for hk in head_kinds:
        rows = {
            row.target: row
            for row in report.table("table1")
            if row.head_kind == hk and row.strategy == "single_task" and not row.compute_matched
        }
        if "dense" in rows and "control" in rows:
            diagnostics["transfer"][hk] = {
                "derived_recall_asr": rows["dense"].recall_asr,
                "control_recall_asr": rows["control"].recall_asr,
            }
    return diagnostics


def _find(report: MetricReport, **attrs) -> List[MetricRow]:
    return [
        row
        for row in report.rows
        if all(
            abs(getattr(row, k) - v) < 1e-9 if isinstance(v, float) else getattr(row, k) == v
            for k, v in attrs.items()
        )
    ]


def _check(criterion: str, head_kind: str, passed: Optional[bool], detail: str) -> Dict:
    return {"criterion": criterion, "head_kind": head_kind, "passed": passed, "detail": detail}


def _min_asr(row: MetricRow) -> Optional[float]:
    if row.dense_asr is None or row.recall_asr is None:
        return None
    return min(row.dense_asr, row.recall_asr)


def check_trends(report: MetricReport, canonical_eps: float = 8 / 255) -> List[Dict]:
    """
    Evaluate the expected qualitative trends of the three tables.

    Criteria whose rows are missing are recorded with passed = None.

    Returns:
        One dict per (criterion, head kind) with "passed" and a human-readable detail
    """
    checks = []
    head_kinds = list(dict.fromkeys(row.head_kind for row in report.rows))

    for hk in head_kinds:
        base = dict(table="table1", head_kind=hk, compute_matched=False)
        singles = {
            row.target: row for row in _find(report, strategy="single_task", **base)
        }

        for target, own, other, label in (
            ("dense", "dense_asr", "recall_asr", "dense-only PGD is one-sided"),
            ("clip", "recall_asr", "dense_asr", "CLIP-only PGD is one-sided"),
        ):
            row = singles.get(target)
            if row is None or not row.complete:
                checks.append(_check(label, hk, None, "row missing"))
                continue
            own_asr, other_asr = getattr(row, own), getattr(row, other)
            passed = own_asr is not None and other_asr is not None and own_asr >= 80 and other_asr <= 40
            checks.append(_check(label, hk, passed, f"{own}={own_asr}, {other}={other_asr}"))

        staged = _find(report, strategy="staged", **base)
        if not staged or not staged[0].complete:
            checks.append(_check("staged attack beats every baseline", hk, None, "row missing"))
        else:
            row = staged[0]
            baselines = [
                r
                for r in _find(report, table="table1", head_kind=hk)
                if r.strategy in ("single_task", "joint") and r.target != "control" and r.complete
            ]
            floor = _min_asr(row)
            passed = (
                floor is not None
                and row.dense_asr >= 50
                and row.recall_asr >= 80
                and all(_min_asr(b) is None or floor > _min_asr(b) for b in baselines)
            )
            detail = f"min ASR {floor} vs baselines " + ", ".join(
                f"{b.row_id}={_min_asr(b)}" for b in baselines
            )
            checks.append(_check("staged attack beats every baseline", hk, passed, detail))

        forward = _find(report, table="table2", head_kind=hk, strategy="staged",
                        eps_task=6 / 255, eps_clip=2 / 255)
        reverse = _find(report, table="table2", head_kind=hk, strategy="order_reversed",
                        eps_task=6 / 255, eps_clip=2 / 255)
        if not forward or not reverse or not (forward[0].complete and reverse[0].complete):
            checks.append(_check("task-first order beats CLIP-first", hk, None, "row missing"))
        else:
            a, b = forward[0].recall_asr, reverse[0].recall_asr
            passed = a is not None and b is not None and a >= b + 20
            checks.append(_check("task-first order beats CLIP-first", hk, passed,
                                 f"recall_asr {a} vs {b}"))

        sweep = sorted(
            (r for r in _find(report, table="table3", head_kind=hk, eps_total=canonical_eps)
             if r.complete and r.dense_asr is not None),
            key=lambda r: r.eps_task,
        )
        if len(sweep) < 2:
            checks.append(_check("dense ASR grows with the task budget", hk, None, "row missing"))
        else:
            values = [r.dense_asr for r in sweep]
            drops = [a - b for a, b in zip(values, values[1:]) if b < a]
            passed = not drops or (len(drops) == 1 and drops[0] <= 2.0)
            checks.append(_check("dense ASR grows with the task budget", hk, passed,
                                 "dense_asr by eps_task: " + ", ".join(f"{v:.1f}" for v in values)))

    return checks


def _csv_cell(column: str, value) -> str:
    if value is None:
        return ""
    if column == "missing":
        return str(len(value))
    if column in _BUDGET_COLUMNS:
        return f"{value * 255:.6g}/255"
    if column in _ASR_COLUMNS:
        return format_asr(value)
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


def format_table(report: MetricReport, table: str) -> str:
    """CSV text of one table replica; ASR cells at one decimal place."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    columns = TABLE_COLUMNS[table]
    writer.writerow(columns)
    for row in report.table(table):
        writer.writerow([_csv_cell(c, getattr(row, c)) for c in columns])
    return buffer.getvalue()


def write_report(report: MetricReport, directory: Path) -> Dict[str, Path]:
    """
    Write table1.csv, table2.csv, table3.csv and report.json.

    Returns:
        Mapping of artifact name to path
    """
    directory = Path(directory)
    paths = {}
    for table in TABLE_COLUMNS:
        paths[table] = atomic_write_text(directory / f"{table}.csv", format_table(report, table))
    paths["report"] = atomic_write_json(directory / "report.json", report.to_dict())
    logger.info(f"Wrote report to {directory}")
    return paths


def triptych(clean: np.ndarray, adversarial: np.ndarray, eps: float) -> np.ndarray:
    """Clean | adversarial | delta side by side; the delta is scaled so +-eps spans black to white."""
    delta = adversarial - clean
    scale = 0.5 / eps if eps > 0 else 0.0
    shown = np.clip(0.5 + delta * scale, 0.0, 1.0)
    gap = np.ones((clean.shape[0], 2, clean.shape[2]))
    strip = np.concatenate([clean, gap, adversarial, gap, shown], axis=1)
    return np.round(strip * 255).astype(np.uint8)


def write_triptychs(
    samples: Sequence[SyntheticSample],
    results: Dict[str, AttackResult],
    directory: Path,
    count: int,
    eps: float,
) -> List[Path]:
    """Write up to count triptych PNGs, in sample order."""
    paths = []
    for sample in samples:
        if len(paths) >= count:
            break
        result = results.get(sample.sample_id)
        if result is None:
            continue
        clean = sample.image.astype(result.adversarial.dtype)
        image = triptych(clean, result.adversarial, eps)
        paths.append(atomic_write_bytes(Path(directory) / f"{sample.sample_id}.png", png_bytes(image)))

    if len(paths) < count:
        logger.warning(f"Only {len(paths)} of {count} triptychs could be written")
    return paths
