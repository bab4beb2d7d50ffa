"""Pipeline commands: generate, train, attack, report and the full run."""

import datetime
import logging
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import dateutil.parser
import pytz
import torch

from .attacks import (
    AttackError,
    AttackResult,
    AttackSpec,
    format_levels,
    has_result,
    load_attack_result,
    run_attack,
    save_attack_failure,
    save_attack_result,
)
from .checkpoint import (
    load_checkpoint,
    load_text_bank_captions,
    save_checkpoint,
    save_text_bank_captions,
)
from .config import RunConfig, derive_seed, save_config
from .dataset import SyntheticDataset, SyntheticSample, generate_dataset, load_dataset, save_dataset
from .models import ModelError, ModelSet
from .objectives import ObjectiveError, TextBank
from .perturb import PerturbationError, PgdConfig, split_budget
from .report import MetricReport, ReportError, run_evaluation_suite, write_report, write_triptychs
from .training import (
    TrainingSummary,
    backbones_differ,
    derive_dense_model,
    train_toy_clip,
    training_seeds,
)
from .workspace import (
    OverwriteRefusedError,
    RunWorkspace,
    WorkspaceError,
    atomic_write_json,
    directory_checksum,
    read_json,
)

logger = logging.getLogger(__name__)

TORCH_DTYPES = {"float64": torch.float64, "float32": torch.float32}

TABLE1_LABELS = {
    "pgd-dense": "PGD (dense)",
    "pgd-clip": "PGD (CLIP)",
    "pgd-control": "PGD (control)",
    "joint": "Joint",
    "staged": "Staged",
}
COMPUTE_MATCHED = ("pgd-dense", "pgd-clip", "joint")


@dataclass
class GenerateSummary:
    path: Path
    checksum: str
    counts: Dict[str, int]


@dataclass
class AttackRunSummary:
    """Counts of one attack command; failed and partial hold "<run_key>/<sample_id>" ids."""

    rows: int = 0
    runs: int = 0
    computed: int = 0
    skipped: int = 0
    failed: List[str] = field(default_factory=list)
    partial: List[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not self.failed and not self.partial


@dataclass
class ReportSummary:
    report: MetricReport
    paths: Dict[str, Path]
    triptychs: List[Path]
    missing: List[str]
    trends: List[Dict]
    record: Path


def _now() -> str:
    return datetime.datetime.now(pytz.utc).isoformat()


def _elapsed(started: str, finished: str) -> float:
    return (dateutil.parser.isoparse(finished) - dateutil.parser.isoparse(started)).total_seconds()


def _read_record(ws: RunWorkspace) -> Dict:
    if ws.record_path.is_file():
        try:
            return read_json(ws.record_path)
        except WorkspaceError as e:
            logger.warning(f"Ignoring unreadable run record: {e}")
    return {}


def _write_record(ws: RunWorkspace, record: Dict) -> Path:
    """Write the run record after checking that every artifact it names exists."""
    paths = [ws.path / rel for rel in record.get("artifacts", {}).values()]
    missing = ws.missing(paths)
    if missing:
        raise ReportError(f"Run record references missing artifacts: {', '.join(missing)}")
    stages = record.get("stages", {})
    record["wall_clock_seconds"] = sum(s.get("wall_clock_seconds", 0.0) for s in stages.values())
    return atomic_write_json(ws.record_path, record)


def _record_stage(ws: RunWorkspace, config: RunConfig, stage: str, started: str, **extra) -> None:
    finished = _now()
    record = _read_record(ws)
    record["config"] = config.to_dict()
    record["environment"] = {
        "precision": config.precision,
        "platform": platform.platform(),
        "python": platform.python_version(),
    }
    record.setdefault("stages", {})[stage] = {
        "started_at": started,
        "finished_at": finished,
        "wall_clock_seconds": _elapsed(started, finished),
        **extra,
    }
    _write_record(ws, record)


def _relative(ws: RunWorkspace, path: Path) -> str:
    return Path(path).relative_to(ws.path).as_posix()


def plan_attacks(config: RunConfig) -> List[AttackSpec]:
    """
    Expand the attack configuration into the rows of the three tables.

    Table 1 holds the baselines and the staged attack at the canonical budget (plus
    the compute-matched baselines), Table 2 the order ablation and Table 3 the split
    sweep, each once per dense head kind.
    """
    a = config.attack
    task_cfg = PgdConfig(alpha=a.step_size, iterations=a.iterations, init_mode=a.init_mode)
    clip_cfg = PgdConfig(alpha=a.step_size, iterations=a.iterations, init_mode=a.kl_init_mode)
    canonical = split_budget(a.eps_total, a.ratio)

    specs: List[AttackSpec] = []
    for hk in config.training.dense.head_kinds:
        for method in a.table1:
            if method == "pgd-control" and not config.training.dense.controls:
                continue
            matched_variants = [False, True] if a.compute_matched and method in COMPUTE_MATCHED else [False]
            for matched in matched_variants:
                factor = 2 if matched else 1
                common = dict(
                    row_id=f"t1-{hk}-{method}" + ("-x2" if matched else ""),
                    head_kind=hk,
                    task_cfg=replace(task_cfg, iterations=factor * a.iterations),
                    clip_cfg=replace(clip_cfg, iterations=factor * a.iterations),
                    table="table1",
                    label=TABLE1_LABELS[method] + (" x2 iters" if matched else ""),
                    compute_matched=matched,
                )
                if method.startswith("pgd-"):
                    specs.append(AttackSpec(strategy="single_task", eps_total=a.eps_total,
                                            target=method[4:], **common))
                elif method == "joint":
                    specs.append(AttackSpec(strategy="joint", eps_total=a.eps_total,
                                            joint_weight=a.joint_weight, **common))
                else:
                    specs.append(AttackSpec(strategy="staged", eps_total=canonical.eps_total,
                                            split=canonical, **common))

        for eps_total, ratio in a.order_sweep:
            split = split_budget(eps_total, ratio)
            levels = f"{format_levels(split.eps_task)}-{format_levels(split.eps_clip)}"
            for strategy, order, label in (
                ("staged", "task-first", "Task -> CLIP"),
                ("order_reversed", "clip-first", "CLIP -> Task"),
            ):
                specs.append(
                    AttackSpec(
                        row_id=f"t2-{hk}-{order}-{levels}",
                        strategy=strategy,
                        head_kind=hk,
                        eps_total=split.eps_total,
                        split=split,
                        task_cfg=task_cfg,
                        clip_cfg=clip_cfg,
                        table="table2",
                        label=f"{label} ({levels})",
                    )
                )
        if a.order_sweep:
            specs.append(
                AttackSpec(
                    row_id=f"t2-{hk}-joint",
                    strategy="joint",
                    head_kind=hk,
                    eps_total=a.eps_total,
                    joint_weight=a.joint_weight,
                    task_cfg=task_cfg,
                    clip_cfg=clip_cfg,
                    table="table2",
                    label="Joint",
                )
            )

        for eps_total, ratio in a.split_sweep:
            split = split_budget(eps_total, ratio)
            levels = "-".join(format_levels(e) for e in (split.eps_total, split.eps_task, split.eps_clip))
            specs.append(
                AttackSpec(
                    row_id=f"t3-{hk}-{levels}",
                    strategy="staged",
                    head_kind=hk,
                    eps_total=split.eps_total,
                    split=split,
                    task_cfg=task_cfg,
                    clip_cfg=clip_cfg,
                    table="table3",
                    label=f"{levels}/255",
                )
            )

    for name, table in (("table1", "table1"), ("order_sweep", "table2"), ("split_sweep", "table3")):
        if not getattr(a, name):
            logger.warning(f"attack.{name} is empty; {table} will have no rows")

    return specs


def unique_runs(specs: Sequence[AttackSpec]) -> List[Tuple[AttackSpec, List[str]]]:
    """One spec per distinct computation, with the ids of every row it serves."""
    runs: Dict[str, Tuple[AttackSpec, List[str]]] = {}
    for spec in specs:
        runs.setdefault(spec.run_key, (spec, []))[1].append(spec.row_id)
    return list(runs.values())


def select_samples(config: RunConfig, dataset: SyntheticDataset) -> List[SyntheticSample]:
    """The first num_samples test samples (all of them when unset)."""
    test = dataset.test
    n = config.attack.num_samples
    return list(test if n is None else test[:n])


def _require_dataset(ws: RunWorkspace) -> SyntheticDataset:
    if not ws.has_dataset():
        raise WorkspaceError(f"No dataset in {ws.path}; run 'stagedpgd generate' first")
    return load_dataset(ws.dataset_dir)


def model_names(config: RunConfig) -> List[str]:
    names = ["clip"]
    for hk in config.training.dense.head_kinds:
        names.append(hk)
        if config.training.dense.controls:
            names.append(f"{hk}-control")
    return names


def load_models(ws: RunWorkspace, config: RunConfig) -> ModelSet:
    """
    Load every checkpoint the configuration needs, in the configured precision.

    Raises:
        WorkspaceError: Listing the checkpoints that are missing
    """
    missing = [n for n in model_names(config) if not ws.has_checkpoint(n)]
    if missing:
        raise WorkspaceError(
            f"Missing checkpoints: {', '.join(missing)}; run 'stagedpgd train' first"
        )

    dtype = TORCH_DTYPES[config.precision]
    models = ModelSet(clip=load_checkpoint(ws.checkpoints_dir, "clip", dtype))
    for hk in config.training.dense.head_kinds:
        models.dense[hk] = load_checkpoint(ws.checkpoints_dir, hk, dtype)
        if config.training.dense.controls:
            models.control[hk] = load_checkpoint(ws.checkpoints_dir, f"{hk}-control", dtype)
    return models


def load_bank(ws: RunWorkspace, clip_model) -> TextBank:
    """Rebuild the text bank in its persisted caption order."""
    captions, checksum = load_text_bank_captions(ws.checkpoints_dir)
    bank = TextBank.build(clip_model, captions)
    if bank.checksum() != checksum:
        raise WorkspaceError("Text bank checksum does not match the persisted caption order")
    return bank


def cmd_generate(config: RunConfig, overwrite: bool = False) -> GenerateSummary:
    """
    Generate the dataset into <output_dir>/dataset.

    Raises:
        OverwriteRefusedError: If a dataset exists and overwrite is False
        DatasetError: If the dataset spec is invalid
    """
    started = _now()
    ws = RunWorkspace(config.output_dir)
    config.dataset.validate()
    target = ws.prepare_dataset_dir(overwrite)

    dataset = generate_dataset(config.dataset)
    save_dataset(dataset, target)
    save_config(config, ws.config_path)

    checksum = directory_checksum(target)
    counts = {split: len(samples) for split, samples in dataset.splits.items()}
    _record_stage(ws, config, "generate", started, dataset_checksum=checksum)
    logger.info(f"Dataset checksum {checksum}")
    return GenerateSummary(path=target, checksum=checksum, counts=counts)


def cmd_train(config: RunConfig) -> List[TrainingSummary]:
    """
    Train the contrastive model, the dense derivatives and the control models.

    Every model that passes its gate is checkpointed before the next one trains.

    Raises:
        GateError: On the first missed gate
    """
    started = _now()
    ws = RunWorkspace(config.output_dir)
    dataset = _require_dataset(ws)
    if dataset.spec != config.dataset:
        logger.warning("Stored dataset was generated from a different dataset spec")

    dense_cfg = config.training.dense
    seeds = training_seeds(config.seed, dense_cfg.head_kinds)
    eval_dtype = TORCH_DTYPES[config.precision]
    summaries: List[TrainingSummary] = []

    clip, summary = train_toy_clip(
        dataset.train, dataset.test, config.training.clip, config.training.widths,
        seeds["clip"], eval_dtype,
    )
    summaries.append(summary)
    save_checkpoint(clip, ws.checkpoints_dir, {"training": summary.to_dict()})
    bank_captions = TextBank.unique_captions(dataset.test)
    save_text_bank_captions(
        bank_captions, ws.checkpoints_dir, TextBank.build(clip, bank_captions).checksum()
    )

    for hk in dense_cfg.head_kinds:
        model, summary = derive_dense_model(
            clip, hk, dataset.train, dataset.test, dense_cfg, seeds[hk], eval_dtype
        )
        if not backbones_differ(model, clip):
            logger.warning(f"{hk} fine-tuning left the contrastive backbone unchanged")
        summaries.append(summary)
        save_checkpoint(model, ws.checkpoints_dir, {"training": summary.to_dict()})

        if dense_cfg.controls:
            control, summary = derive_dense_model(
                clip, hk, dataset.train, dataset.test, dense_cfg, seeds[f"{hk}-control"],
                eval_dtype, freeze_backbone=True,
            )
            summaries.append(summary)
            save_checkpoint(control, ws.checkpoints_dir, {"training": summary.to_dict()})

    save_config(config, ws.config_path)
    _record_stage(
        ws, config, "train", started,
        gates={s.name: {"metric": s.metric_name, "value": s.metric_value, "gate": s.gate}
               for s in summaries},
    )
    return summaries


def _attack_sample(
    spec: AttackSpec, models: ModelSet, sample: SyntheticSample, bank: TextBank, seed: int
) -> Tuple[Optional[AttackResult], Optional[str]]:
    task_seed = derive_seed(seed, f"attack:{sample.sample_id}:task")
    clip_seed = derive_seed(seed, f"attack:{sample.sample_id}:clip")
    try:
        return run_attack(spec, models, sample, bank, task_seed, clip_seed), None
    except (AttackError, PerturbationError, ObjectiveError, ModelError) as e:
        logger.warning(f"{spec.run_key}: attack on {sample.sample_id} failed: {e}")
        return None, str(e)


def cmd_attack(
    config: RunConfig, workers: Optional[int] = None, resume: bool = False
) -> AttackRunSummary:
    """
    Run every planned attack row on the selected test samples and persist the results.

    Rows that perform the same computation share one result directory. Failed
    samples are recorded and the run continues.

    Args:
        config: Run configuration
        workers: Per-sample worker threads (defaults to attack.workers)
        resume: Skip samples that already have a stored result

    Returns:
        AttackRunSummary
    """
    plan = plan_attacks(config)
    if not plan:
        logger.warning("Attack plan is empty; nothing to run")
        return AttackRunSummary()

    started = _now()
    ws = RunWorkspace(config.output_dir)
    samples = select_samples(config, _require_dataset(ws))
    models = load_models(ws, config)
    bank = load_bank(ws, models.clip)

    workers = workers or config.attack.workers
    if workers > 1:
        torch.set_num_threads(1)

    runs = unique_runs(plan)
    summary = AttackRunSummary(rows=len(plan), runs=len(runs))
    logger.info(f"Running {len(runs)} attacks ({len(plan)} rows) on {len(samples)} samples...")

    for spec, row_ids in runs:
        row_dir = ws.row_dir(spec.run_key)
        atomic_write_json(row_dir / "spec.json", {"rows": row_ids, "spec": spec.to_dict()})

        todo = [s for s in samples if not (resume and has_result(row_dir, s.sample_id))]
        summary.skipped += len(samples) - len(todo)

        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(
                pool.map(lambda s: _attack_sample(spec, models, s, bank, config.seed), todo)
            )

        for sample, (result, error) in zip(todo, outcomes):
            key = f"{spec.run_key}/{sample.sample_id}"
            if result is None:
                save_attack_failure(row_dir, sample.sample_id, error)
                summary.failed.append(key)
                continue
            save_attack_result(result, row_dir)
            summary.computed += 1
            if result.partial:
                summary.partial.append(key)
        logger.info(f"{spec.run_key}: {len(todo)} samples done")

    if summary.failed or summary.partial:
        logger.warning(f"{len(summary.failed)} failed and {len(summary.partial)} partial results")
    _record_stage(
        ws, config, "attack", started,
        computed=summary.computed, skipped=summary.skipped,
        failed=summary.failed, partial=summary.partial,
    )
    return summary


def cmd_report(config: RunConfig) -> ReportSummary:
    """
    Evaluate stored attack results and write the tables, JSON report, triptychs and run record.

    Missing or unreadable results become gaps in the report and are listed in the summary.
    """
    started = _now()
    ws = RunWorkspace(config.output_dir)
    dataset = _require_dataset(ws)
    samples = select_samples(config, dataset)
    models = load_models(ws, config)
    bank = load_bank(ws, models.clip)
    plan = plan_attacks(config)

    missing: List[str] = []
    results: Dict[str, Dict[str, AttackResult]] = {}
    loaded: Dict[str, Dict[str, AttackResult]] = {}
    for spec in plan:
        if spec.run_key not in loaded:
            row_dir = ws.row_dir(spec.run_key)
            row: Dict[str, AttackResult] = {}
            for sample in samples:
                key = f"{spec.run_key}/{sample.sample_id}"
                if not has_result(row_dir, sample.sample_id):
                    missing.append(key)
                    continue
                try:
                    row[sample.sample_id] = load_attack_result(row_dir, sample)
                except AttackError as e:
                    logger.warning(f"Skipping unreadable result {key}: {e}")
                    missing.append(key)
            loaded[spec.run_key] = row
        results[spec.row_id] = loaded[spec.run_key]

    if missing:
        logger.warning(f"{len(missing)} attack results are missing; the report will have gaps")

    report = run_evaluation_suite(
        models,
        plan,
        results,
        samples,
        bank,
        config=config.to_dict(),
        seed=config.seed,
        diagnostics_seed=derive_seed(config.seed, "diagnostics") if config.report.diagnostics else None,
        diagnostic_eps=config.attack.eps_total,
    )
    paths = write_report(report, ws.reports_dir)

    for stale in ws.triptych_dir.glob("*.png"):
        stale.unlink()
    triptychs: List[Path] = []
    canonical = next((s for s in plan if s.table == "table1" and s.strategy == "staged"), None)
    if canonical is not None and config.report.triptychs:
        triptychs = write_triptychs(
            samples, results[canonical.row_id], ws.triptych_dir, config.report.triptychs,
            canonical.eps_total,
        )

    finished = _now()
    record = _read_record(ws)
    record["artifacts"] = {
        "config": _relative(ws, ws.config_path) if ws.config_path.is_file() else None,
        **{name: _relative(ws, p) for name, p in paths.items()},
        **{f"triptych:{p.stem}": _relative(ws, p) for p in triptychs},
    }
    record["artifacts"] = {k: v for k, v in record["artifacts"].items() if v is not None}
    record["metric_report"] = _relative(ws, paths["report"])
    record["missing"] = missing
    record.setdefault("stages", {})["report"] = {
        "started_at": started,
        "finished_at": finished,
        "wall_clock_seconds": _elapsed(started, finished),
    }
    record["config"] = config.to_dict()
    record["environment"] = {
        "precision": config.precision,
        "platform": platform.platform(),
        "python": platform.python_version(),
    }
    record_path = _write_record(ws, record)

    return ReportSummary(
        report=report,
        paths=paths, triptychs=triptychs, missing=missing, trends=report.trends, record=record_path
    )


def run_all(
    config: RunConfig,
    overwrite: bool = False,
    workers: Optional[int] = None,
    resume: bool = False,
) -> Tuple[AttackRunSummary, ReportSummary]:
    """
    Generate, train, attack and report in one go.

    An existing dataset generated from the same spec is reused, as are existing
    checkpoints; overwrite regenerates and retrains both.
    """
    ws = RunWorkspace(config.output_dir)
    if overwrite or not ws.has_dataset():
        cmd_generate(config, overwrite=overwrite)
    else:
        stored = load_dataset(ws.dataset_dir).spec
        if stored != config.dataset:
            raise OverwriteRefusedError(
                f"{ws.dataset_dir} holds a dataset from a different spec; pass --overwrite to replace it"
            )
        logger.info("Reusing the existing dataset")

    if overwrite or any(not ws.has_checkpoint(n) for n in model_names(config)):
        cmd_train(config)
    else:
        logger.info("Reusing the existing checkpoints")

    attack_summary = cmd_attack(config, workers=workers, resume=resume)
    return attack_summary, cmd_report(config)
