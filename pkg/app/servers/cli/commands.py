"""
Command implementations behind ``dds synth|train|decompose|evaluate|bench|sweep``
"""
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import torch

from app.core.flows.model import freeze
from app.core.models.decomposition_models import MethodKind, NMFTemplates
from app.core.models.metric_models import MethodSummary, MetricRow, SweepRow
from app.core.models.run_models import BenchReport, DatasetConfig, DatasetManifest, RunConfig
from app.core.repositories.checkpoint_repository import CheckpointRepository
from app.core.repositories.dataset_repository import DatasetRepository
from app.core.repositories.results_repository import ResultsRepository
from app.core.services.benchmark_service import BenchmarkService
from app.core.services.dataset_service import DatasetService
from app.core.services.decomposition_service import ModelSet, check_models, decompose
from app.core.services.metrics_service import evaluate, summarize
from app.core.services.training_service import run_conditional_training, run_source_training
from app.shared.config import Settings, get_settings
from app.shared.errors import (
    ConfigError,
    IncompatibleCheckpointError,
    InvalidInputError,
    TrainingDivergedError,
)
from app.shared.logging_config import configure_logging

logger = logging.getLogger(__name__)

CONDITIONAL_CHECKPOINT = "conditional"
DTYPES = {"float32": torch.float32, "float64": torch.float64}
COMPONENT_METHODS = (MethodKind.DDS2, MethodKind.DDS3)


def source_checkpoint(source_id: int) -> str:
    return f"source_{source_id:02d}"


def get_dtype() -> torch.dtype:
    name = get_settings().dtype
    if name not in DTYPES:
        raise ConfigError(f"unsupported dtype {name!r}; use one of {sorted(DTYPES)}")
    return DTYPES[name]


def configure_runtime(settings: Settings) -> None:
    """Logging and torch threading/determinism; run in the parent and in every pool worker"""
    configure_logging(settings)
    torch.set_num_threads(settings.num_threads)
    torch.use_deterministic_algorithms(settings.deterministic)


def _run_jobs(fn: Callable, jobs: int, payloads: Sequence[tuple]) -> List:
    """Run ``fn(*payload)`` sequentially or in a process pool; results keep payload order"""
    if jobs <= 1 or len(payloads) <= 1:
        return [fn(*payload) for payload in payloads]
    with ProcessPoolExecutor(
        max_workers=jobs, initializer=configure_runtime, initargs=(get_settings(),)
    ) as pool:
        futures = [pool.submit(fn, *payload) for payload in payloads]
        return [future.result() for future in futures]


def cmd_synth(config: RunConfig, out: Path) -> DatasetManifest:
    return DatasetService(DatasetRepository(out)).build(config)


def _train_source_job(config: RunConfig, dataset: Path, out: Path, source_id: int) -> Path:
    repo = DatasetRepository(dataset)
    manifest = repo.load_manifest()
    frames, _ = repo.load_frames(manifest, ("train",), source_id=source_id)
    validation, _ = repo.load_frames(manifest, ("validation",), source_id=source_id)
    if len(frames) == 0 or len(validation) == 0:
        raise InvalidInputError(f"source {source_id} has no train or validation frames")
    dtype = get_dtype()
    checkpoints = CheckpointRepository(out)
    name = source_checkpoint(source_id)
    logger.info(f"Training source {source_id} on {len(frames)} frames")
    try:
        run = run_source_training(
            torch.from_numpy(frames).to(dtype), config.train, validation=torch.from_numpy(validation).to(dtype)
        )
    except TrainingDivergedError as e:
        checkpoints.write_epoch_log(name, e.history)
        raise
    checkpoints.write_epoch_log(name, run.history)
    return checkpoints.save(name, run.model)


def cmd_train(config: RunConfig, dataset: Path, out: Path) -> List[Path]:
    """Per-source checkpoints for dds1/dds2, one conditional checkpoint for dds3"""
    repo = DatasetRepository(dataset)
    manifest = repo.load_manifest()
    method = config.method
    if method == MethodKind.NMF:
        logger.info("nmf stores training frames directly; nothing to train")
        return []

    if method in (MethodKind.DDS1, MethodKind.DDS2):
        payloads = [(config, dataset, out, source_id) for source_id in range(manifest.k)]
        return _run_jobs(_train_source_job, config.jobs, payloads)

    dtype = get_dtype()
    frames, labels = repo.load_frames(manifest, ("train",))
    validation, validation_labels = repo.load_frames(manifest, ("validation",))
    checkpoints = CheckpointRepository(out)
    try:
        run = run_conditional_training(
            torch.from_numpy(frames).to(dtype),
            torch.from_numpy(labels),
            config.train,
            validation=torch.from_numpy(validation).to(dtype),
            validation_labels=torch.from_numpy(validation_labels),
            k=manifest.k,
        )
    except TrainingDivergedError as e:
        checkpoints.write_epoch_log(CONDITIONAL_CHECKPOINT, e.history)
        raise
    checkpoints.write_epoch_log(CONDITIONAL_CHECKPOINT, run.history)
    return [checkpoints.save(CONDITIONAL_CHECKPOINT, run.model)]


def load_models(
    method: MethodKind,
    manifest: DatasetManifest,
    dataset: DatasetRepository,
    checkpoint_dir,
    dtype: torch.dtype,
) -> ModelSet:
    """Stored frames for nmf, trained flows otherwise; validated against the dataset"""
    if method == MethodKind.NMF:
        frames, labels = dataset.load_frames(manifest, ("train", "validation"))
        return NMFTemplates(frames=torch.from_numpy(frames).to(dtype), labels=torch.from_numpy(labels), k=manifest.k)

    if checkpoint_dir is None:
        raise ConfigError(f"{method.value} needs a checkpoint directory (--checkpoints or paths.checkpoints)")
    checkpoints = CheckpointRepository(checkpoint_dir)
    names = (
        [CONDITIONAL_CHECKPOINT]
        if method == MethodKind.DDS3
        else [source_checkpoint(k) for k in range(manifest.k)]
    )
    missing = [name for name in names if not checkpoints.exists(name)]
    if missing:
        raise IncompatibleCheckpointError(f"missing {', '.join(missing)} in {checkpoint_dir}")
    models = [checkpoints.load(name, dtype) for name in names]
    freeze(models)
    k = check_models(method, models, manifest.d)
    if k != manifest.k:
        raise IncompatibleCheckpointError(f"models cover {k} sources, dataset has {manifest.k}")
    return models[0] if method == MethodKind.DDS3 else models


def _decompose_snippet(
    config: RunConfig,
    models: ModelSet,
    dataset: DatasetRepository,
    results: ResultsRepository,
    manifest: DatasetManifest,
    snippet: str,
) -> Path:
    sample = next(s for s in manifest.samples if s.name == snippet)
    spec, _ = dataset.load_snippet(sample)
    logger.info(f"Decomposing {snippet} ({spec.shape[1]} frames) with {config.method.value}")
    result = decompose(spec, config.method, models, config.decomposition)
    echo = {"method": config.method.value, "decomposition": config.decomposition.model_dump(mode="json")}
    return results.save_result(config.method.value, snippet, result, echo)


def _decompose_job(config: RunConfig, dataset_dir, checkpoint_dir, results_dir, snippet: str) -> Path:
    dataset = DatasetRepository(dataset_dir)
    manifest = dataset.load_manifest()
    models = load_models(config.method, manifest, dataset, checkpoint_dir, get_dtype())
    return _decompose_snippet(config, models, dataset, ResultsRepository(results_dir), manifest, snippet)


def cmd_decompose(config: RunConfig, dataset_dir: Path, checkpoint_dir, out: Path) -> List[Path]:
    dataset = DatasetRepository(dataset_dir)
    manifest = dataset.load_manifest()
    samples = dataset.test_samples(manifest)
    if not samples:
        raise InvalidInputError("nothing to decompose: the dataset has no test mixtures")

    if config.jobs > 1:
        payloads = [(config, dataset_dir, checkpoint_dir, out, s.name) for s in samples]
        return _run_jobs(_decompose_job, config.jobs, payloads)

    models = load_models(config.method, manifest, dataset, checkpoint_dir, get_dtype())
    results = ResultsRepository(out)
    return [_decompose_snippet(config, models, dataset, results, manifest, s.name) for s in samples]


def cmd_evaluate(
    config: RunConfig,
    results_dir: Path,
    dataset_dir: Path,
) -> Tuple[List[MetricRow], List[MethodSummary]]:
    """Metrics for every stored run, written to metrics.csv and summary.csv"""
    epsilon = config.evaluation.epsilon
    results = ResultsRepository(results_dir)
    dataset = DatasetRepository(dataset_dir)
    manifest = dataset.load_manifest()
    by_name = {s.name: s for s in manifest.samples}
    runs = results.list_runs()
    if not runs:
        raise InvalidInputError(f"no results to evaluate in {results_dir}")

    rows: List[MetricRow] = []
    for method, snippet in runs:
        sample = by_name.get(snippet)
        if sample is None:
            logger.warning(f"Skipping {method}/{snippet}: not in the dataset manifest")
            continue
        spec, roll = dataset.load_snippet(sample)
        if roll is None:
            logger.warning(f"Skipping {method}/{snippet}: missing ground truth")
            continue
        h_source = results.load_h_source(method, snippet)
        try:
            report = evaluate(h_source, roll, epsilon, spec=spec, s_hat=results.load_s_hat(method, snippet))
        except InvalidInputError as e:
            logger.warning(f"Skipping {method}/{snippet}: {e}")
            continue
        results.update_metrics(method, snippet, report)
        rows.append(MetricRow(method=method, snippet=snippet, **report.model_dump()))

    summaries = summarize(rows)
    results.write_metrics(rows)
    results.write_summary(summaries)
    for summary in summaries:
        logger.info(
            f"#{summary.psa_rank} {summary.method}: PSA {summary.psa_mean:.4f}, "
            f"L0eps {summary.l0_eps_mean:.4f} over {summary.runs} runs"
        )
    return rows, summaries


def cmd_bench(config: RunConfig, out: Path) -> BenchReport:
    report = BenchmarkService(config.bench, seed=config.seed or 0).run()
    ResultsRepository(out).write_bench_report(report)
    return report

def _point_config(config: RunConfig, window: int, polyphony: int, low: float, high: float) -> RunConfig:
    ds = config.dataset
    if polyphony > config.synth.k:
        raise ConfigError(f"sweep polyphony {polyphony} exceeds the {config.synth.k} sources")
    hop = max(1, window * ds.hop // ds.window)
    dataset = DatasetConfig.model_validate(
        {**ds.model_dump(), "window": window, "hop": hop, "polyphony": polyphony,
         "intensity_min": low, "intensity_max": high}
    )
    return config.model_copy(update={"dataset": dataset})


def cmd_sweep(config: RunConfig, out: Path) -> List[SweepRow]:
    """
    synth, train, decompose and evaluate at every sweep point; one sweep_summary.csv row
    per (point, method, N). Methods without per-source components run once per point.
    """
    sweep = config.sweep
    grid = [
        (window, polyphony, low, high)
        for window in sweep.window_values or [config.dataset.window]
        for polyphony in sweep.polyphony_values
        for low, high in sweep.intensity_ranges
    ]
    points = [_point_config(config, *coords) for coords in grid]

    rows: List[SweepRow] = []
    for (window, polyphony, low, high), point in zip(grid, points):
        root = out / f"w{window}_p{polyphony}_i{low:g}-{high:g}"
        dataset = root / "data"
        logger.info(f"Sweep point {root.name}")
        cmd_synth(point, dataset)

        runs: Dict[Path, Optional[int]] = {}
        for method in sweep.methods:
            method_config = point.model_copy(update={"method": method})
            checkpoints = root / "checkpoints" / method.value
            cmd_train(method_config, dataset, checkpoints)
            n_values = sweep.n_values if method in COMPONENT_METHODS else [None]
            for n in n_values:
                run_config = method_config
                if n is not None:
                    decomposition = method_config.decomposition.model_copy(update={"n_components": n})
                    run_config = method_config.model_copy(update={"decomposition": decomposition})
                results = root / (f"results_n{n}" if n is not None else "results")
                cmd_decompose(run_config, dataset, checkpoints, results)
                runs[results] = n

        for results, n in runs.items():
            _, summaries = cmd_evaluate(point, results, dataset)
            rows.extend(
                SweepRow(
                    window=window,
                    polyphony=polyphony,
                    intensity_min=low,
                    intensity_max=high,
                    n_components=n,
                    method=s.method,
                    runs=s.runs,
                    psa_mean=s.psa_mean,
                    l0_eps_mean=s.l0_eps_mean,
                    recon_error_mean=s.recon_error_mean,
                )
                for s in summaries
            )
    ResultsRepository(out).write_sweep_summary(rows)
    return rows
