"""
Run artifacts: ``<root>/<method>/<snippet>/`` with h_source.ddsm, s_hat.ddsm,
objective_trace.csv and result.json, plus evaluation and benchmark reports at the root.
"""
import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.models.decomposition_models import DecompositionResult
from app.core.models.metric_models import MethodSummary, MetricReport, MetricRow, SweepRow
from app.core.models.run_models import BenchReport, BenchRow, BenchSlope
from app.core.repositories.matrix_repository import MatrixRepository
from app.shared.errors import StorageError

logger = logging.getLogger(__name__)

RESULT_FILE = "result.json"
TRACE_FIELDS = ["step", "objective", "recon", "mle", "lr"]


def _write_csv(path: Path, fieldnames: Sequence[str], rows: Iterable[Dict[str, Any]]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as handle:
            writer = csv.DictWriter(handle, fieldnames=list(fieldnames))
            writer.writeheader()
            for row in rows:
                writer.writerow(row)
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


def _write_json(path: Path, document: Dict[str, Any]) -> Path:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(document, indent=2, sort_keys=True), encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot write {path}: {e}") from e
    return path


class ResultsRepository:
    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.matrices = MatrixRepository(self.root)

    def run_dir(self, method: str, snippet: str) -> Path:
        return self.root / method / snippet

    def save_result(
        self,
        method: str,
        snippet: str,
        result: DecompositionResult,
        config_echo: Optional[Dict[str, Any]] = None,
    ) -> Path:
        run_dir = self.run_dir(method, snippet)
        self.matrices.write(f"{method}/{snippet}/h_source.ddsm", result.h_source.detach().cpu().numpy())
        self.matrices.write(f"{method}/{snippet}/s_hat.ddsm", result.s_hat.detach().cpu().numpy())
        _write_csv(
            run_dir / "objective_trace.csv",
            TRACE_FIELDS,
            (record.model_dump() for record in result.objective_trace),
        )
        final = result.objective_trace[-1].objective if result.objective_trace else None
        _write_json(
            run_dir / RESULT_FILE,
            {
                "method": method,
                "snippet": snippet,
                "steps_run": result.steps_run,
                "wall_ms": result.wall_ms,
                "step_reductions": result.step_reductions,
                "early_stopped": result.early_stopped,
                "final_objective": final,
                "config": config_echo or {},
            },
        )
        return run_dir

    def list_runs(self) -> List[Tuple[str, str]]:
        """(method, snippet) pairs of every stored run, sorted"""
        if not self.root.is_dir():
            return []
        return sorted(
            (path.parent.parent.name, path.parent.name)
            for path in self.root.glob(f"*/*/{RESULT_FILE}")
        )

    def load_result(self, method: str, snippet: str) -> Dict[str, Any]:
        path = self.run_dir(method, snippet) / RESULT_FILE
        try:
            return json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise StorageError(f"cannot read {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise StorageError(f"invalid result file {path}: {e}") from e

    def load_h_source(self, method: str, snippet: str) -> np.ndarray:
        return self.matrices.read(f"{method}/{snippet}/h_source.ddsm")

    def load_s_hat(self, method: str, snippet: str) -> Optional[np.ndarray]:
        relative = f"{method}/{snippet}/s_hat.ddsm"
        return self.matrices.read(relative) if self.matrices.exists(relative) else None

    def update_metrics(self, method: str, snippet: str, report: MetricReport) -> None:
        document = self.load_result(method, snippet)
        document["metrics"] = report.model_dump()
        _write_json(self.run_dir(method, snippet) / RESULT_FILE, document)

    def write_metrics(self, rows: Sequence[MetricRow]) -> Path:
        return _write_csv(
            self.root / "metrics.csv", list(MetricRow.model_fields), (row.model_dump() for row in rows)
        )

    def write_summary(self, summaries: Sequence[MethodSummary]) -> Path:
        return _write_csv(
            self.root / "summary.csv",
            list(MethodSummary.model_fields),
            (summary.model_dump() for summary in summaries),
        )

    def write_sweep_summary(self, rows: Sequence[SweepRow]) -> Path:
        path = _write_csv(
            self.root / "sweep_summary.csv", list(SweepRow.model_fields), (r.model_dump() for r in rows)
        )
        logger.info(f"Wrote {len(rows)} sweep rows to {path}")
        return path

    def write_bench_report(self, report: BenchReport) -> Path:
        _write_csv(self.root / "bench_rows.csv", list(BenchRow.model_fields), (r.model_dump() for r in report.rows))
        _write_csv(
            self.root / "bench_slopes.csv", list(BenchSlope.model_fields), (s.model_dump() for s in report.slopes)
        )
        path = _write_json(self.root / "bench_report.json", report.model_dump(mode="json"))
        logger.info(f"Wrote benchmark report to {path}")
        return path
