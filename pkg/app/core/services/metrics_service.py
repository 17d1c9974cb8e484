"""
Frame-level attribution metrics
"""
from collections import defaultdict
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.models.metric_models import MethodSummary, MetricReport, MetricRow
from app.core.models.signal_models import PianoRoll
from app.shared.errors import InvalidInputError

DEFAULT_EPSILON = 0.05
BASELINE_METHOD = "nmf"


def _as_array(values) -> np.ndarray:
    if hasattr(values, "detach"):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def psa(h_source, roll) -> float:
    """Share of total activation mass placed on sources that are truly active"""
    h = _as_array(h_source)
    y = _as_array(roll.active if isinstance(roll, PianoRoll) else roll)
    if h.shape != y.shape:
        raise InvalidInputError(f"activation shape {h.shape} != piano roll shape {y.shape}")
    total = h.sum()
    if total <= 0:
        raise InvalidInputError("empty activation matrix")
    return float((h * y).sum() / total)


def l0_eps_sparsity(h, epsilon: float = DEFAULT_EPSILON) -> float:
    """Fraction of entries with magnitude <= epsilon"""
    if epsilon < 0:
        raise InvalidInputError(f"epsilon must be >= 0, got {epsilon}")
    values = _as_array(h)
    if values.size == 0:
        raise InvalidInputError("empty input")
    return float(np.mean(np.abs(values) <= epsilon))


def reconstruction_error(spec, s_hat) -> float:
    a, b = _as_array(spec), _as_array(s_hat)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def evaluate(h_source, roll, epsilon: float = DEFAULT_EPSILON, spec=None, s_hat=None) -> MetricReport:
    recon = reconstruction_error(spec, s_hat) if spec is not None and s_hat is not None else None
    return MetricReport(
        psa=psa(h_source, roll),
        l0_eps=l0_eps_sparsity(h_source, epsilon),
        recon_error=recon,
        epsilon=epsilon,
    )


def summarize(rows: Sequence[MetricRow]) -> List[MethodSummary]:
    """Per-method means ranked by PSA (1 = best) with the relative PSA gain over nmf"""
    grouped: Dict[str, List[MetricRow]] = defaultdict(list)
    for row in rows:
        grouped[row.method].append(row)

    means = {}
    for method, group in grouped.items():
        recon = [r.recon_error for r in group if r.recon_error is not None]
        means[method] = (
            float(np.mean([r.psa for r in group])),
            float(np.mean([r.l0_eps for r in group])),
            float(np.mean(recon)) if recon else None,
            len(group),
        )

    baseline: Optional[float] = means[BASELINE_METHOD][0] if BASELINE_METHOD in means else None
    ranked = sorted(means, key=lambda m: (-means[m][0], m))
    summaries = []
    for rank, method in enumerate(ranked, start=1):
        psa_mean, l0_mean, recon_mean, runs = means[method]
        gain = (psa_mean - baseline) / baseline if baseline else None
        summaries.append(
            MethodSummary(
                method=method,
                runs=runs,
                psa_mean=psa_mean,
                l0_eps_mean=l0_mean,
                recon_error_mean=recon_mean,
                psa_rank=rank,
                psa_gain_vs_nmf=gain,
            )
        )
    return summaries
