"""
Per-iteration cost sweeps over T, D, K, N and M with untrained models, and
log-log slope fits of the timings.
"""
import logging
import statistics
import timeit
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from app.core.flows.model import FlowModel, build_glow_conditional, build_realnvp, freeze
from app.core.models.decomposition_models import DecompositionConfig, MethodKind, NMFTemplates
from app.core.models.flow_models import ActivationKind, FlowArchitecture
from app.core.models.run_models import BenchConfig, BenchReport, BenchRow, BenchSlope
from app.core.services.decomposition_service import DecompositionSolver

logger = logging.getLogger(__name__)

SWEEPS: Dict[MethodKind, List[str]] = {
    MethodKind.NMF: ["T", "D", "M"],
    MethodKind.DDS1: ["T", "D", "K"],
    MethodKind.DDS2: ["T", "D", "K", "N"],
    MethodKind.DDS3: ["T", "D", "K", "N"],
}
COMPONENTS = ("dictionary_ms", "reconstruction_ms", "iteration_ms")


def time_call(fn: Callable[[], object], repetitions: int, warmup: int) -> float:
    """Median wall time of ``fn`` in milliseconds after ``warmup`` untimed calls"""
    for _ in range(warmup):
        fn()
    timings = timeit.Timer(fn).repeat(repeat=repetitions, number=1)
    return statistics.median(timings) * 1000.0


def fit_slope(values: List[float], timings: List[float]) -> float:
    slope, _ = np.polyfit(np.log(values), np.log(timings), 1)
    return float(slope)


class Scenario:
    """Untrained models, a random spectrogram and a synthetic dictionary for one sweep point"""

    def __init__(self, method: MethodKind, dims: Dict[str, int], cfg: BenchConfig, seed: int):
        self.method = method
        self.t, self.d, self.k, self.n, self.m = (dims[p] for p in ("T", "D", "K", "N", "M"))
        generator = torch.Generator().manual_seed(seed)
        self.spec = torch.rand(self.d, self.t, generator=generator)
        arch = FlowArchitecture(
            steps=cfg.flow_steps, hidden=self.d, dense_layers=cfg.dense_layers, activation=ActivationKind.SELU
        )
        if method == MethodKind.NMF:
            frames = torch.rand(self.m, self.d, generator=generator)
            self.models = NMFTemplates(frames=frames, labels=torch.arange(self.m) % self.k, k=self.k)
        elif method == MethodKind.DDS3:
            self.models = build_glow_conditional(self.d, self.k, arch, seed=seed)
            freeze([self.models])
        else:
            self.models = [build_realnvp(self.d, arch, seed=seed + i) for i in range(self.k)]
            freeze(self.models)

        columns = {MethodKind.NMF: self.m, MethodKind.DDS1: self.k}.get(method, self.k * self.n)
        if method == MethodKind.DDS1:
            self.w = torch.rand(self.k, self.t, self.d, generator=generator)
        else:
            self.w = torch.rand(self.d, columns, generator=generator)
        self.h = torch.rand(columns, self.t, generator=generator)
        self.solver = DecompositionSolver(
            self.spec,
            method,
            self.models,
            DecompositionConfig(max_steps=1, n_components=self.n, seed=seed),
        )

    def generate_dictionary(self) -> None:
        """Flow inference of every dictionary entry"""
        dictionary = self.solver.dictionary
        with torch.no_grad():
            if self.method == MethodKind.DDS1:
                for model, codes in zip(self.models, dictionary.z):
                    model.inverse_with_logdet(codes)
            elif self.method == MethodKind.DDS2:
                n = dictionary.n_components
                for i, model in enumerate(self.models):
                    model.inverse_with_logdet(dictionary.z[i * n: (i + 1) * n])
            else:
                self.models.inverse_with_logdet(torch.cat([dictionary.semantic, dictionary.z], dim=1))

    def reconstruct(self) -> torch.Tensor:
        """S_hat from a fixed dictionary"""
        with torch.no_grad():
            if self.method == MethodKind.DDS1:
                return torch.einsum("ktd,kt->dt", torch.relu(self.w), self.h)
            return torch.relu(self.w) @ self.h

    def iteration(self) -> None:
        self.solver.step()

    def memory_bytes(self) -> int:
        """Working set estimate: S, S_hat, dictionary, H, latent codes and flow parameters"""
        itemsize = self.spec.element_size()
        dictionary = self.w.numel()
        latents = 0 if self.method == MethodKind.NMF else self.solver.dictionary.z.numel()
        params = 0
        if self.method != MethodKind.NMF:
            flows = [self.models] if isinstance(self.models, FlowModel) else self.models
            params = sum(p.numel() for model in flows for p in model.parameters())
        return itemsize * (2 * self.d * self.t + dictionary + self.h.numel() + latents + params)


class BenchmarkService:
    def __init__(self, cfg: BenchConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed

    def _values(self, parameter: str) -> List[int]:
        return {
            "T": self.cfg.t_values,
            "D": self.cfg.d_values,
            "K": self.cfg.k_values,
            "N": self.cfg.n_values,
            "M": self.cfg.m_values,
        }[parameter]

    def _base(self) -> Dict[str, int]:
        cfg = self.cfg
        return {"T": cfg.base_t, "D": cfg.base_d, "K": cfg.base_k, "N": cfg.base_n, "M": cfg.base_m}

    def measure(self, method: MethodKind, parameter: str, value: int) -> BenchRow:
        dims = self._base()
        dims[parameter] = value
        scenario = Scenario(method, dims, self.cfg, self.seed)
        reps, warmup = self.cfg.repetitions, self.cfg.warmup
        dictionary_ms: Optional[float] = None
        if method.uses_flows:
            dictionary_ms = time_call(scenario.generate_dictionary, reps, warmup)
        return BenchRow(
            method=method.value,
            parameter=parameter,
            value=value,
            dictionary_ms=dictionary_ms,
            reconstruction_ms=time_call(scenario.reconstruct, reps, warmup),
            iteration_ms=time_call(scenario.iteration, reps, warmup),
            memory_bytes=scenario.memory_bytes(),
        )

    def run(self) -> BenchReport:
        report = BenchReport()
        for method in self.cfg.methods:
            for parameter in SWEEPS[method]:
                values = self._values(parameter)
                rows = [self.measure(method, parameter, value) for value in values]
                report.rows.extend(rows)
                for component in COMPONENTS:
                    timings = [getattr(row, component) for row in rows]
                    if any(t is None or t <= 0 for t in timings):
                        continue
                    slope = fit_slope([float(v) for v in values], timings)
                    report.slopes.append(
                        BenchSlope(
                            method=method.value, parameter=parameter, component=component,
                            slope=slope, points=len(values),
                        )
                    )
                logger.info(
                    f"[{method.value}] {parameter} sweep: "
                    + ", ".join(f"{r.value}->{r.iteration_ms:.2f}ms" for r in rows)
                )
        return report
