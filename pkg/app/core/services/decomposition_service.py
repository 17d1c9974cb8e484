"""
NMF baseline and the three dictionary-search solvers.

All four share one loop: per step, a gradient update of the dictionary latent
codes (skipped for nmf), then a gradient update of the activations, each
projected so H stays nonnegative.
"""
import logging
import math
import time
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from torch import nn

from app.core.flows.model import FlowModel
from app.core.models.decomposition_models import (
    ActivationState,
    DecompositionConfig,
    DecompositionResult,
    DictionaryState,
    MethodKind,
    NMFTemplates,
    OptimizerKind,
    TraceRecord,
)
from app.core.models.flow_models import FlowKind
from app.core.models.signal_models import Spectrogram
from app.core.models.training_models import AdamState
from app.core.services.training_service import adam_step
from app.shared.errors import (
    DecompositionDivergedError,
    IncompatibleCheckpointError,
    InvalidInputError,
    NumericalError,
)

logger = logging.getLogger(__name__)

ModelSet = Union[NMFTemplates, FlowModel, Sequence[FlowModel]]


class ObjectiveTerms(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    mle: torch.Tensor
    uniform_weights: bool


def as_spec_tensor(spec, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    values = spec.values if isinstance(spec, Spectrogram) else spec
    tensor = torch.as_tensor(np.asarray(values) if not torch.is_tensor(values) else values)
    if tensor.dim() != 2 or tensor.shape[1] < 1:
        raise InvalidInputError("spectrogram must be a non-empty D x T matrix")
    return tensor.to(dtype)


def init_nmf(training_frames, labels, t: int, k: Optional[int] = None) -> Tuple[DictionaryState, ActivationState]:
    """W columns are the stored frames; H = 1/M everywhere"""
    frames = torch.as_tensor(training_frames)
    if frames.dim() != 2 or frames.shape[0] == 0:
        raise InvalidInputError("empty dictionary: no training frames")
    source_map = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    if len(source_map) != frames.shape[0]:
        raise InvalidInputError(f"{len(source_map)} labels for {frames.shape[0]} frames")
    m = frames.shape[0]
    k = k if k is not None else int(source_map.max()) + 1
    dictionary = DictionaryState(method=MethodKind.NMF, k=k, source_map=source_map, w=frames.T.clone())
    return dictionary, ActivationState(h=torch.full((m, t), 1.0 / m, dtype=frames.dtype))


def init_dds(spec, k: int, n: int, kind: MethodKind, seed: int = 0) -> Tuple[DictionaryState, ActivationState]:
    """
    Zero latent codes and H ~ U(0, 1) * E / sqrt(columns per frame), E the mean spectrogram value.
    """
    kind = MethodKind(kind)
    if not kind.uses_flows:
        raise InvalidInputError(f"init_dds needs a dds method, got {kind.value}")
    values = as_spec_tensor(spec, torch.get_default_dtype() if not torch.is_tensor(spec) else spec.dtype)
    d, t = values.shape
    energy = float(values.mean())
    generator = torch.Generator().manual_seed(seed)

    if kind == MethodKind.DDS1:
        z = torch.zeros(k, t, d, dtype=values.dtype)
        h = torch.rand(k, t, generator=generator, dtype=torch.float64) * (energy / math.sqrt(k))
        dictionary = DictionaryState(method=kind, k=k, n_components=1, source_map=torch.arange(k), z=z)
        return dictionary, ActivationState(h=h.to(values.dtype))

    source_map = torch.arange(k).repeat_interleave(n)
    h = torch.rand(k * n, t, generator=generator, dtype=torch.float64) * (energy / math.sqrt(k * n))
    if kind == MethodKind.DDS2:
        z = torch.zeros(k * n, d, dtype=values.dtype)
        semantic = None
    else:
        if not 0 < k < d:
            raise InvalidInputError(f"conditional dictionaries need 0 < K < D, got K={k}, D={d}")
        z = torch.zeros(k * n, d - k, dtype=values.dtype)
        semantic = nn.functional.one_hot(source_map, k).to(values.dtype)
    dictionary = DictionaryState(
        method=kind, k=k, n_components=n, source_map=source_map, z=z, semantic=semantic
    )
    return dictionary, ActivationState(h=h.to(values.dtype))


def _flows(kind: MethodKind, models) -> List[FlowModel]:
    if isinstance(models, FlowModel):
        return [models]
    return list(models)


def check_models(kind: MethodKind, models, d: int) -> int:
    """Validate trained models against the method and data dimension; returns K"""
    kind = MethodKind(kind)
    flows = _flows(kind, models)
    expected = FlowKind.GLOW_CONDITIONAL if kind == MethodKind.DDS3 else FlowKind.REALNVP_SINGLE_SOURCE
    if not flows:
        raise IncompatibleCheckpointError(f"{kind.value} needs trained models")
    if kind == MethodKind.DDS3 and len(flows) != 1:
        raise IncompatibleCheckpointError(f"dds3 uses one conditional model, got {len(flows)}")
    for model in flows:
        if not isinstance(model, FlowModel) or model.kind != expected:
            raise IncompatibleCheckpointError(f"{kind.value} needs {expected.value} models")
        if model.d != d:
            raise IncompatibleCheckpointError(f"model dimension {model.d} != spectrogram bins {d}")
    return flows[0].k_semantic if kind == MethodKind.DDS3 else len(flows)


def reconstruct(
    kind: MethodKind,
    dictionary: DictionaryState,
    activations: ActivationState,
    models: Optional[ModelSet] = None,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Returns (s_hat, w_view, nlls).

    nmf: w_view is W (D x M), nlls empty. dds1: w_view is K x T x D with one entry
    per source and frame, nlls K x T. dds2/dds3: w_view is D x KN, nlls KN.
    Flow-generated entries are rectified when forming s_hat.
    """
    kind = MethodKind(kind)
    h = activations.h
    if kind == MethodKind.NMF:
        w = dictionary.w
        return w @ h, w, h.new_zeros(0)

    flows = _flows(kind, models)
    z = dictionary.z
    if kind == MethodKind.DDS1:
        generated = [model.entry_nll(codes) for model, codes in zip(flows, z)]
        w_view = torch.stack([entries for entries, _ in generated])
        nlls = torch.stack([nll for _, nll in generated])
        s_hat = torch.einsum("ktd,kt->dt", torch.relu(w_view), h)
        return s_hat, w_view, nlls

    if kind == MethodKind.DDS2:
        n = dictionary.n_components
        generated = [model.entry_nll(z[i * n: (i + 1) * n]) for i, model in enumerate(flows)]
        entries = torch.cat([e for e, _ in generated])
        nlls = torch.cat([nll for _, nll in generated])
    else:
        codes = torch.cat([dictionary.semantic, z], dim=1)
        entries, nlls = flows[0].entry_nll(codes)
    w = entries.T
    return torch.relu(w) @ h, w, nlls


def objective_terms(spec, s_hat, nlls, activations: ActivationState, lambda_mle: float) -> ObjectiveTerms:
    """
    ||S - S_hat||_F + lambda * sum_j rho_j * nll_j.

    rho_j is entry j's share of the total activation mass; for per-frame
    dictionaries (nlls shaped like H) the share is taken per (source, frame).
    """
    spec = as_spec_tensor(spec, s_hat.dtype) if not torch.is_tensor(spec) else spec
    recon = torch.linalg.norm(spec - s_hat)
    uniform = False
    if nlls.numel() == 0:
        mle = recon.new_zeros(())
    else:
        h = activations.h
        mass = h.sum()
        if float(mass) <= 0.0:
            rho = torch.full_like(nlls, 1.0 / nlls.numel())
            uniform = True
        elif nlls.shape == h.shape:
            rho = h / mass
        else:
            rho = h.sum(dim=1) / mass
        mle = (rho * nlls).sum()
    return ObjectiveTerms(recon + lambda_mle * mle, recon, mle, uniform)


def objective(spec, s_hat, nlls, activations: ActivationState, lambda_mle: float) -> torch.Tensor:
    return objective_terms(spec, s_hat, nlls, activations, lambda_mle).total


def postprocess(dictionary: DictionaryState, activations: ActivationState, kind: MethodKind) -> torch.Tensor:
    """Scale H by the norm of each rectified dictionary entry, then sum per source (K x T)"""
    kind = MethodKind(kind)
    w = dictionary.w
    if w is None:
        raise InvalidInputError("dictionary has no generated entries; reconstruct it first")
    h = activations.h.detach()
    w = torch.relu(w.detach())
    if kind == MethodKind.DDS1:
        return h * torch.linalg.norm(w, dim=2)
    scaled = h * torch.linalg.norm(w, dim=0)[:, None]
    out = torch.zeros(dictionary.k, h.shape[1], dtype=h.dtype)
    return out.index_add_(0, dictionary.source_map, scaled)


class DecompositionSolver:
    """State of one decomposition run; ``step`` performs one alternating update"""

    def __init__(self, spec, kind: MethodKind, models: ModelSet, cfg: DecompositionConfig):
        self.kind = MethodKind(kind)
        self.cfg = cfg
        self.models = models
        if self.kind == MethodKind.NMF:
            if not isinstance(models, NMFTemplates):
                raise IncompatibleCheckpointError("nmf needs stored training frames")
            dtype = models.frames.dtype
            self.spec = as_spec_tensor(spec, dtype)
            d, t = self.spec.shape
            if models.frames.shape[1] != d:
                raise IncompatibleCheckpointError(f"template dimension {models.frames.shape[1]} != {d} bins")
            self.dictionary, self.activations = init_nmf(models.frames, models.labels, t, models.k)
        else:
            dtype = _flows(self.kind, models)[0].dtype
            self.spec = as_spec_tensor(spec, dtype)
            k = check_models(self.kind, models, self.spec.shape[0])
            self.dictionary, self.activations = init_dds(self.spec, k, cfg.n_components, self.kind, cfg.seed)

        self.lr = cfg.effective_step_size(self.kind)
        self.h_state = AdamState.zeros_like([self.activations.h])
        self.z_state = AdamState.zeros_like([self.dictionary.z]) if self.kind.uses_flows else None
        self.trace: List[TraceRecord] = []
        self.best = math.inf
        self.since_best = 0
        self.reductions = 0
        self.steps_run = 0
        self.early_stopped = False
        self._warned_uniform = False

    def _evaluate(self, z: Optional[torch.Tensor], h: torch.Tensor) -> ObjectiveTerms:
        dictionary = self.dictionary if z is None else self.dictionary.model_copy(update={"z": z})
        activations = ActivationState(h=h)
        s_hat, _, nlls = reconstruct(self.kind, dictionary, activations, self.models)
        return objective_terms(self.spec, s_hat, nlls, activations, self.cfg.lambda_mle)

    def _diverged(self) -> DecompositionDivergedError:
        return DecompositionDivergedError([record.model_dump() for record in self.trace])

    def _record(self, terms: ObjectiveTerms) -> float:
        value = float(terms.total)
        if not math.isfinite(value):
            logger.error(f"Non-finite objective at step {len(self.trace)}")
            raise self._diverged()
        if terms.uniform_weights and not self._warned_uniform:
            logger.warning("All activations are zero; likelihood weights fall back to uniform")
            self._warned_uniform = True
        self.trace.append(
            TraceRecord(
                step=len(self.trace), objective=value, recon=float(terms.recon), mle=float(terms.mle), lr=self.lr
            )
        )
        return value

    def _update(self, value: torch.Tensor, grad: torch.Tensor, state: AdamState) -> Tuple[torch.Tensor, AdamState]:
        if self.cfg.optimizer == OptimizerKind.SGD:
            if not torch.isfinite(grad).all():
                raise self._diverged()
            return value - self.lr * grad, state
        try:
            (updated,), state = adam_step([value], [grad], state, self.lr)
        except NumericalError as e:
            raise self._diverged() from e
        return updated, state

    def step(self) -> float:
        """One dictionary update (dds only) then one projected H update; returns the starting objective"""
        h = self.activations.h.detach()
        if self.kind.uses_flows:
            z_leaf = self.dictionary.z.detach().requires_grad_(True)
            terms = self._evaluate(z_leaf, h)
            value = self._record(terms)
            (grad,) = torch.autograd.grad(terms.total, z_leaf)
            self.dictionary.z, self.z_state = self._update(z_leaf.detach(), grad, self.z_state)
            h_leaf = h.clone().requires_grad_(True)
            terms = self._evaluate(self.dictionary.z, h_leaf)
        else:
            h_leaf = h.clone().requires_grad_(True)
            terms = self._evaluate(None, h_leaf)
            value = self._record(terms)
        (grad,) = torch.autograd.grad(terms.total, h_leaf)
        updated, self.h_state = self._update(h, grad, self.h_state)
        self.activations.h = torch.clamp_min(updated, 0.0)
        self.steps_run += 1
        return value

    def _check_plateau(self, value: float) -> bool:
        """False once a plateau arrives with no step-size reductions left"""
        plateau = self.cfg.plateau
        if math.isinf(self.best) or value < self.best - plateau.rel_threshold * abs(self.best):
            self.best = value
            self.since_best = 0
            return True
        self.since_best += 1
        if self.since_best < plateau.window:
            return True
        if self.reductions < plateau.max_reductions:
            self.lr *= plateau.lr_factor
            self.reductions += 1
            self.since_best = 0
            logger.info(f"Plateau at step {self.steps_run}; step size reduced to {self.lr:.3e}")
            return True
        logger.info(f"Early stop at step {self.steps_run} after {self.reductions} step-size reductions")
        self.early_stopped = True
        return False

    def run(self) -> DecompositionResult:
        started = time.perf_counter()
        for _ in range(self.cfg.max_steps):
            if not self._check_plateau(self.step()):
                break

        with torch.no_grad():
            s_hat, w_view, _ = reconstruct(self.kind, self.dictionary, self.activations, self.models)
        if not torch.isfinite(s_hat).all():
            raise self._diverged()
        if self.kind.uses_flows:
            self.dictionary.w = w_view
        h_source = postprocess(self.dictionary, self.activations, self.kind)
        return DecompositionResult(
            method=self.kind,
            h_source=h_source,
            h=self.activations.h,
            w_final=w_view,
            s_hat=s_hat,
            objective_trace=self.trace,
            steps_run=self.steps_run,
            wall_ms=(time.perf_counter() - started) * 1000.0,
            step_reductions=self.reductions,
            early_stopped=self.early_stopped,
        )


def decompose(spec, kind: MethodKind, models: ModelSet, cfg: DecompositionConfig) -> DecompositionResult:
    solver = DecompositionSolver(spec, kind, models, cfg)
    result = solver.run()
    logger.info(
        f"[{solver.kind.value}] {result.steps_run} steps in {result.wall_ms:.0f} ms"
        + (f", final objective {result.objective_trace[-1].objective:.4f}" if result.objective_trace else "")
    )
    return result
