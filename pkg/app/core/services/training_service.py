"""
Adam, the flow training loops with validation-based model selection, and a
finite-difference gradient checker.
"""
import copy
import logging
import math
import time
from typing import Callable, List, Optional, Sequence, Tuple

import torch

from app.core.flows.model import FlowModel, build_glow_conditional, build_realnvp
from app.core.models.flow_models import FlowKind
from app.core.models.training_models import AdamState, DatasetSplit, EpochRecord, TrainConfig, TrainingRun
from app.shared.errors import InvalidInputError, NumericalError, TrainingDivergedError

logger = logging.getLogger(__name__)

LossFn = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@torch.no_grad()
def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor],
    state: AdamState,
    lr: float,
) -> Tuple[List[torch.Tensor], AdamState]:
    """One bias-corrected Adam update; returns new tensors and a new state"""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise InvalidInputError("params, grads and optimizer state must have equal length")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise InvalidInputError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NumericalError("invalid gradient: non-finite values")

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_params.append(p - lr * m_hat / (torch.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, state.model_copy(update={"m": new_m, "v": new_v, "step": step})


def split_dataset(
    frames: torch.Tensor,
    labels: torch.Tensor,
    validation_fraction: float = 0.2,
    seed: int = 0,
) -> DatasetSplit:
    """Seeded random split; at least one item lands on each side"""
    n = len(frames)
    if n < 2:
        raise InvalidInputError(f"at least 2 frames required, got {n}")
    generator = torch.Generator().manual_seed(seed)
    order = torch.randperm(n, generator=generator)
    n_val = min(n - 1, max(1, int(round(n * validation_fraction))))
    val_idx, train_idx = order[:n_val], order[n_val:]
    return DatasetSplit(
        train=frames[train_idx],
        train_labels=labels[train_idx],
        validation=frames[val_idx],
        validation_labels=labels[val_idx],
    )


def _trainable(model: FlowModel) -> List[torch.nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def _fit(
    model: FlowModel,
    loss_fn: LossFn,
    split: DatasetSplit,
    cfg: TrainConfig,
    semantic_fn: Optional[LossFn] = None,
) -> TrainingRun:
    """Mini-batch Adam with per-epoch validation; keeps the best validation state"""
    lr = cfg.effective_lr(model.kind)
    params = _trainable(model)
    state = AdamState.zeros_like([p.detach() for p in params])
    generator = torch.Generator().manual_seed(cfg.seed)
    n_train = len(split.train)
    batch_size = min(cfg.batch_size, n_train)
    history: List[EpochRecord] = []

    def validate() -> float:
        with torch.no_grad():
            return float(loss_fn(split.validation, split.validation_labels).mean())

    try:
        best_val = validate()
    except NumericalError as e:
        raise TrainingDivergedError(None) from e
    best_state = copy.deepcopy(model.state_dict())
    best_epoch = 0
    since_best = 0

    for epoch in range(1, cfg.epochs + 1):
        started = time.perf_counter()
        order = torch.randperm(n_train, generator=generator)
        losses = []
        try:
            for start in range(0, n_train - batch_size + 1, batch_size):
                idx = order[start: start + batch_size]
                loss = loss_fn(split.train[idx], split.train_labels[idx]).mean()
                if not torch.isfinite(loss):
                    raise NumericalError("non-finite training loss")
                grads = torch.autograd.grad(loss, params)
                updated, state = adam_step([p.detach() for p in params], grads, state, lr)
                with torch.no_grad():
                    for p, new in zip(params, updated):
                        p.copy_(new)
                losses.append(float(loss.detach()))
            val_loss = validate()
            if not math.isfinite(val_loss):
                raise NumericalError("non-finite validation loss")
        except NumericalError as e:
            last = history[-1].epoch if history else None
            logger.error(f"Training diverged at epoch {epoch}: {e}")
            raise TrainingDivergedError(last, history) from e

        semantic = None
        if semantic_fn is not None:
            with torch.no_grad():
                semantic = float(semantic_fn(split.validation, split.validation_labels).mean())
        record = EpochRecord(
            epoch=epoch,
            train_loss=sum(losses) / len(losses),
            val_loss=val_loss,
            lr=lr,
            wall_ms=(time.perf_counter() - started) * 1000.0,
            val_semantic_mse=semantic,
        )
        history.append(record)
        if epoch % cfg.log_every == 0 or epoch == cfg.epochs:
            logger.info(
                f"[{model.kind.value}] epoch {epoch}: train {record.train_loss:.4f} val {val_loss:.4f}"
            )

        if val_loss < best_val:
            best_val, best_epoch, since_best = val_loss, epoch, 0
            best_state = copy.deepcopy(model.state_dict())
        else:
            since_best += 1
            if since_best >= cfg.patience:
                logger.info(f"Early stop at epoch {epoch}; no improvement for {cfg.patience} epochs")
                break

    model.load_state_dict(best_state)
    logger.info(f"Selected epoch {best_epoch} with validation loss {best_val:.4f}")
    return TrainingRun(model=model, history=history, best_epoch=best_epoch, best_val_loss=best_val)


def _as_tensor(values, dtype: Optional[torch.dtype] = None) -> torch.Tensor:
    tensor = torch.as_tensor(values)
    if dtype is not None:
        return tensor.to(dtype)
    return tensor if tensor.is_floating_point() else tensor.to(torch.get_default_dtype())


def _prepare_split(frames, labels, cfg: TrainConfig, validation, validation_labels) -> DatasetSplit:
    frames = _as_tensor(frames)
    labels = torch.as_tensor(labels, dtype=torch.long)
    if frames.dim() != 2:
        raise InvalidInputError("frames must be an (items x d) matrix")
    if validation is None:
        return split_dataset(frames, labels, cfg.validation_fraction, cfg.seed)
    validation = _as_tensor(validation, frames.dtype)
    if validation_labels is None:
        validation_labels = torch.zeros(len(validation), dtype=torch.long)
    if len(frames) < 1 or len(validation) < 1:
        raise InvalidInputError("at least 2 frames required: one for training and one for validation")
    return DatasetSplit(
        train=frames,
        train_labels=labels,
        validation=validation,
        validation_labels=torch.as_tensor(validation_labels, dtype=torch.long),
    )


def run_source_training(
    frames,
    cfg: TrainConfig,
    validation=None,
) -> TrainingRun:
    """Train one single-source model; ``validation`` defaults to a seeded 80/20 split"""
    frames = _as_tensor(frames)
    split = _prepare_split(frames, torch.zeros(len(frames), dtype=torch.long), cfg, validation, None)
    model = build_realnvp(split.train.shape[1], cfg.realnvp, seed=cfg.seed, dtype=split.train.dtype)
    logger.info(f"Training single-source model on {len(split.train)} frames ({len(split.validation)} validation)")
    return _fit(model, lambda x, _: model.nll(x), split, cfg)


def train_source_model(frames, cfg: TrainConfig, validation=None) -> FlowModel:
    return run_source_training(frames, cfg, validation).model


def run_conditional_training(
    frames,
    labels,
    cfg: TrainConfig,
    validation=None,
    validation_labels=None,
    k: Optional[int] = None,
) -> TrainingRun:
    """
    Train the conditional model with the semantic MSE plus nuisance likelihood.

    ActNorm layers are initialised from the first shuffled training batch.
    """
    split = _prepare_split(frames, labels, cfg, validation, validation_labels)
    distinct = torch.unique(split.train_labels)
    if len(distinct) < 2:
        raise InvalidInputError("conditional training needs labels from at least 2 distinct sources")
    k_semantic = k if k is not None else int(split.train_labels.max()) + 1
    d = split.train.shape[1]
    model = build_glow_conditional(d, k_semantic, cfg.glow, seed=cfg.seed, dtype=split.train.dtype)

    batch_size = min(cfg.batch_size, len(split.train))
    first = torch.randperm(len(split.train), generator=torch.Generator().manual_seed(cfg.seed))[:batch_size]
    model.init_actnorm(split.train[first])
    logger.info(
        f"Training conditional model (K={k_semantic}, d={d}) on {len(split.train)} frames "
        f"({len(split.validation)} validation)"
    )

    def loss_fn(x, y):
        return model.conditional_loss(x, y, cfg.conditional_weight)[0]

    def semantic_fn(x, y):
        return model.conditional_loss(x, y, cfg.conditional_weight)[1][0]

    return _fit(model, loss_fn, split, cfg, semantic_fn=semantic_fn)


def train_conditional_model(frames, labels, cfg: TrainConfig, validation=None, validation_labels=None, k=None) -> FlowModel:
    return run_conditional_training(frames, labels, cfg, validation, validation_labels, k).model


def grad_check(
    loss_fn: Callable[[List[torch.Tensor]], torch.Tensor],
    params: Sequence[torch.Tensor],
    tolerance: float = 1e-4,
    n_coords: int = 100,
    step: float = 1e-5,
    floor: float = 1e-4,
    seed: int = 0,
) -> float:
    """
    Worst relative error between autograd and central differences.

    Runs in float64 over a seeded subsample of at least ``n_coords`` coordinates
    (all of them when there are fewer). Error = |analytic - numeric| / max(|numeric|, floor).
    """
    base = [p.detach().to(torch.float64).clone() for p in params]
    leaves = [p.clone().requires_grad_(True) for p in base]
    analytic = torch.autograd.grad(loss_fn(leaves), leaves, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(base, analytic)]

    sizes = [p.numel() for p in base]
    total = sum(sizes)
    generator = torch.Generator().manual_seed(seed)
    chosen = torch.randperm(total, generator=generator)[: max(n_coords, 100)].tolist()
    offsets = [sum(sizes[:i]) for i in range(len(sizes))]

    worst = 0.0
    with torch.no_grad():
        for flat in sorted(chosen):
            which = max(i for i, offset in enumerate(offsets) if offset <= flat)
            index = flat - offsets[which]
            values = []
            for sign in (1.0, -1.0):
                shifted = [p.clone() for p in base]
                shifted[which].view(-1)[index] += sign * step
                values.append(float(loss_fn(shifted)))
            numeric = (values[0] - values[1]) / (2.0 * step)
            exact = float(analytic[which].reshape(-1)[index])
            worst = max(worst, abs(exact - numeric) / max(abs(numeric), floor))
    if worst > tolerance:
        logger.warning(f"Gradient check exceeded tolerance: {worst:.3e} > {tolerance:.1e}")
    return worst
