"""
Models for optimizer state, training configuration and training history
"""
from typing import Any, List, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.models.flow_models import (
    FlowArchitecture,
    FlowKind,
    default_glow_architecture,
    default_realnvp_architecture,
)


class AdamState(BaseModel):
    """First/second moment accumulators mirroring a parameter list"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    m: List[torch.Tensor]
    v: List[torch.Tensor]
    step: int = Field(default=0, ge=0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: List[torch.Tensor], **kwargs: Any) -> "AdamState":
        return cls(
            m=[torch.zeros_like(p) for p in params],
            v=[torch.zeros_like(p) for p in params],
            **kwargs,
        )


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=2500, ge=0)
    batch_size: int = Field(default=512, ge=1)
    lr: Optional[float] = Field(
        default=None, gt=0, description="Overrides the per-kind default learning rate"
    )
    lr_source: float = Field(default=1e-3, gt=0)
    lr_conditional: float = Field(default=1e-5, gt=0)
    seed: int = 0
    patience: int = Field(default=100, ge=1, description="Epochs without validation improvement before stopping")
    validation_fraction: float = Field(default=0.2, gt=0, lt=1)
    conditional_weight: Optional[float] = Field(
        default=None, ge=0, description="Weight of the semantic MSE; defaults to K"
    )
    log_every: int = Field(default=50, ge=1)
    realnvp: FlowArchitecture = Field(default_factory=default_realnvp_architecture)
    glow: FlowArchitecture = Field(default_factory=default_glow_architecture)

    def effective_lr(self, kind: FlowKind) -> float:
        if self.lr is not None:
            return self.lr
        if kind == FlowKind.GLOW_CONDITIONAL:
            return self.lr_conditional
        return self.lr_source


class DatasetSplit(BaseModel):
    """Disjoint train/validation frames with their source labels"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    train: torch.Tensor
    train_labels: torch.Tensor
    validation: torch.Tensor
    validation_labels: torch.Tensor

    @model_validator(mode="after")
    def _non_empty(self):
        if len(self.train) == 0 or len(self.validation) == 0:
            raise ValueError("train and validation splits must both be non-empty")
        return self


class EpochRecord(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    wall_ms: float
    val_semantic_mse: Optional[float] = None


class TrainingRun(BaseModel):
    """Selected model plus the per-epoch history that led to it"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    model: Any = Field(..., description="The selected FlowModel")
    history: List[EpochRecord] = Field(default_factory=list)
    best_epoch: Optional[int] = None
    best_val_loss: Optional[float] = None
