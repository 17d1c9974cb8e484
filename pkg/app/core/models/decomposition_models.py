"""
Models for the decomposition solvers
"""
from enum import Enum
from typing import List, Optional

import torch
from pydantic import BaseModel, ConfigDict, Field


class MethodKind(str, Enum):
    NMF = "nmf"
    DDS1 = "dds1"
    DDS2 = "dds2"
    DDS3 = "dds3"

    @property
    def uses_flows(self) -> bool:
        return self != MethodKind.NMF


class OptimizerKind(str, Enum):
    ADAM = "adam"
    SGD = "sgd"


class PlateauConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    window: int = Field(default=50, ge=1)
    rel_threshold: float = Field(default=1e-4, ge=0)
    lr_factor: float = Field(default=0.5, gt=0, lt=1)
    max_reductions: int = Field(default=3, ge=0)


class DecompositionConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    max_steps: int = Field(default=1000, ge=0)
    step_size: Optional[float] = Field(
        default=None, gt=0, description="Defaults to 1e-2 for nmf and 5e-3 for dds"
    )
    lambda_mle: float = Field(default=1e-2, ge=0)
    n_components: int = Field(default=64, ge=1, description="Components per source (dds2/dds3)")
    optimizer: OptimizerKind = OptimizerKind.ADAM
    plateau: PlateauConfig = Field(default_factory=PlateauConfig)
    seed: int = 0

    def effective_step_size(self, kind: MethodKind) -> float:
        if self.step_size is not None:
            return self.step_size
        return 1e-2 if kind == MethodKind.NMF else 5e-3


class NMFTemplates(BaseModel):
    """Stored training frames forming the fixed NMF dictionary"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    frames: torch.Tensor = Field(..., description="M x D training and validation frames")
    labels: torch.Tensor = Field(..., description="Source id of each frame")
    k: int = Field(..., ge=1)


class DictionaryState(BaseModel):
    """
    Method-dependent dictionary parameters.

    nmf: ``w`` (D x M) fixed, ``source_map`` column -> source.
    dds1: ``z`` of shape K x T x D.
    dds2: ``z`` of shape K*N x D, grouped by source.
    dds3: ``z`` holds the nuisance codes (K*N x (D-K)); ``semantic`` the fixed one-hots.
    ``w`` always holds the most recently generated dictionary view.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: MethodKind
    k: int
    n_components: int = 1
    source_map: torch.Tensor
    w: Optional[torch.Tensor] = None
    z: Optional[torch.Tensor] = None
    semantic: Optional[torch.Tensor] = None


class ActivationState(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    h: torch.Tensor = Field(..., description="Nonnegative activations, one row per dictionary column")


class TraceRecord(BaseModel):
    step: int
    objective: float
    recon: float
    mle: float
    lr: float


class DecompositionResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    method: MethodKind
    h_source: torch.Tensor = Field(..., description="K x T post-processed source activations")
    h: torch.Tensor = Field(..., description="Raw component activations")
    w_final: torch.Tensor
    s_hat: torch.Tensor
    objective_trace: List[TraceRecord] = Field(default_factory=list)
    steps_run: int = 0
    wall_ms: float = 0.0
    step_reductions: int = 0
    early_stopped: bool = False
