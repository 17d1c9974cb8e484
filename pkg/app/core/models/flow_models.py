"""
Configuration models for the flow dictionaries
"""
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field


class FlowKind(str, Enum):
    REALNVP_SINGLE_SOURCE = "realnvp_single_source"
    GLOW_CONDITIONAL = "glow_conditional"


class ActivationKind(str, Enum):
    SELU = "selu"
    LEAKY_RELU = "leaky_relu"
    IDENTITY = "identity"


class MixingInit(str, Enum):
    ORTHOGONAL = "orthogonal"
    IDENTITY = "identity"


class FlowArchitecture(BaseModel):
    """Shape of a flow: step count and the coupling MLPs"""
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(..., ge=1)
    hidden: int = Field(..., ge=1, description="Units per hidden dense layer")
    dense_layers: int = Field(..., ge=1, description="Dense layers per coupling MLP, output layer included")
    activation: ActivationKind
    scale_clamp: float = Field(default=2.0, gt=0, description="c in s = exp(c * tanh(raw))")
    mixing_init: MixingInit = MixingInit.IDENTITY


def default_realnvp_architecture() -> FlowArchitecture:
    return FlowArchitecture(steps=16, hidden=128, dense_layers=4, activation=ActivationKind.SELU)


def default_glow_architecture() -> FlowArchitecture:
    return FlowArchitecture(steps=32, hidden=1024, dense_layers=3, activation=ActivationKind.LEAKY_RELU)
