from typing import Optional

from pydantic import BaseModel, Field


class MetricReport(BaseModel):
    psa: float = Field(..., ge=0, le=1, description="Precision of source attribution")
    l0_eps: float = Field(..., ge=0, le=1, description="Fraction of activations at or below epsilon")
    recon_error: Optional[float] = Field(None, ge=0, description="Frobenius reconstruction error")
    epsilon: float = Field(..., ge=0)


class MetricRow(BaseModel):
    """One evaluated decomposition run"""
    method: str
    snippet: str
    psa: float
    l0_eps: float
    recon_error: Optional[float] = None
    epsilon: float


class MethodSummary(BaseModel):
    method: str
    runs: int
    psa_mean: float
    l0_eps_mean: float
    recon_error_mean: Optional[float] = None
    psa_rank: int
    psa_gain_vs_nmf: Optional[float] = Field(
        None, description="Relative PSA improvement over the nmf baseline"
    )


class SweepRow(BaseModel):
    """One method's evaluation summary at one sweep point"""
    window: int
    polyphony: int
    intensity_min: float
    intensity_max: float
    n_components: Optional[int] = Field(None, description="Empty for methods without per-source components")
    method: str
    runs: int
    psa_mean: float
    l0_eps_mean: float
    recon_error_mean: Optional[float] = None
