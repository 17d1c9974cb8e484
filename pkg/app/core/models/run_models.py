"""
Run configuration, dataset manifest and benchmark report models
"""
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.models.decomposition_models import DecompositionConfig, MethodKind
from app.core.models.signal_models import SynthConfig
from app.core.models.training_models import TrainConfig


class DatasetConfig(BaseModel):
    """How cmd_synth lays out isolated notes and test mixtures"""
    model_config = ConfigDict(extra="forbid")

    window: int = Field(default=1024, ge=4)
    hop: int = Field(default=512, ge=1)
    notes_per_source: int = Field(default=10, ge=2)
    note_duration: float = Field(default=0.6, gt=0)
    intensity_min: float = Field(default=0.25, gt=0, le=1)
    intensity_max: float = Field(default=0.75, gt=0, le=1)
    polyphony: int = Field(default=2, ge=1)
    mixtures: int = Field(default=3, ge=0)
    segments_per_mixture: int = Field(default=20, ge=1)
    segment_duration: float = Field(default=0.5, gt=0)
    validation_fraction: float = Field(default=0.2, gt=0, lt=1)
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.window % 2:
            raise ValueError("window must be even")
        if self.intensity_min > self.intensity_max:
            raise ValueError("intensity_min must not exceed intensity_max")
        return self


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    epsilon: float = Field(default=0.05, ge=0)


class BenchConfig(BaseModel):
    """Parameter sweeps for per-iteration timing"""
    model_config = ConfigDict(extra="forbid")

    t_values: List[int] = Field(default_factory=lambda: [128, 256, 512, 1024])
    d_values: List[int] = Field(default_factory=lambda: [64, 128, 256, 512])
    k_values: List[int] = Field(default_factory=lambda: [2, 4, 8, 16])
    n_values: List[int] = Field(default_factory=lambda: [2, 4, 8, 16])
    m_values: List[int] = Field(default_factory=lambda: [512, 1024, 2048, 4096])
    base_t: int = Field(default=256, ge=1)
    base_d: int = Field(default=256, ge=2)
    base_k: int = Field(default=8, ge=1)
    base_n: int = Field(default=4, ge=1)
    base_m: int = Field(default=1024, ge=1)
    flow_steps: int = Field(default=2, ge=1)
    dense_layers: int = Field(default=2, ge=1)
    repetitions: int = Field(default=5, ge=5)
    warmup: int = Field(default=2, ge=2)
    methods: List[MethodKind] = Field(default_factory=lambda: list(MethodKind))

    @model_validator(mode="after")
    def _enough_points(self):
        for name in ("t_values", "d_values", "k_values", "n_values", "m_values"):
            if len(getattr(self, name)) < 3:
                raise ValueError(f"{name} needs at least 3 points for a slope fit")
        return self


class SweepConfig(BaseModel):
    """Grid for cmd_sweep; every (window, polyphony, intensity range) point gets its own dataset"""
    model_config = ConfigDict(extra="forbid")

    polyphony_values: List[int] = Field(default_factory=lambda: [1, 2, 3])
    intensity_ranges: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.25, 0.75)])
    n_values: List[int] = Field(default_factory=lambda: [16, 64])
    window_values: Optional[List[int]] = Field(None, description="Defaults to dataset.window")
    methods: List[MethodKind] = Field(default_factory=lambda: list(MethodKind))

    @model_validator(mode="after")
    def _check(self):
        for name in ("polyphony_values", "intensity_ranges", "n_values", "methods"):
            if not getattr(self, name):
                raise ValueError(f"{name} must not be empty")
        if min(self.polyphony_values) < 1 or min(self.n_values) < 1:
            raise ValueError("polyphony and n values must be positive")
        for low, high in self.intensity_ranges:
            if not 0 < low <= high <= 1:
                raise ValueError(f"intensity range ({low}, {high}) must satisfy 0 < low <= high <= 1")
        for window in self.window_values or []:
            if window < 4 or window % 2:
                raise ValueError(f"window {window} must be even and at least 4")
        return self


class PathsConfig(BaseModel):
    """Artifact locations; each command requires the ones it uses"""
    model_config = ConfigDict(extra="forbid")

    dataset: Optional[str] = None
    checkpoints: Optional[str] = None
    results: Optional[str] = None
    out: Optional[str] = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: MethodKind = MethodKind.DDS3
    seed: Optional[int] = None
    jobs: int = Field(default=1, ge=1)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    decomposition: DecompositionConfig = Field(default_factory=DecompositionConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    bench: BenchConfig = Field(default_factory=BenchConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    def with_seed(self, seed: int) -> "RunConfig":
        """Propagate one seed into every seeded section"""
        update = self.model_copy(deep=True)
        update.seed = seed
        update.synth.seed = seed
        update.dataset.seed = seed
        update.train.seed = seed
        update.decomposition.seed = seed
        return update


class ManifestSource(BaseModel):
    source_id: int
    fundamental: float


class ManifestSample(BaseModel):
    """One stored spectrogram; mixtures also reference a piano roll"""
    name: str
    kind: str = Field(..., description="isolated | mixture")
    split: str = Field(..., description="train | validation | test")
    path: str
    roll_path: Optional[str] = None
    sources: List[int]
    frames: int


class DatasetManifest(BaseModel):
    version: int = 1
    sample_rate: int
    window: int
    hop: int
    d: int
    k: int
    polyphony: int
    seed: int
    sources: List[ManifestSource]
    samples: List[ManifestSample]

    def by_split(self, split: str) -> List[ManifestSample]:
        return [s for s in self.samples if s.split == split]


class BenchRow(BaseModel):
    method: str
    parameter: str
    value: int
    dictionary_ms: Optional[float] = None
    reconstruction_ms: float
    iteration_ms: float
    memory_bytes: int


class BenchSlope(BaseModel):
    method: str
    parameter: str
    component: str
    slope: float
    points: int


class BenchReport(BaseModel):
    rows: List[BenchRow] = Field(default_factory=list)
    slopes: List[BenchSlope] = Field(default_factory=list)

    def slope(self, method: str, parameter: str, component: str) -> Optional[float]:
        for entry in self.slopes:
            if (entry.method, entry.parameter, entry.component) == (method, parameter, component):
                return entry.slope
        return None
