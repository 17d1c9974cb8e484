"""
Models for audio synthesis, spectral analysis and ground truth
"""
from typing import List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class AudioBuffer(BaseModel):
    """Mono waveform with amplitudes in [-1, 1]"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: np.ndarray = Field(..., description="1-D array of amplitudes")
    sample_rate: int = Field(default=16000, gt=0, description="Sampling rate in Hz")

    @field_validator("samples", mode="before")
    @classmethod
    def _as_float_array(cls, value):
        samples = np.asarray(value, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise ValueError("invalid audio: non-finite samples")
        if np.any(np.abs(samples) > 1.0 + 1e-9):
            raise ValueError("invalid audio: amplitudes outside [-1, 1]")
        return samples


class Spectrogram(BaseModel):
    """Nonnegative D x T log-magnitude spectrogram"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    values: np.ndarray = Field(..., description="D x T matrix of log(1 + |X|)")
    hop: int = Field(..., ge=1, description="Hop size in samples")
    window: int = Field(..., ge=2, description="DFT window size in samples")
    sample_rate: int = Field(default=16000, gt=0)

    @field_validator("values", mode="before")
    @classmethod
    def _as_matrix(cls, value):
        array = np.asarray(value, dtype=np.float64)
        if array.ndim != 2:
            raise ValueError("spectrogram values must be a D x T matrix")
        return array

    @model_validator(mode="after")
    def _check_invariants(self):
        if self.values.shape[1] < 1:
            raise ValueError("spectrogram needs at least one frame")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("spectrogram values must be finite and nonnegative")
        if self.values.shape[0] != self.window // 2:
            raise ValueError(
                f"spectrogram has {self.values.shape[0]} bins, expected window/2 = {self.window // 2}"
            )
        return self

    @property
    def d(self) -> int:
        return int(self.values.shape[0])

    @property
    def t(self) -> int:
        return int(self.values.shape[1])


class NoteEvent(BaseModel):
    source_id: int = Field(..., ge=0)
    onset: float = Field(..., ge=0, description="Onset in seconds")
    duration: float = Field(..., gt=0, description="Duration in seconds")
    intensity: float = Field(..., gt=0, le=1)


class PianoRoll(BaseModel):
    """Binary K x T source activity matrix"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    active: np.ndarray = Field(..., description="K x T matrix of 0/1 entries")

    @field_validator("active", mode="before")
    @classmethod
    def _as_binary(cls, value):
        array = np.asarray(value, dtype=np.float64)
        if array.ndim != 2:
            raise ValueError("piano roll must be a K x T matrix")
        if not np.all((array == 0) | (array == 1)):
            raise ValueError("piano roll entries must be 0 or 1")
        return array.astype(np.int8)

    @property
    def k(self) -> int:
        return int(self.active.shape[0])

    @property
    def t(self) -> int:
        return int(self.active.shape[1])


class SynthConfig(BaseModel):
    """Harmonic tone generator standing in for recorded instrument notes"""
    model_config = ConfigDict(extra="forbid")

    k: int = Field(default=8, ge=1, description="Number of sources")
    fundamentals: Optional[List[float]] = Field(
        default=None,
        description="Per-source fundamentals in Hz; derived from base_frequency when omitted",
    )
    base_frequency: float = Field(default=110.0, gt=0)
    interval_semitones: float = Field(default=1.0, gt=0)
    partials: int = Field(default=8, ge=1)
    partial_decay: float = Field(default=0.6, gt=0, le=1)
    envelope_decay: float = Field(default=0.8, gt=0, description="Amplitude e-folding time in seconds")
    noise_level: float = Field(default=0.01, ge=0, lt=1)
    sample_rate: int = Field(default=16000, gt=0)
    seed: int = 0

    @model_validator(mode="after")
    def _derive_fundamentals(self):
        if self.fundamentals is None:
            self.fundamentals = [
                self.base_frequency * 2.0 ** (i * self.interval_semitones / 12.0)
                for i in range(self.k)
            ]
        if len(self.fundamentals) != self.k:
            raise ValueError(f"expected {self.k} fundamentals, got {len(self.fundamentals)}")
        self.check_nyquist(self.sample_rate)
        return self

    def check_nyquist(self, sample_rate: int) -> None:
        highest = max(self.fundamentals or [0.0]) * self.partials
        if highest >= sample_rate / 2:
            raise ValueError(
                f"highest partial {highest:.1f} Hz is not below Nyquist {sample_rate / 2:.1f} Hz"
            )
