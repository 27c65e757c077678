from __future__ import annotations

from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

SAMPLE_RATE = 22050
N_MELS = 80
F0_MIN = 50.0
F0_MAX = 600.0


class Solver(str, Enum):
    PF = "pf"
    ML = "ml"


class SplitName(str, Enum):
    TRAIN = "train"
    HELDOUT = "heldout"


class _ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class Waveform(_ArrayModel):
    """Mono audio at the fixed corpus rate."""

    samples: np.ndarray = Field(..., description="Float samples in [-1, 1].")
    sample_rate: int = Field(SAMPLE_RATE, description="Sampling rate in Hz.")

    @field_validator("samples", mode="before")
    @classmethod
    def _as_float_vector(cls, value):
        arr = np.asarray(value, dtype=np.float64).reshape(-1)
        if arr.size == 0:
            raise ValueError("waveform is empty")
        if not np.all(np.isfinite(arr)):
            raise ValueError("waveform has non-finite samples")
        if np.max(np.abs(arr)) > 1.0 + 1e-9:
            raise ValueError("waveform samples must lie in [-1, 1]")
        return arr

    @field_validator("sample_rate")
    @classmethod
    def _fixed_rate(cls, value):
        if value != SAMPLE_RATE:
            raise ValueError(f"sample_rate must be {SAMPLE_RATE} Hz, got {value}")
        return value

    def __len__(self):
        return int(self.samples.shape[0])


class MelSpectrogram(_ArrayModel):
    """Log-amplitude mel matrix with bins along rows and frames along columns."""

    values: np.ndarray = Field(..., description="Real matrix [D x T].")

    @field_validator("values", mode="before")
    @classmethod
    def _as_matrix(cls, value):
        arr = np.asarray(value, dtype=np.float32)
        if arr.ndim != 2:
            raise ValueError(f"mel must be a 2-D matrix, got shape {arr.shape}")
        if arr.shape[0] != N_MELS:
            raise ValueError(f"mel must have {N_MELS} bins, got {arr.shape[0]}")
        if arr.shape[1] < 1:
            raise ValueError("mel must have at least one frame")
        if not np.all(np.isfinite(arr)):
            raise ValueError("mel has non-finite entries")
        return arr

    @property
    def n_mels(self) -> int:
        return int(self.values.shape[0])

    @property
    def n_frames(self) -> int:
        return int(self.values.shape[1])


class F0Contour(_ArrayModel):
    """Per-frame fundamental frequency in Hz; 0 marks unvoiced frames."""

    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _valid_range(cls, value):
        arr = np.asarray(value, dtype=np.float64).reshape(-1)
        voiced = arr[arr != 0]
        if np.any(voiced < F0_MIN - 1e-9) or np.any(voiced > F0_MAX + 1e-9):
            raise ValueError(f"voiced F0 values must lie in [{F0_MIN}, {F0_MAX}] Hz")
        return arr


class FrameEnergy(_ArrayModel):
    values: np.ndarray

    @field_validator("values", mode="before")
    @classmethod
    def _nonnegative(cls, value):
        arr = np.asarray(value, dtype=np.float64).reshape(-1)
        if np.any(arr < 0):
            raise ValueError("frame energy must be nonnegative")
        return arr


class PhonemeSpec(BaseModel):
    """One vowel-like symbol of the toy alphabet."""

    symbol: str = Field(..., min_length=1)
    f1: float = Field(..., description="First formant in Hz.")
    f2: float = Field(..., description="Second formant in Hz.")
    bandwidths: Tuple[float, float] = Field(..., description="Resonator bandwidths (B1, B2) in Hz.")
    voiced: bool = Field(True)

    @model_validator(mode="after")
    def _formant_order(self):
        if not (200.0 <= self.f1 < self.f2 <= 3000.0):
            raise ValueError(f"formants must satisfy 200 <= f1 < f2 <= 3000, got ({self.f1}, {self.f2})")
        if min(self.bandwidths) <= 0:
            raise ValueError("bandwidths must be positive")
        return self


class SpeakerProfile(BaseModel):
    f0_scale: float = Field(1.0, ge=0.8, le=1.25)
    formant_scale: float = Field(1.0, ge=0.8, le=1.25)


class UtteranceRecord(_ArrayModel):
    """A synthesized utterance together with its exact ground truth."""

    id: str
    phonemes: List[int] = Field(..., min_length=1)
    waveform: Waveform
    durations_frames: List[int]
    f0_targets: List[float]
    speaker: int = 0
    split: SplitName = SplitName.TRAIN

    @model_validator(mode="after")
    def _consistent_lengths(self):
        n = len(self.phonemes)
        if len(self.durations_frames) != n or len(self.f0_targets) != n:
            raise ValueError("phonemes, durations and f0 targets must have equal length")
        if min(self.durations_frames) < 2:
            raise ValueError("every phoneme must last at least 2 frames")
        return self


class ManifestEntry(BaseModel):
    id: str
    phonemes: List[str] = Field(..., min_length=1)
    durations: List[int]
    f0: List[float]
    audio_path: str
    speaker: int = 0
    split: SplitName = SplitName.TRAIN

    @property
    def n_frames(self) -> int:
        return int(sum(self.durations))


class CorpusManifest(BaseModel):
    """Corpus index; audio paths are relative to `root`."""

    root: Path
    entries: List[ManifestEntry]
    alphabet: List[PhonemeSpec] = Field(..., min_length=1)
    speakers: Dict[int, SpeakerProfile] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _unique_ids(self):
        ids = [e.id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("manifest ids must be unique")
        return self

    def symbol_to_id(self) -> Dict[str, int]:
        return {spec.symbol: idx for idx, spec in enumerate(self.alphabet)}

    def audio_file(self, entry: ManifestEntry) -> Path:
        return self.root / entry.audio_path

    def split(self, name: SplitName | str) -> List[ManifestEntry]:
        name = SplitName(name)
        return [e for e in self.entries if e.split == name]


class TrainLogRecord(BaseModel):
    step: int
    duration: float
    pitch: float
    energy: float
    align: float
    prior: float
    diffusion: float
    total: float
    lr: float
    wall_time: float


class EvalRecord(BaseModel):
    """Metrics for one synthesized utterance."""

    id: str
    speaker: int
    solver: Solver
    steps: int = Field(..., ge=0)
    seed: int
    cer: float = Field(..., ge=0)
    mel_l2: float = Field(..., ge=0)
    pitch_rmse: float = Field(..., ge=0)


class EvalAggregate(BaseModel):
    solver: Solver
    steps: int
    n: int
    cer_mean: float
    cer_ci95: float
    mel_l2_mean: float
    mel_l2_ci95: float
    pitch_rmse_mean: float
    pitch_rmse_ci95: float


class EvalReport(BaseModel):
    records: List[EvalRecord]
    aggregates: List[EvalAggregate]


class SweepRow(BaseModel):
    solver: Solver
    steps: int
    cer: float
    cer_ci95: float
    cer_ratio: Optional[float] = Field(
        default=None, description="CER_n / CER_0; None when the baseline CER is zero."
    )
    ratio_defined: bool = True


class RunManifest(BaseModel):
    """Inputs of a CLI run, written beside its outputs."""

    command: str
    config_hash: str
    seed: Optional[int] = None
    checkpoint_id: Optional[str] = None
    arguments: Dict[str, object] = Field(default_factory=dict)
    outputs: List[str] = Field(default_factory=list)


class CorpusRequest(BaseModel):
    """Request body for /corpus/generate."""

    alphabet_size: int = Field(8, ge=4, le=16)
    n_utterances: int = Field(16, ge=1)
    n_speakers: int = Field(4, ge=1)
    n_heldout_speakers: int = Field(0, ge=0)
    seed: int = Field(1)
    out_dir: str = Field(..., min_length=1, description="Directory the corpus is written to.")


class CorpusSummary(BaseModel):
    success: bool
    message: str
    manifest_path: str
    n_utterances: int
    n_speakers: int
    wave_files: int


class SynthesisResponse(BaseModel):
    success: bool
    message: str
    mel_path: str
    n_mels: int
    n_frames: int
    durations: List[int]


class EvaluateRequest(BaseModel):
    """Request body for /evaluate."""

    ckpt: str
    corpus_dir: str
    split: SplitName = SplitName.TRAIN
    solvers: List[Solver] = Field(default_factory=lambda: [Solver.PF, Solver.ML], min_length=1)
    step_counts: List[int] = Field(default_factory=lambda: [10], min_length=1)
    tau: float = Field(1.5, gt=0)
    seeds: List[int] = Field(default_factory=lambda: [0], min_length=1)
    max_utterances: Optional[int] = Field(default=None, ge=1)


class EvalSummary(BaseModel):
    aggregates: List[EvalAggregate]
    n_records: int
