import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy.stats import betabinom

from app.core.config import ModelConfig
from app.core.errors import InfeasibleAlignmentError, InvalidInputError, ShapeMismatchError

logger = logging.getLogger(__name__)

PRIOR_FLOOR = 1e-8


@dataclass
class Alignment:
    soft: torch.Tensor  # [N x T], columns sum to 1
    log_soft: torch.Tensor  # [N x T]
    hard_durations: np.ndarray  # [N]


@dataclass
class VariancePredictions:
    log_duration: torch.Tensor  # [N]
    pitch: torch.Tensor  # [N], normalized
    energy: Optional[torch.Tensor]  # [N], normalized; None without the energy branch


@dataclass
class PathwayPair:
    excitation_in: torch.Tensor  # [T x d_h]
    formant_in: torch.Tensor  # [T x d_h]


@dataclass
class NormStats:
    pitch_mean: float = 0.0
    pitch_std: float = 1.0
    energy_mean: float = 0.0
    energy_std: float = 1.0

    @classmethod
    def fit(cls, pitch_values: np.ndarray, energy_values: np.ndarray) -> "NormStats":
        pitch_values = np.asarray(pitch_values, dtype=np.float64)
        voiced = pitch_values[pitch_values > 0]
        energy_values = np.asarray(energy_values, dtype=np.float64)
        return cls(
            pitch_mean=float(voiced.mean()) if voiced.size else 0.0,
            pitch_std=float(max(voiced.std(), 1e-3)) if voiced.size else 1.0,
            energy_mean=float(energy_values.mean()) if energy_values.size else 0.0,
            energy_std=float(max(energy_values.std(), 1e-3)) if energy_values.size else 1.0,
        )

    def normalize_pitch(self, hz: np.ndarray) -> np.ndarray:
        # unvoiced phonemes sit at 0 in the normalized domain
        hz = np.asarray(hz, dtype=np.float64)
        return np.where(hz > 0, (hz - self.pitch_mean) / self.pitch_std, 0.0)

    def denormalize_pitch(self, values: np.ndarray) -> np.ndarray:
        return np.asarray(values, dtype=np.float64) * self.pitch_std + self.pitch_mean

    def normalize_energy(self, values: np.ndarray) -> np.ndarray:
        return (np.asarray(values, dtype=np.float64) - self.energy_mean) / self.energy_std

    def to_dict(self) -> Dict[str, float]:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, data: Dict[str, float]) -> "NormStats":
        return cls(**data)


def _check_feasible(n: int, t: int):
    if n < 1:
        raise InvalidInputError("alignment needs at least one phoneme")
    if t < n:
        raise InfeasibleAlignmentError(f"{t} frames cannot cover {n} phonemes")


def beta_binomial_prior(n_phonemes: int, n_frames: int, scaling: float = 1.0) -> np.ndarray:
    """Diagonal-band prior [N x T]; column t is a beta-binomial over phoneme positions."""
    k = np.arange(n_phonemes)
    cols = []
    for t in range(1, n_frames + 1):
        a, b = scaling * t, scaling * (n_frames + 1 - t)
        cols.append(betabinom(n_phonemes - 1, a, b).pmf(k))
    return np.stack(cols, axis=1)


class Aligner(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.temperature = cfg.aligner_temperature
        self.key_proj = nn.Sequential(
            nn.Conv1d(cfg.d_hidden, 2 * cfg.d_hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv1d(2 * cfg.d_hidden, cfg.aligner_dim, 1),
        )
        self.query_proj = nn.Sequential(
            nn.Conv1d(cfg.n_mels, 2 * cfg.n_mels, 3, padding=1),
            nn.ReLU(),
            nn.Conv1d(2 * cfg.n_mels, cfg.n_mels, 1),
            nn.ReLU(),
            nn.Conv1d(cfg.n_mels, cfg.aligner_dim, 1),
        )

    def logits(self, hidden: torch.Tensor, mel: torch.Tensor) -> torch.Tensor:
        # hidden [N x d_h], mel [T x D] -> [N x T]
        keys = self.key_proj(hidden.T.unsqueeze(0))[0]  # [A x N]
        queries = self.query_proj(mel.T.unsqueeze(0))[0]  # [A x T]
        dist = ((keys[:, :, None] - queries[:, None, :]) ** 2).sum(dim=0)
        return -self.temperature * dist

    def forward(self, hidden: torch.Tensor, mel: torch.Tensor, prior: Optional[np.ndarray] = None):
        log_p = F.log_softmax(self.logits(hidden, mel), dim=0)
        if prior is not None:
            log_p = log_p + torch.log(torch.as_tensor(prior, dtype=log_p.dtype) + PRIOR_FLOOR)
        log_soft = F.log_softmax(log_p, dim=0)
        return log_soft.exp(), log_soft


def compute_soft_alignment(hidden: torch.Tensor, mel: torch.Tensor, aligner: Aligner, use_prior: bool = True):
    n, t = hidden.shape[0], mel.shape[0]
    _check_feasible(n, t)
    prior = beta_binomial_prior(n, t) if use_prior else None
    return aligner(hidden, mel, prior)


def viterbi_hard_alignment(log_probs: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Best monotonic complete segmentation of T frames into N phonemes.

    Ties go to the predecessor that advances the phoneme index, so a flat
    matrix puts every spare frame on the first phoneme.
    """
    if isinstance(log_probs, torch.Tensor):
        log_probs = log_probs.detach().cpu().double().numpy()
    lp = np.asarray(log_probs, dtype=np.float64)
    if lp.ndim != 2:
        raise ShapeMismatchError(f"log_probs must be [N x T], got shape {lp.shape}")
    n, t = lp.shape
    _check_feasible(n, t)

    score = np.full((n, t), -np.inf)
    score[0, 0] = lp[0, 0]
    for j in range(1, t):
        stay = score[:, j - 1]
        advance = np.concatenate([[-np.inf], score[:-1, j - 1]])
        score[:, j] = np.maximum(stay, advance) + lp[:, j]

    durations = np.zeros(n, dtype=np.int64)
    state = n - 1
    for j in range(t - 1, 0, -1):
        durations[state] += 1
        if state > 0 and score[state - 1, j - 1] >= score[state, j - 1]:
            state -= 1
    durations[state] += 1
    return durations


def forward_sum_nll(log_probs: torch.Tensor) -> torch.Tensor:
    """-log of the summed probability of every monotonic complete path."""
    if not isinstance(log_probs, torch.Tensor):
        log_probs = torch.as_tensor(np.asarray(log_probs, dtype=np.float64))
    if log_probs.dim() != 2:
        raise ShapeMismatchError(f"log_probs must be [N x T], got shape {tuple(log_probs.shape)}")
    n, t = log_probs.shape
    _check_feasible(n, t)

    # unreachable states start at a finite floor; logaddexp of two -inf has a NaN gradient
    floor = torch.full((1,), torch.finfo(log_probs.dtype).min / 4, dtype=log_probs.dtype, device=log_probs.device)
    alpha = torch.cat([log_probs[:1, 0], floor.expand(n - 1)])
    for j in range(1, t):
        shifted = torch.cat([floor, alpha[:-1]])
        alpha = torch.logaddexp(alpha, shifted) + log_probs[:, j]
    return -alpha[-1]


def best_path_nll(log_probs: torch.Tensor) -> torch.Tensor:
    durations = viterbi_hard_alignment(log_probs)
    owner = torch.as_tensor(np.repeat(np.arange(len(durations)), durations))
    lp = torch.as_tensor(log_probs)
    return -lp[owner, torch.arange(lp.shape[1])].sum()


def hard_alignment_matrix(durations: Sequence[int], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    durations = np.asarray(durations, dtype=np.int64)
    owner = torch.as_tensor(np.repeat(np.arange(len(durations)), durations))
    hard = torch.zeros(len(durations), len(owner), dtype=dtype)
    hard[owner, torch.arange(len(owner))] = 1.0
    return hard


def length_regulate(x, durations):
    dur = np.asarray(durations.detach().cpu() if isinstance(durations, torch.Tensor) else durations)
    dur = dur.astype(np.int64).reshape(-1)
    if dur.shape[0] != x.shape[0]:
        raise ShapeMismatchError(f"{x.shape[0]} rows but {dur.shape[0]} durations")
    if np.any(dur < 0):
        raise InvalidInputError("durations must be nonnegative")
    if dur.sum() < 1:
        raise InvalidInputError("durations sum to zero")
    if isinstance(x, torch.Tensor):
        return torch.repeat_interleave(x, torch.as_tensor(dur, device=x.device), dim=0)
    return np.repeat(np.asarray(x), dur, axis=0)


def durations_from_log(log_duration: torch.Tensor) -> np.ndarray:
    # round half up, at least one frame per phoneme
    values = np.floor(np.exp(log_duration.detach().cpu().double().numpy()) + 0.5)
    return np.maximum(values, 1).astype(np.int64)


class VariancePredictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = cfg.predictor_kernel
        f = cfg.predictor_filter
        self.conv1 = nn.Conv1d(cfg.d_hidden, f, k, padding=(k - 1) // 2)
        self.conv2 = nn.Conv1d(f, f, k, padding=(k - 1) // 2)
        self.norm1 = nn.LayerNorm(f)
        self.norm2 = nn.LayerNorm(f)
        self.dropout = nn.Dropout(cfg.dropout)
        self.linear_layer = nn.Linear(f, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x [N x d_h] -> [N]
        out = F.relu(self.conv1(x.T.unsqueeze(0)))[0].T
        out = self.dropout(self.norm1(out))
        out = F.relu(self.conv2(out.T.unsqueeze(0)))[0].T
        out = self.dropout(self.norm2(out))
        return self.linear_layer(out).squeeze(-1)


class VarianceAdaptor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.use_energy = cfg.use_energy
        self.aligner = Aligner(cfg)
        self.style_proj = nn.Linear(cfg.d_style, cfg.d_hidden)
        self.predictors = nn.ModuleDict(
            OrderedDict(
                [("duration", VariancePredictor(cfg)), ("pitch", VariancePredictor(cfg))]
                + ([("energy", VariancePredictor(cfg))] if cfg.use_energy else [])
            )
        )
        self.pitch_embedding = nn.Conv1d(1, cfg.d_hidden, 3, padding=1)
        self.energy_embedding = nn.Conv1d(1, cfg.d_hidden, 3, padding=1) if cfg.use_energy else None

    def predict(self, hidden: torch.Tensor, s: torch.Tensor) -> VariancePredictions:
        x = hidden + self.style_proj(s).unsqueeze(0)
        return VariancePredictions(
            log_duration=self.predictors["duration"](x),
            pitch=self.predictors["pitch"](x),
            energy=self.predictors["energy"](x) if self.use_energy else None,
        )

    def _embed(self, conv: nn.Conv1d, values: torch.Tensor) -> torch.Tensor:
        return conv(values.reshape(1, 1, -1))[0].T

    def pathways(self, hidden: torch.Tensor, pitch: torch.Tensor, energy: Optional[torch.Tensor],
                 durations) -> PathwayPair:
        n = hidden.shape[0]
        pitch = torch.as_tensor(pitch, dtype=hidden.dtype, device=hidden.device).reshape(-1)
        if pitch.shape[0] != n:
            raise ShapeMismatchError(f"{n} phonemes but {pitch.shape[0]} pitch values")
        excitation = hidden + self._embed(self.pitch_embedding, pitch)
        if self.energy_embedding is not None:
            if energy is None:
                raise InvalidInputError("this adaptor needs energy values")
            energy = torch.as_tensor(energy, dtype=hidden.dtype, device=hidden.device).reshape(-1)
            if energy.shape[0] != n:
                raise ShapeMismatchError(f"{n} phonemes but {energy.shape[0]} energy values")
            excitation = excitation + self._embed(self.energy_embedding, energy)
        return PathwayPair(
            excitation_in=length_regulate(excitation, durations),
            formant_in=length_regulate(hidden, durations),
        )


def predict_variances(hidden: torch.Tensor, s: torch.Tensor, adaptor: VarianceAdaptor) -> VariancePredictions:
    if hidden.dim() != 2 or hidden.shape[0] < 1:
        raise ShapeMismatchError(f"hidden must be a non-empty [N x d_h] matrix, got {tuple(hidden.shape)}")
    return adaptor.predict(hidden, s)


def build_pathways(hidden: torch.Tensor, pitch, energy, durations, adaptor: VarianceAdaptor) -> PathwayPair:
    return adaptor.pathways(hidden, pitch, energy, durations)
