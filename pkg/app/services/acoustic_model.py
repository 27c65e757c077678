import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from app.core.config import DiffusionConfig, ModelConfig, settings
from app.core.errors import InvalidInputError
from app.models.schemas import MelSpectrogram, Solver
from app.services.diffusion import DiffusionCondition, NoiseSchedule, compose_output, forward_sample, solver_mode
from app.services.encoders import MelStyleEncoder, TextEncoder, encode_style
from app.services.signal_features import average_over_phonemes
from app.services.source_filter_decoder import SourceFilterDecoder
from app.services.variance_adaptor import (
    NormStats,
    VarianceAdaptor,
    VariancePredictions,
    compute_soft_alignment,
    durations_from_log,
    viterbi_hard_alignment,
)

logger = logging.getLogger(__name__)


@dataclass
class UtteranceFeatures:
    id: str
    phonemes: Sequence[int]
    mel: MelSpectrogram
    f0: np.ndarray  # frame F0 in Hz, 0 when unvoiced
    energy: np.ndarray  # frame L2 energy
    speaker: int = 0


@dataclass
class ForwardOutputs:
    predictions: VariancePredictions
    log_soft: torch.Tensor  # [N x T]
    hard_durations: np.ndarray  # [N]
    pitch_target: torch.Tensor  # [N], normalized
    energy_target: Optional[torch.Tensor]  # [N], normalized
    x_e: torch.Tensor  # [D x T], the prior mean mu
    x_f: torch.Tensor  # [D x T]
    x_t: torch.Tensor  # [D x T]
    score: torch.Tensor  # [D x T]


@dataclass
class SynthesisResult:
    mel: np.ndarray  # X_hat [D x T]
    x_e_refined: np.ndarray
    x_f: np.ndarray
    mu: np.ndarray
    durations: np.ndarray
    pitch_hz: np.ndarray  # predicted phoneme pitch, denormalized


class FormantDiffModel(nn.Module):
    def __init__(self, n_symbols: int, cfg: ModelConfig = settings.model, stats: Optional[NormStats] = None):
        super().__init__()
        if n_symbols < 1:
            raise InvalidInputError("the model needs at least one phoneme symbol")
        self.n_symbols = n_symbols
        self.cfg = cfg
        self.stats = stats or NormStats()
        self.style_encoder = MelStyleEncoder(cfg)
        self.text_encoder = TextEncoder(n_symbols, cfg)
        self.variance_adaptor = VarianceAdaptor(cfg)
        self.decoder = SourceFilterDecoder(cfg)

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    def _mel(self, mel: MelSpectrogram) -> torch.Tensor:
        return torch.as_tensor(np.asarray(mel.values), dtype=self.dtype)

    def style(self, reference: MelSpectrogram) -> torch.Tensor:
        return encode_style(reference, self.style_encoder)

    def hidden(self, phonemes: Sequence[int], s: torch.Tensor) -> torch.Tensor:
        ids = torch.as_tensor(list(phonemes), dtype=torch.long).unsqueeze(0)
        return self.text_encoder(ids, s.unsqueeze(0))[0]

    def phoneme_targets(self, features: UtteranceFeatures, durations: np.ndarray):
        # normalized phoneme pitch and energy under the given segmentation
        pitch = self.stats.normalize_pitch(average_over_phonemes(features.f0, durations, voiced_only=True))
        pitch_t = torch.as_tensor(pitch, dtype=self.dtype)
        if not self.cfg.use_energy:
            return pitch_t, None
        energy = self.stats.normalize_energy(average_over_phonemes(features.energy, durations))
        return pitch_t, torch.as_tensor(energy, dtype=self.dtype)

    def forward_train(self, features: UtteranceFeatures, t: float, eps: torch.Tensor, sched: NoiseSchedule,
                      use_prior: bool = True) -> ForwardOutputs:
        mel = self._mel(features.mel)  # [D x T]
        s = self.style(features.mel)
        hidden = self.hidden(features.phonemes, s)

        _, log_soft = compute_soft_alignment(hidden, mel.T, self.variance_adaptor.aligner, use_prior=use_prior)
        hard = viterbi_hard_alignment(log_soft)
        predictions = self.variance_adaptor.predict(hidden, s)
        pitch_target, energy_target = self.phoneme_targets(features, hard)

        paths = self.variance_adaptor.pathways(hidden, pitch_target, energy_target, hard)
        x_e, x_f = self.decoder.generate(paths, s)

        # the diffusion model only sees the excitation residual
        x0 = mel - x_f.detach()
        x_t = forward_sample(x0, x_e, t, eps, sched)
        score = self.decoder.score(x_t, t, DiffusionCondition(mu=x_e, style=s, formant=x_f))
        return ForwardOutputs(
            predictions=predictions,
            log_soft=log_soft,
            hard_durations=hard,
            pitch_target=pitch_target,
            energy_target=energy_target,
            x_e=x_e,
            x_f=x_f,
            x_t=x_t,
            score=score,
        )

    @torch.no_grad()
    def synthesize(self, phonemes: Sequence[int], reference: MelSpectrogram, solver: Solver = Solver.PF,
                   steps: int = 10, tau: float = 1.5, seed: int = 0, durations: Optional[Sequence[int]] = None,
                   diffusion: DiffusionConfig = settings.diffusion) -> SynthesisResult:
        if len(phonemes) == 0:
            raise InvalidInputError("cannot synthesize an empty phoneme sequence")
        was_training = self.training
        self.eval()
        try:
            s = self.style(reference)
            hidden = self.hidden(phonemes, s)
            predictions = self.variance_adaptor.predict(hidden, s)
            if durations is None:
                dur = durations_from_log(predictions.log_duration)
            else:
                dur = np.asarray(durations, dtype=np.int64)
                if dur.shape[0] != len(phonemes):
                    raise InvalidInputError(f"{len(phonemes)} phonemes but {dur.shape[0]} durations")
            paths = self.variance_adaptor.pathways(hidden, predictions.pitch, predictions.energy, dur)
            x_e, x_f = self.decoder.generate(paths, s)
            cond = DiffusionCondition(mu=x_e, style=s, formant=x_f)
            refined = self.decoder.refine(
                cond,
                steps,
                tau,
                solver_mode(solver),
                NoiseSchedule.from_config(diffusion),
                seed,
                ml_posterior=diffusion.ml_posterior,
            )
            mel = compose_output(refined, x_f)
        finally:
            self.train(was_training)

        return SynthesisResult(
            mel=mel.cpu().float().numpy(),
            x_e_refined=refined.cpu().float().numpy(),
            x_f=x_f.cpu().float().numpy(),
            mu=x_e.cpu().float().numpy(),
            durations=dur,
            pitch_hz=self.stats.denormalize_pitch(predictions.pitch.cpu().double().numpy()),
        )
