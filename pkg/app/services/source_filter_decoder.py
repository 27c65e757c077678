import logging
from typing import Optional, Tuple

import torch
import torch.nn as nn

from app.core.config import ModelConfig
from app.core.errors import ShapeMismatchError
from app.services.diffusion import DiffusionCondition, NoiseSchedule, sample_reverse
from app.services.encoders import FFTStack
from app.services.score_net import ScoreUNet, estimate_score
from app.services.variance_adaptor import PathwayPair

logger = logging.getLogger(__name__)


class MelGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.stack = FFTStack(cfg, cfg.generator_layers)
        self.mel_linear = nn.Linear(cfg.d_hidden, cfg.n_mels)

    def forward(self, x: torch.Tensor, s: torch.Tensor) -> torch.Tensor:
        # x [T x d_h], s [d_s] -> [D x T]
        out = self.stack(x.unsqueeze(0), s.unsqueeze(0))[0]
        return self.mel_linear(out).T


class SourceFilterDecoder(nn.Module):
    """Two generators and the score network.

    Without E-F generators a single generator runs on the excitation pathway,
    X_F is identically zero and the diffusion model refines the whole mel.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.use_ef_generators = cfg.use_ef_generators
        self.excitation_generator = MelGenerator(cfg)
        self.formant_generator: Optional[MelGenerator] = MelGenerator(cfg) if cfg.use_ef_generators else None
        self.score_net = ScoreUNet(cfg)

    def generate(self, paths: PathwayPair, s: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        if paths.excitation_in.shape != paths.formant_in.shape:
            raise ShapeMismatchError(
                f"pathways differ in shape: {tuple(paths.excitation_in.shape)} vs {tuple(paths.formant_in.shape)}"
            )
        x_e = self.excitation_generator(paths.excitation_in, s)
        if self.formant_generator is None:
            return x_e, torch.zeros_like(x_e)
        return x_e, self.formant_generator(paths.formant_in, s)

    def score(self, x: torch.Tensor, t: float, cond: DiffusionCondition) -> torch.Tensor:
        return estimate_score(x, t, cond.mu, cond.style, cond.formant, self.score_net)

    def refine(self, cond: DiffusionCondition, n_steps: int, tau: float, mode: str, sched: NoiseSchedule,
               seed: int, ml_posterior: bool = False) -> torch.Tensor:
        # refined excitation X'_E sampled from the prior N(mu, I / tau)
        return sample_reverse(
            cond.mu,
            n_steps,
            tau,
            mode,
            sched,
            lambda x, t: self.score(x, t, cond),
            seed,
            ml_posterior=ml_posterior,
        )


def generate_representations(paths: PathwayPair, s: torch.Tensor,
                             decoder: SourceFilterDecoder) -> Tuple[torch.Tensor, torch.Tensor]:
    return decoder.generate(paths, s)
