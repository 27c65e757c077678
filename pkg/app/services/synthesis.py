"""Text plus reference audio to mel containers, shared by the CLI and the HTTP layer."""

import logging
from pathlib import Path
from typing import List, Sequence, Tuple

from app.core.config import DiffusionConfig, settings
from app.core.errors import InvalidInputError
from app.models.schemas import PhonemeSpec, Solver, Waveform
from app.services.acoustic_model import FormantDiffModel, SynthesisResult
from app.services.signal_features import compute_mel
from app.services.toy_corpus import symbols_to_ids
from app.utils.melbin import write_melbin

logger = logging.getLogger(__name__)


def parse_text(text: str, alphabet: Sequence[PhonemeSpec]) -> List[int]:
    symbols = text.split()
    if not symbols:
        raise InvalidInputError("text must contain at least one phoneme symbol")
    return symbols_to_ids(symbols, alphabet)


def synthesize_to_files(model: FormantDiffModel, alphabet: Sequence[PhonemeSpec], text: str, reference: Waveform,
                        out: Path, solver: Solver = Solver.PF, steps: int = 10, tau: float = 1.5, seed: int = 0,
                        dump_intermediates: bool = False,
                        diffusion: DiffusionConfig = settings.diffusion) -> Tuple[SynthesisResult, List[Path]]:
    phonemes = parse_text(text, alphabet)
    result = model.synthesize(phonemes, compute_mel(reference), Solver(solver), steps, tau, seed, diffusion=diffusion)

    out = Path(out)
    write_melbin(out, result.mel)
    files = [out]
    if dump_intermediates:
        # X_hat = X'_E + X_F, stored side by side
        for suffix, values in (("excitation", result.x_e_refined), ("formant", result.x_f)):
            path = out.with_name(f"{out.stem}.{suffix}{out.suffix}")
            write_melbin(path, values)
            files.append(path)
    logger.info("Wrote %d x %d mel to %s", result.mel.shape[0], result.mel.shape[1], out)
    return result, files
