import copy
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from app.core.config import DiffusionConfig, LossWeights, ModelConfig, TrainConfig, config_echo, settings
from app.core.errors import CheckpointError, DomainError, InvalidInputError, TrainingDivergenceError
from app.models.schemas import (
    CorpusManifest,
    ManifestEntry,
    MelSpectrogram,
    PhonemeSpec,
    Solver,
    SplitName,
    TrainLogRecord,
)
from app.services.acoustic_model import ForwardOutputs, FormantDiffModel, UtteranceFeatures
from app.services.diffusion import NoiseSchedule
from app.services.recognizer import cer, recognize
from app.services.signal_features import (
    average_over_phonemes,
    compute_energy,
    extract_f0,
    mel_from_magnitude,
    stft_magnitude,
)
from app.services.toy_corpus import symbols_to_ids
from app.services.variance_adaptor import NormStats, forward_sum_nll, hard_alignment_matrix
from app.utils.audio_io import read_wav

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
LOSS_TERMS = ("duration", "pitch", "energy", "align", "prior", "diffusion")
TRAIN_LOG_FILE = "train_log.jsonl"
LAST_CHECKPOINT = "last.ckpt"


@dataclass
class LossBreakdown:
    duration: torch.Tensor
    pitch: torch.Tensor
    energy: torch.Tensor
    align: torch.Tensor
    prior: torch.Tensor
    diffusion: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Dict[str, float]:
        return {name: float(getattr(self, name).detach()) for name in LOSS_TERMS + ("total",)}


def diffusion_loss(score: torch.Tensor, eps: torch.Tensor, lam: float) -> torch.Tensor:
    """lambda-weighted score matching against -eps / sqrt(lambda), without the division."""
    return torch.mean((math.sqrt(float(lam)) * score + eps) ** 2)


def alignment_loss(log_soft: torch.Tensor, hard_durations: Sequence[int]) -> torch.Tensor:
    n_frames = log_soft.shape[1]
    hard = hard_alignment_matrix(hard_durations, dtype=log_soft.dtype)
    # cross-entropy of the one-hot hard path under the soft distribution, per frame
    bin_loss = -(hard * log_soft.clamp(min=-1e4)).sum() / n_frames
    return forward_sum_nll(log_soft) / n_frames + bin_loss


def compute_losses(mel: torch.Tensor, out: ForwardOutputs, t: float, eps: torch.Tensor, sched: NoiseSchedule,
                   weights: Optional[LossWeights] = None, step: int = 0) -> LossBreakdown:
    weights = weights or LossWeights()
    dur_target = torch.log(torch.as_tensor(out.hard_durations, dtype=mel.dtype))
    preds = out.predictions

    terms = {
        "duration": F.mse_loss(preds.log_duration, dur_target),
        "pitch": F.mse_loss(preds.pitch, out.pitch_target),
        "energy": (
            F.mse_loss(preds.energy, out.energy_target)
            if preds.energy is not None and out.energy_target is not None
            else mel.new_zeros(())
        ),
        "align": alignment_loss(out.log_soft, out.hard_durations),
        "prior": torch.mean((out.x_e - (mel - out.x_f)) ** 2),
        "diffusion": diffusion_loss(out.score, eps, sched.lam(t)),
    }
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise TrainingDivergenceError(step, name)
        assert float(value) >= 0.0, f"loss term '{name}' is negative"

    total = sum(getattr(weights, name) * value for name, value in terms.items())
    return LossBreakdown(total=total, **terms)


def lr_at(step: int, warmup: int, scale: float) -> float:
    if step < 1:
        raise DomainError(f"learning-rate step must be >= 1, got {step}")
    if warmup < 1:
        raise DomainError(f"warmup must be >= 1, got {warmup}")
    return scale * min(step**-0.5, step * warmup**-1.5)


def _features_for(manifest: CorpusManifest, entry: ManifestEntry, lookup: Dict[str, int]) -> UtteranceFeatures:
    wav = read_wav(manifest.audio_file(entry))
    mag = stft_magnitude(wav)
    mel = mel_from_magnitude(mag)
    if mel.n_frames != entry.n_frames:
        raise InvalidInputError(
            f"'{entry.id}': stored durations cover {entry.n_frames} frames but the audio has {mel.n_frames}"
        )
    return UtteranceFeatures(
        id=entry.id,
        phonemes=[lookup[sym] for sym in entry.phonemes],
        mel=mel,
        f0=extract_f0(wav).values,
        energy=compute_energy(mag).values,
        speaker=entry.speaker,
    )


def extract_features(manifest: CorpusManifest, entries: Sequence[ManifestEntry],
                     max_workers: int = 4) -> List[UtteranceFeatures]:
    # mel, F0 and energy of every entry; order follows `entries`
    lookup = manifest.symbol_to_id()
    for entry in entries:
        symbols_to_ids(entry.phonemes, manifest.alphabet)
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        return list(pool.map(lambda e: _features_for(manifest, e, lookup), entries))


def corpus_stats(features: Sequence[UtteranceFeatures], entries: Sequence[ManifestEntry]) -> NormStats:
    pitch, energy = [], []
    for feat, entry in zip(features, entries):
        pitch.append(average_over_phonemes(feat.f0, entry.durations, voiced_only=True))
        energy.append(average_over_phonemes(feat.energy, entry.durations))
    return NormStats.fit(np.concatenate(pitch), np.concatenate(energy))


def ablated_model_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> ModelConfig:
    update = {}
    if train_cfg.no_ef_generators:
        update["use_ef_generators"] = False
    if train_cfg.no_energy:
        update["use_energy"] = False
    return model_cfg.model_copy(update=update) if update else model_cfg


def save_checkpoint(path: Path, model: FormantDiffModel, alphabet: Sequence[PhonemeSpec], step: int,
                    train_cfg: TrainConfig, diffusion_cfg: DiffusionConfig,
                    optimizer: Optional[torch.optim.Optimizer] = None, rng_state: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": {
            "model": config_echo(model.cfg),
            "train": config_echo(train_cfg),
            "diffusion": config_echo(diffusion_cfg),
        },
        "norm_stats": model.stats.to_dict(),
        "alphabet": [spec.model_dump(mode="json") for spec in alphabet],
        "state_dict": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "rng_state": rng_state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    logger.info("Saved checkpoint at step %d to %s", step, path)
    return path


def load_checkpoint(path: Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: '{path}'")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"Could not read checkpoint '{path}': {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"'{path}' is not a version {CHECKPOINT_VERSION} checkpoint")
    return payload


def model_from_checkpoint(payload: dict) -> FormantDiffModel:
    cfg = ModelConfig(**payload["config"]["model"])
    alphabet = [PhonemeSpec(**spec) for spec in payload["alphabet"]]
    model = FormantDiffModel(len(alphabet), cfg, NormStats.from_dict(payload["norm_stats"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model


def checkpoint_alphabet(payload: dict) -> List[PhonemeSpec]:
    return [PhonemeSpec(**spec) for spec in payload["alphabet"]]


@dataclass
class FitResult:
    model: FormantDiffModel
    log: List[TrainLogRecord] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    step: int = 0


class _RunState:
    """Random streams of a run; checkpointed so a resumed run continues exactly."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.noise = torch.Generator().manual_seed(seed)

    def snapshot(self) -> dict:
        return {
            "numpy": self.rng.bit_generator.state,
            "noise": self.noise.get_state(),
            "torch": torch.get_rng_state(),
        }

    def restore(self, state: dict):
        self.rng.bit_generator.state = state["numpy"]
        self.noise.set_state(state["noise"])
        torch.set_rng_state(state["torch"])


def snapshot_cer(model: FormantDiffModel, features: Sequence[UtteranceFeatures], alphabet: Sequence[PhonemeSpec],
                 diffusion_cfg: DiffusionConfig, seed: int = 0) -> float:
    # mean proxy CER of resynthesized training utterances on a read-only copy of the model
    snapshot = copy.deepcopy(model).eval()
    scores = []
    for feat in features:
        result = snapshot.synthesize(
            feat.phonemes, feat.mel, Solver.PF, diffusion_cfg.steps, diffusion_cfg.tau, seed, diffusion=diffusion_cfg
        )
        hyp = recognize(MelSpectrogram(values=result.mel), alphabet)
        scores.append(cer(list(feat.phonemes), hyp))
    return float(np.mean(scores)) if scores else 0.0


def fit(
    manifest: CorpusManifest,
    train_cfg: TrainConfig = settings.train,
    model_cfg: ModelConfig = settings.model,
    diffusion_cfg: DiffusionConfig = settings.diffusion,
    out_dir: Optional[Path] = None,
    resume: Optional[Path] = None,
    max_workers: int = 4,
) -> FitResult:
    """Train on the `train` split of a corpus.

    Every step draws a batch of utterances, accumulates their gradients and
    takes one clipped Adam step. Checkpoints and the jsonl log go to `out_dir`.
    """
    entries = manifest.split(SplitName.TRAIN)
    if not entries:
        raise InvalidInputError("the corpus has no training utterances")

    model_cfg = ablated_model_config(model_cfg, train_cfg)
    sched = NoiseSchedule.from_config(diffusion_cfg)
    features = extract_features(manifest, entries, max_workers=max_workers)
    stats = corpus_stats(features, entries)

    torch.manual_seed(train_cfg.seed)
    run = _RunState(train_cfg.seed)
    model = FormantDiffModel(len(manifest.alphabet), model_cfg, stats)
    optimizer = torch.optim.Adam(model.parameters(), lr=0.0, betas=(0.9, 0.98), eps=1e-9)
    lr_scale = train_cfg.lr_scale * model_cfg.d_hidden**-0.5

    start_step = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        model.load_state_dict(payload["state_dict"])
        model.stats = NormStats.from_dict(payload["norm_stats"])
        if payload.get("optimizer") is not None:
            optimizer.load_state_dict(payload["optimizer"])
        if payload.get("rng_state") is not None:
            run.restore(payload["rng_state"])
        start_step = int(payload["step"])
        logger.info("Resuming from %s at step %d", resume, start_step)

    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / TRAIN_LOG_FILE
        if resume is None and log_path.exists():
            log_path.unlink()

    result = FitResult(model=model, step=start_step)
    batch_size = min(train_cfg.batch_size, len(features))
    started = time.time()
    model.train()

    for step in range(start_step + 1, train_cfg.max_steps + 1):
        lr = lr_at(step, train_cfg.warmup_steps, lr_scale)
        for group in optimizer.param_groups:
            group["lr"] = lr
        optimizer.zero_grad()

        use_prior = step <= train_cfg.prior_anneal_steps
        totals = dict.fromkeys(LOSS_TERMS + ("total",), 0.0)
        for idx in run.rng.choice(len(features), size=batch_size, replace=False):
            feat = features[int(idx)]
            mel = torch.as_tensor(np.asarray(feat.mel.values), dtype=model.dtype)
            t = float(run.rng.uniform(diffusion_cfg.t_min, 1.0))
            eps = torch.randn(mel.shape, generator=run.noise, dtype=mel.dtype)
            out = model.forward_train(feat, t, eps, sched, use_prior=use_prior)
            try:
                losses = compute_losses(mel, out, t, eps, sched, train_cfg.loss_weights, step=step)
            except TrainingDivergenceError as exc:
                logger.warning("Stopping on '%s' at step %d: %s", feat.id, step, exc)
                raise
            (losses.total / batch_size).backward()
            for name, value in losses.as_floats().items():
                totals[name] += value / batch_size

        torch.nn.utils.clip_grad_norm_(model.parameters(), train_cfg.grad_clip)
        optimizer.step()

        record = TrainLogRecord(step=step, lr=lr, wall_time=time.time() - started, **totals)
        result.log.append(record)
        result.step = step
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(record.model_dump_json() + "\n")
        if step % train_cfg.log_every == 0:
            logger.info(
                "step %d | total %.4f | dur %.4f | pitch %.4f | energy %.4f | align %.4f | prior %.4f | diff %.4f | lr %.2e",
                step, totals["total"], totals["duration"], totals["pitch"], totals["energy"],
                totals["align"], totals["prior"], totals["diffusion"], lr,
            )

        if out_dir is not None and train_cfg.checkpoint_every and step % train_cfg.checkpoint_every == 0:
            save_checkpoint(out_dir / f"step_{step:06d}.ckpt", model, manifest.alphabet, step,
                            train_cfg, diffusion_cfg, optimizer, run.snapshot())
        if train_cfg.eval_every and step % train_cfg.eval_every == 0:
            value = snapshot_cer(model, features[: train_cfg.eval_utterances], manifest.alphabet, diffusion_cfg)
            logger.info("step %d | proxy CER on training utterances %.4f", step, value)

    if out_dir is not None:
        result.checkpoint = save_checkpoint(out_dir / LAST_CHECKPOINT, model, manifest.alphabet, result.step,
                                            train_cfg, diffusion_cfg, optimizer, run.snapshot())
    return result


def read_train_log(path: Path) -> List[TrainLogRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return [TrainLogRecord(**json.loads(line)) for line in fh if line.strip()]
