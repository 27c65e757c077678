import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd

from app.core.config import DiffusionConfig, SweepSpec, settings
from app.core.errors import InvalidInputError
from app.models.schemas import (
    CorpusManifest,
    EvalAggregate,
    EvalRecord,
    EvalReport,
    ManifestEntry,
    MelSpectrogram,
    PhonemeSpec,
    Solver,
    SplitName,
    SweepRow,
)
from app.services.acoustic_model import FormantDiffModel
from app.services.recognizer import cer, recognize
from app.services.signal_features import compute_mel, extract_f0
from app.services.toy_corpus import read_manifest, symbols_to_ids
from app.services.training import checkpoint_alphabet, load_checkpoint, model_from_checkpoint
from app.services.variance_adaptor import length_regulate
from app.utils.audio_io import read_wav

logger = logging.getLogger(__name__)

Z_95 = 1.96
RECORD_COLUMNS = ["id", "speaker", "solver", "steps", "seed", "cer", "mel_l2", "pitch_rmse"]
METRICS = ("cer", "mel_l2", "pitch_rmse")


def reference_pairs(entries: Sequence[ManifestEntry]) -> List[Tuple[ManifestEntry, ManifestEntry]]:
    """Pair every utterance with the next one of the same speaker, cyclically."""
    by_speaker: Dict[int, List[ManifestEntry]] = {}
    for entry in entries:
        by_speaker.setdefault(entry.speaker, []).append(entry)
    pairs = []
    for entry in entries:
        group = by_speaker[entry.speaker]
        if len(group) == 1:
            logger.warning("Speaker %d has a single utterance; '%s' is its own reference", entry.speaker, entry.id)
        ref = group[(group.index(entry) + 1) % len(group)]
        pairs.append((entry, ref))
    return pairs


def mel_l2(predicted: np.ndarray, target: np.ndarray) -> float:
    # RMS difference over the frames both mels share
    n = min(predicted.shape[1], target.shape[1])
    diff = predicted[:, :n].astype(np.float64) - target[:, :n].astype(np.float64)
    return float(np.sqrt(np.mean(diff**2)))


def pitch_rmse(frame_pitch_hz: np.ndarray, target_f0: np.ndarray) -> float:
    # RMSE in Hz on the frames voiced in the target
    n = min(len(frame_pitch_hz), len(target_f0))
    pred, ref = np.asarray(frame_pitch_hz[:n], dtype=np.float64), np.asarray(target_f0[:n], dtype=np.float64)
    voiced = ref > 0
    if not np.any(voiced):
        return 0.0
    return float(np.sqrt(np.mean((pred[voiced] - ref[voiced]) ** 2)))


def _check_alphabet(model_alphabet: Sequence[PhonemeSpec], corpus_alphabet: Sequence[PhonemeSpec]):
    if [s.symbol for s in model_alphabet] != [s.symbol for s in corpus_alphabet]:
        raise InvalidInputError("checkpoint and corpus use different phoneme alphabets")


def evaluate_model(
    model: FormantDiffModel,
    manifest: CorpusManifest,
    split: SplitName,
    spec: SweepSpec,
    max_utterances: Optional[int] = None,
    diffusion: DiffusionConfig = settings.diffusion,
) -> EvalReport:
    entries = manifest.split(split)
    if max_utterances is not None:
        entries = entries[:max_utterances]
    if not entries:
        raise InvalidInputError(f"split '{SplitName(split).value}' has no utterances")
    if not spec.solvers or not spec.step_counts:
        raise InvalidInputError("solvers and step counts must not be empty")

    diffusion = diffusion.model_copy(update={"tau": spec.tau})
    records = []
    for entry, ref_entry in reference_pairs(entries):
        phonemes = symbols_to_ids(entry.phonemes, manifest.alphabet)
        wav = read_wav(manifest.audio_file(entry))
        target_mel = compute_mel(wav)
        target_f0 = extract_f0(wav).values
        reference = compute_mel(read_wav(manifest.audio_file(ref_entry)))
        durations = entry.durations if spec.use_reference_durations else None

        for solver in spec.solvers:
            for steps in spec.step_counts:
                for seed in spec.seeds:
                    result = model.synthesize(
                        phonemes, reference, Solver(solver), steps, spec.tau, seed,
                        durations=durations, diffusion=diffusion,
                    )
                    hyp = recognize(MelSpectrogram(values=result.mel), manifest.alphabet)
                    frame_pitch = length_regulate(result.pitch_hz, result.durations)
                    records.append(
                        EvalRecord(
                            id=entry.id,
                            speaker=entry.speaker,
                            solver=Solver(solver),
                            steps=steps,
                            seed=seed,
                            cer=cer(phonemes, hyp),
                            mel_l2=mel_l2(result.mel, target_mel.values),
                            pitch_rmse=pitch_rmse(frame_pitch, target_f0),
                        )
                    )
        logger.info("Evaluated '%s' with reference '%s'", entry.id, ref_entry.id)

    return EvalReport(records=records, aggregates=aggregate(records))


def evaluate(ckpt: Path, corpus_dir: Path, split: SplitName, spec: SweepSpec,
             max_utterances: Optional[int] = None) -> EvalReport:
    payload = load_checkpoint(ckpt)
    manifest = read_manifest(corpus_dir)
    _check_alphabet(checkpoint_alphabet(payload), manifest.alphabet)
    return evaluate_model(model_from_checkpoint(payload), manifest, split, spec, max_utterances)


def records_frame(records: Sequence[EvalRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump(mode="json") for r in records], columns=RECORD_COLUMNS)


def aggregate(records: Sequence[EvalRecord]) -> List[EvalAggregate]:
    """Mean and normal-approximation 95% interval per (solver, steps)."""
    if not records:
        return []
    df = records_frame(records)
    grouped = df.groupby(["solver", "steps"], sort=False)
    out = []
    for (solver, steps), group in grouped:
        n = len(group)
        row = {"solver": solver, "steps": int(steps), "n": n}
        for metric in METRICS:
            values = group[metric].to_numpy(dtype=np.float64)
            row[f"{metric}_mean"] = float(values.mean())
            row[f"{metric}_ci95"] = float(Z_95 * values.std(ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        out.append(EvalAggregate(**row))
    return out


def sweep_rows(aggregates: Sequence[EvalAggregate], solvers: Sequence[str], step_counts: Sequence[int]) -> List[SweepRow]:
    """CER ratio CER_n / CER_0 per solver; CER_0 is the zero-step (mu + X_F) output."""
    if 0 not in step_counts:
        raise InvalidInputError("the sweep needs 0 in its step counts as the baseline")
    table = {(Solver(a.solver), a.steps): a for a in aggregates}
    rows = []
    for solver in solvers:
        solver = Solver(solver)
        base = table[(solver, 0)].cer_mean
        for steps in step_counts:
            agg = table[(solver, steps)]
            defined = base > 0
            rows.append(
                SweepRow(
                    solver=solver,
                    steps=steps,
                    cer=agg.cer_mean,
                    cer_ci95=agg.cer_ci95,
                    cer_ratio=agg.cer_mean / base if defined else None,
                    ratio_defined=defined,
                )
            )
        if base == 0:
            logger.warning("CER_0 is zero for solver '%s'; reporting absolute CER", solver.value)
    return rows


def sweep_cer_ratio(ckpt: Path, corpus_dir: Path, split: SplitName, spec: SweepSpec, out_dir: Path,
                    max_utterances: Optional[int] = None) -> Tuple[List[SweepRow], List[Path]]:
    if 0 not in spec.step_counts:
        raise InvalidInputError("the sweep needs 0 in its step counts as the baseline")
    report = evaluate(ckpt, corpus_dir, split, spec, max_utterances)
    rows = sweep_rows(report.aggregates, spec.solvers, spec.step_counts)

    out_dir = Path(out_dir)
    files = write_report(report, out_dir)
    sweep_path = out_dir / "sweep.tsv"
    pd.DataFrame([r.model_dump(mode="json") for r in rows]).to_csv(sweep_path, sep="\t", index=False)
    files += [sweep_path, plot_sweep(rows, out_dir / "sweep.png")]
    logger.info("Wrote sweep table %s", sweep_path)
    return rows, files


def write_report(report: EvalReport, out_dir: Path) -> List[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records_path = out_dir / "records.tsv"
    aggregates_path = out_dir / "aggregates.tsv"
    records_frame(report.records).to_csv(records_path, sep="\t", index=False)
    pd.DataFrame([a.model_dump(mode="json") for a in report.aggregates]).to_csv(
        aggregates_path, sep="\t", index=False
    )
    logger.info("Wrote %d evaluation records to %s", len(report.records), records_path)
    return [records_path, aggregates_path]


def read_records(path: Path) -> List[EvalRecord]:
    df = pd.read_csv(path, sep="\t")
    return [EvalRecord(**row) for row in df.to_dict(orient="records")]


def plot_sweep(rows: Sequence[SweepRow], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    all_defined = all(r.ratio_defined for r in rows)
    for solver in dict.fromkeys(r.solver for r in rows):
        sel = [r for r in rows if r.solver == solver]
        steps = [r.steps for r in sel]
        if all_defined:
            ax.plot(steps, [r.cer_ratio for r in sel], marker="o", label=solver.value.upper())
        else:
            ax.errorbar(steps, [r.cer for r in sel], yerr=[r.cer_ci95 for r in sel], marker="o",
                        capsize=3, label=solver.value.upper())
    ax.set_xlabel("reverse steps")
    ax.set_ylabel("CER ratio (CER_n / CER_0)" if all_defined else "CER")
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
