"""Source-filter toy corpus with exact ground truth.

Voiced phonemes are a band-limited pulse train, the unvoiced one is white noise;
both go through a cascade of two second-order resonators placed at the
phoneme's (F1, F2), scaled by the speaker's formant factor.
"""

import logging
import string
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
import pandas as pd
from scipy.signal import sosfilt, sosfreqz

from app.core.config import settings
from app.core.errors import InvalidInputError, ShapeMismatchError
from app.models.schemas import (
    SAMPLE_RATE,
    CorpusManifest,
    ManifestEntry,
    PhonemeSpec,
    SpeakerProfile,
    SplitName,
    UtteranceRecord,
    Waveform,
)
from app.services.signal_features import frame_count
from app.utils.audio_io import write_wav

logger = logging.getLogger(__name__)

MANIFEST_FILE = "manifest.tsv"
ALPHABET_FILE = "alphabet.tsv"
SPEAKERS_FILE = "speakers.tsv"
FORMAT_VERSION = 1

MANIFEST_COLUMNS = ["id", "phonemes", "durations", "f0", "audio_path", "speaker", "split"]
ALPHABET_COLUMNS = ["symbol", "f1", "f2", "b1", "b2", "voiced"]
SPEAKER_COLUMNS = ["speaker", "f0_scale", "formant_scale"]

# vowel-like (F1, F2) grid: neighbours differ by >= 150 Hz in F1 or >= 400 Hz in F2
FORMANT_GRID = [(f1, f2) for f1 in (300.0, 450.0, 600.0, 750.0) for f2 in (1150.0, 1550.0, 2000.0, 2500.0)]
VOICED_BANDWIDTHS = (80.0, 100.0)
UNVOICED_BANDWIDTHS = (250.0, 350.0)

PULSE_CUTOFF_HZ = 5000.0
MIN_DURATION_S = 0.05
CORPUS_DURATION_RANGE = (0.09, 0.2)
CORPUS_BASE_F0_RANGE = (90.0, 170.0)
CORPUS_F0_SCALE_RANGE = (0.8, 1.25)
CORPUS_FORMANT_SCALE_RANGE = (0.95, 1.05)
PHONEME_GAIN_RANGE = (0.7, 1.0)
PEAK_LEVEL = 0.9


def build_alphabet(alphabet_size: int, rng: np.random.Generator) -> List[PhonemeSpec]:
    """Draw `alphabet_size` distinct grid points; the last symbol is unvoiced."""
    if not 4 <= alphabet_size <= 16:
        raise InvalidInputError(f"alphabet_size must be in [4, 16], got {alphabet_size}")
    picks = rng.choice(len(FORMANT_GRID), size=alphabet_size, replace=False)
    alphabet = []
    for idx, grid_idx in enumerate(picks):
        f1, f2 = FORMANT_GRID[int(grid_idx)]
        voiced = idx < alphabet_size - 1
        alphabet.append(
            PhonemeSpec(
                symbol=string.ascii_lowercase[idx],
                f1=f1,
                f2=f2,
                bandwidths=VOICED_BANDWIDTHS if voiced else UNVOICED_BANDWIDTHS,
                voiced=voiced,
            )
        )
    return alphabet


def resonator_sos(freq: float, bandwidth: float, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    # two-pole resonator with unity gain at DC
    r = np.exp(-np.pi * bandwidth / sample_rate)
    theta = 2.0 * np.pi * freq / sample_rate
    a1 = -2.0 * r * np.cos(theta)
    a2 = r * r
    return np.array([1.0 + a1 + a2, 0.0, 0.0, 1.0, a1, a2])


def formant_filter(spec: PhonemeSpec, formant_scale: float = 1.0, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    b1, b2 = spec.bandwidths
    return np.stack(
        [
            resonator_sos(spec.f1 * formant_scale, b1, sample_rate),
            resonator_sos(spec.f2 * formant_scale, b2, sample_rate),
        ]
    )


def formant_envelope(spec: PhonemeSpec, freqs: np.ndarray, formant_scale: float = 1.0,
                     sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    # magnitude response of the phoneme's resonator cascade at `freqs` (Hz)
    _, response = sosfreqz(formant_filter(spec, formant_scale, sample_rate), worN=np.asarray(freqs), fs=sample_rate)
    return np.abs(response)


def _pulse_source(f0_track: np.ndarray, sample_rate: int) -> np.ndarray:
    # sum of equal-amplitude harmonics below the cutoff, phase-continuous across f0 changes
    out = np.zeros_like(f0_track)
    voiced = f0_track > 0
    if not np.any(voiced):
        return out
    phase = 2.0 * np.pi * np.cumsum(f0_track) / sample_rate
    max_harmonic = int(PULSE_CUTOFF_HZ // np.min(f0_track[voiced]))
    for k in range(1, max_harmonic + 1):
        active = voiced & (k * f0_track < PULSE_CUTOFF_HZ)
        out += np.where(active, np.cos(k * phase), 0.0)
    return out


def _unit_rms(x: np.ndarray) -> np.ndarray:
    rms = np.sqrt(np.mean(x**2))
    return x / rms if rms > 0 else x


def durations_to_frames(bounds: np.ndarray, n_samples: int, hop_length: int = settings.audio.hop_length) -> List[int]:
    # assign each centered frame to the phoneme whose sample span holds its center
    n_frames = frame_count(n_samples, hop_length)
    centers = np.arange(n_frames) * hop_length
    owner = np.searchsorted(bounds, centers, side="right")
    owner = np.clip(owner, 0, len(bounds) - 1)
    return np.bincount(owner, minlength=len(bounds)).astype(int).tolist()


def synthesize_utterance(
    phonemes: Sequence[int],
    f0_targets: Sequence[float],
    durations_s: Sequence[float],
    speaker: SpeakerProfile,
    seed: int,
    alphabet: Sequence[PhonemeSpec],
    utterance_id: str = "utt",
    speaker_id: int = 0,
    split: SplitName = SplitName.TRAIN,
) -> UtteranceRecord:
    if len(phonemes) == 0:
        raise InvalidInputError("Cannot synthesize an empty phoneme sequence.")
    if not (len(phonemes) == len(f0_targets) == len(durations_s)):
        raise ShapeMismatchError("phonemes, f0 targets and durations must have equal length")
    if min(durations_s) < MIN_DURATION_S:
        raise InvalidInputError(f"every phoneme must last at least {MIN_DURATION_S} s")
    for pid in phonemes:
        if not 0 <= pid < len(alphabet):
            raise InvalidInputError(f"Unknown phoneme id {pid}")

    sr = SAMPLE_RATE
    rng = np.random.default_rng(seed)
    total = int(round(float(np.sum(durations_s)) * sr))
    bounds = np.round(np.cumsum(durations_s) * sr).astype(int)
    bounds[-1] = total
    starts = np.concatenate([[0], bounds[:-1]])

    specs = [alphabet[pid] for pid in phonemes]
    realized_f0 = [
        float(f0) * speaker.f0_scale if spec.voiced else 0.0 for spec, f0 in zip(specs, f0_targets)
    ]

    f0_track = np.zeros(total)
    for start, stop, f0 in zip(starts, bounds, realized_f0):
        f0_track[start:stop] = f0
    pulses = _pulse_source(f0_track, sr)
    noise = rng.standard_normal(total)
    gains = rng.uniform(*PHONEME_GAIN_RANGE, size=len(specs))

    out = np.zeros(total)
    state = np.zeros((2, 2))
    for spec, start, stop, gain in zip(specs, starts, bounds, gains):
        source = pulses[start:stop] if spec.voiced else noise[start:stop]
        segment, state = sosfilt(
            formant_filter(spec, speaker.formant_scale, sr), _unit_rms(source), zi=state
        )
        out[start:stop] = gain * _unit_rms(segment)

    peak = np.max(np.abs(out))
    if peak > 0:
        out = out * (PEAK_LEVEL / peak)

    return UtteranceRecord(
        id=utterance_id,
        phonemes=list(phonemes),
        waveform=Waveform(samples=out, sample_rate=sr),
        durations_frames=durations_to_frames(bounds, total),
        f0_targets=[round(f, 2) for f in realized_f0],
        speaker=speaker_id,
        split=split,
    )


def _draw_phoneme_string(n_phonemes: int, alphabet_size: int, rng: np.random.Generator) -> List[int]:
    # uniform over strings without immediate repeats, which the recognizer would merge
    phonemes = [int(rng.integers(0, alphabet_size))]
    while len(phonemes) < n_phonemes:
        step = int(rng.integers(1, alphabet_size))
        phonemes.append((phonemes[-1] + step) % alphabet_size)
    return phonemes


def _draw_speakers(n_speakers: int, rng: np.random.Generator) -> Dict[int, SpeakerProfile]:
    speakers = {}
    for idx in range(n_speakers):
        speakers[idx] = SpeakerProfile(
            f0_scale=round(float(rng.uniform(*CORPUS_F0_SCALE_RANGE)), 4),
            formant_scale=round(float(rng.uniform(*CORPUS_FORMANT_SCALE_RANGE)), 4),
        )
    return speakers


def generate_corpus(
    alphabet_size: int,
    n_utterances: int,
    n_speakers: int,
    seed: int,
    out_dir: Path,
    n_heldout_speakers: int = 0,
) -> CorpusManifest:
    """Synthesize a corpus and write wave files, manifest, alphabet and speakers.

    Utterances are assigned to speakers round-robin; speakers numbered from
    `n_speakers` on are held out (split ``heldout``).
    """
    if n_utterances < 1 or n_speakers < 1 or n_heldout_speakers < 0:
        raise InvalidInputError("n_utterances and n_speakers must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    alphabet = build_alphabet(alphabet_size, rng)
    all_speakers = n_speakers + n_heldout_speakers
    speakers = _draw_speakers(all_speakers, rng)
    item_seeds = np.random.SeedSequence(seed).generate_state(n_utterances)
    width = max(2, len(str(n_utterances)))

    entries = []
    for i in range(n_utterances):
        speaker_id = i % all_speakers
        split = SplitName.TRAIN if speaker_id < n_speakers else SplitName.HELDOUT
        n_phonemes = int(rng.integers(3, 13))
        phonemes = _draw_phoneme_string(n_phonemes, alphabet_size, rng)
        base_f0 = np.round(rng.uniform(*CORPUS_BASE_F0_RANGE, size=n_phonemes), 1).tolist()
        durations_s = np.round(rng.uniform(*CORPUS_DURATION_RANGE, size=n_phonemes), 3).tolist()
        utt_id = f"u{i + 1:0{width}d}"

        record = synthesize_utterance(
            phonemes,
            base_f0,
            durations_s,
            speakers[speaker_id],
            int(item_seeds[i]),
            alphabet,
            utterance_id=utt_id,
            speaker_id=speaker_id,
            split=split,
        )
        audio_path = f"{utt_id}.wav"
        write_wav(out_dir / audio_path, record.waveform)
        entries.append(
            ManifestEntry(
                id=utt_id,
                phonemes=[alphabet[p].symbol for p in record.phonemes],
                durations=record.durations_frames,
                f0=record.f0_targets,
                audio_path=audio_path,
                speaker=speaker_id,
                split=split,
            )
        )

    manifest = CorpusManifest(root=out_dir, entries=entries, alphabet=alphabet, speakers=speakers)
    write_manifest(manifest)
    logger.info(
        "Wrote corpus of %d utterances (%d speakers, %d held out) to %s",
        n_utterances, n_speakers, n_heldout_speakers, out_dir,
    )
    return manifest


def _write_table(path: Path, kind: str, frame: pd.DataFrame):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"# formantdiff-{kind}\tversion={FORMAT_VERSION}\n")
        frame.to_csv(fh, sep="\t", index=False, lineterminator="\n")


def write_manifest(manifest: CorpusManifest):
    root = Path(manifest.root)
    rows = [
        {
            "id": e.id,
            "phonemes": " ".join(e.phonemes),
            "durations": ",".join(str(d) for d in e.durations),
            "f0": ",".join(f"{f:.2f}" for f in e.f0),
            "audio_path": e.audio_path,
            "speaker": e.speaker,
            "split": e.split.value,
        }
        for e in manifest.entries
    ]
    _write_table(root / MANIFEST_FILE, "manifest", pd.DataFrame(rows, columns=MANIFEST_COLUMNS))

    alphabet_rows = [
        {
            "symbol": s.symbol,
            "f1": f"{s.f1:.1f}",
            "f2": f"{s.f2:.1f}",
            "b1": f"{s.bandwidths[0]:.1f}",
            "b2": f"{s.bandwidths[1]:.1f}",
            "voiced": int(s.voiced),
        }
        for s in manifest.alphabet
    ]
    _write_table(root / ALPHABET_FILE, "alphabet", pd.DataFrame(alphabet_rows, columns=ALPHABET_COLUMNS))

    speaker_rows = [
        {"speaker": idx, "f0_scale": f"{p.f0_scale:.4f}", "formant_scale": f"{p.formant_scale:.4f}"}
        for idx, p in sorted(manifest.speakers.items())
    ]
    _write_table(root / SPEAKERS_FILE, "speakers", pd.DataFrame(speaker_rows, columns=SPEAKER_COLUMNS))


def _read_table(path: Path, kind: str, required: List[str]) -> pd.DataFrame:
    if not path.is_file():
        raise FileNotFoundError(f"Corpus {kind} not found: '{path}'")
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
    if header != f"# formantdiff-{kind}\tversion={FORMAT_VERSION}":
        raise InvalidInputError(f"'{path}' has an unknown {kind} header: {header!r}")
    df = pd.read_csv(path, sep="\t", skiprows=1, dtype=str, keep_default_na=False)
    missing = set(required) - set(df.columns)
    if missing:
        raise InvalidInputError(f"'{path}' is missing required columns: {', '.join(sorted(missing))}")
    return df


def read_manifest(corpus_dir: Path) -> CorpusManifest:
    root = Path(corpus_dir)
    manifest_df = _read_table(root / MANIFEST_FILE, "manifest", MANIFEST_COLUMNS)
    alphabet_df = _read_table(root / ALPHABET_FILE, "alphabet", ALPHABET_COLUMNS)
    speakers_path = root / SPEAKERS_FILE
    speakers = {}
    if speakers_path.is_file():
        for row in _read_table(speakers_path, "speakers", SPEAKER_COLUMNS).to_dict(orient="records"):
            speakers[int(row["speaker"])] = SpeakerProfile(
                f0_scale=float(row["f0_scale"]), formant_scale=float(row["formant_scale"])
            )

    alphabet = [
        PhonemeSpec(
            symbol=row["symbol"],
            f1=float(row["f1"]),
            f2=float(row["f2"]),
            bandwidths=(float(row["b1"]), float(row["b2"])),
            voiced=bool(int(row["voiced"])),
        )
        for row in alphabet_df.to_dict(orient="records")
    ]

    entries = []
    for row in manifest_df.to_dict(orient="records"):
        entry = ManifestEntry(
            id=row["id"],
            phonemes=row["phonemes"].split(),
            durations=[int(d) for d in row["durations"].split(",")],
            f0=[float(f) for f in row["f0"].split(",")],
            audio_path=row["audio_path"],
            speaker=int(row["speaker"]),
            split=SplitName(row["split"]),
        )
        if not (root / entry.audio_path).is_file():
            raise InvalidInputError(f"Manifest entry '{entry.id}' references missing audio '{entry.audio_path}'")
        entries.append(entry)

    return CorpusManifest(root=root, entries=entries, alphabet=alphabet, speakers=speakers)


def symbols_to_ids(symbols: Sequence[str], alphabet: Sequence[PhonemeSpec]) -> List[int]:
    lookup = {spec.symbol: idx for idx, spec in enumerate(alphabet)}
    ids = []
    for sym in symbols:
        if sym not in lookup:
            raise InvalidInputError(f"Unknown phoneme symbol '{sym}'")
        ids.append(lookup[sym])
    return ids
