"""Proxy recognizer and character error rate.

Frames are matched against the resonator envelope of every alphabet symbol.
Both sides go through the same pipeline: smoothing across mel bins in the
linear domain, restriction to the formant band, a dynamic-range clip and mean
removal, so the match depends on where the spectral peaks sit and not on level.
"""

import logging
from typing import List, Sequence

import librosa
import numpy as np
from scipy.ndimage import gaussian_filter1d

from app.core.config import AudioConfig, settings
from app.core.errors import InvalidInputError
from app.models.schemas import MelSpectrogram, PhonemeSpec
from app.services.signal_features import mel_basis, mel_center_frequencies
from app.services.toy_corpus import PULSE_CUTOFF_HZ, formant_envelope

logger = logging.getLogger(__name__)

SILENCE_RANGE = 2.0
MIN_RUN_FRAMES = 3
BAND_HZ = (150.0, 3500.0)
SMOOTH_BINS = 1.5
DYNAMIC_RANGE = 8.0
WARP_GRID = np.linspace(0.92, 1.08, 9)


def _band_rows(audio: AudioConfig) -> np.ndarray:
    centers = mel_center_frequencies(audio)
    return np.flatnonzero((centers >= BAND_HZ[0]) & (centers <= BAND_HZ[1]))


def _normalize(log_mel: np.ndarray, rows: np.ndarray) -> np.ndarray:
    lin = gaussian_filter1d(np.exp(log_mel), sigma=SMOOTH_BINS, axis=0, mode="nearest")
    band = np.log(np.maximum(lin[rows], 1e-12))
    band = np.maximum(band, band.max(axis=0, keepdims=True) - DYNAMIC_RANGE)
    return band - band.mean(axis=0, keepdims=True)


def _templates(alphabet: Sequence[PhonemeSpec], warp: float, rows: np.ndarray, audio: AudioConfig) -> np.ndarray:
    freqs = librosa.fft_frequencies(sr=audio.sample_rate, n_fft=audio.n_fft)
    basis = mel_basis(audio)
    cols = []
    for spec in alphabet:
        env = formant_envelope(spec, freqs, warp, audio.sample_rate)
        if spec.voiced:
            env = np.where(freqs < PULSE_CUTOFF_HZ, env, 0.0)
        cols.append(np.log(np.maximum(basis @ env, 1e-12)))
    return _normalize(np.stack(cols, axis=1), rows)


def frame_costs(mel: MelSpectrogram, alphabet: Sequence[PhonemeSpec], warp: float = 1.0,
                audio: AudioConfig = settings.audio) -> np.ndarray:
    rows = _band_rows(audio)
    frames = _normalize(np.asarray(mel.values, dtype=np.float64), rows)
    templates = _templates(alphabet, warp, rows, audio)
    diff = frames[:, None, :] - templates[:, :, None]
    return np.mean(diff**2, axis=0)


def silent_frames(mel: MelSpectrogram) -> np.ndarray:
    values = np.asarray(mel.values, dtype=np.float64)
    return (values.max(axis=0) - values.min(axis=0)) < SILENCE_RANGE


def collapse_labels(labels: Sequence[int], min_run: int = MIN_RUN_FRAMES) -> List[int]:
    """Collapse frame labels into a symbol sequence.

    Runs shorter than `min_run` and silence (label -1) are dropped, then equal
    neighbours that met across a dropped run are merged.
    """
    kept = []
    labels = list(labels)
    start = 0
    while start < len(labels):
        stop = start
        while stop < len(labels) and labels[stop] == labels[start]:
            stop += 1
        if labels[start] >= 0 and stop - start >= min_run:
            if not kept or kept[-1] != labels[start]:
                kept.append(int(labels[start]))
        start = stop
    return kept


def recognize(mel: MelSpectrogram, alphabet: Sequence[PhonemeSpec], audio: AudioConfig = settings.audio) -> List[int]:
    if len(alphabet) == 0:
        raise InvalidInputError("alphabet must not be empty")

    silent = silent_frames(mel)
    if np.all(silent):
        return []

    # one vocal-tract warp per utterance, chosen by the total match cost
    best_cost, best_labels = np.inf, None
    for warp in WARP_GRID:
        costs = frame_costs(mel, alphabet, float(warp), audio)
        total = float(costs.min(axis=0)[~silent].sum())
        if total < best_cost:
            best_cost, best_labels = total, costs.argmin(axis=0)

    labels = np.where(silent, -1, best_labels)
    return collapse_labels(labels.tolist())


def edit_distance(reference: Sequence, hypothesis: Sequence) -> int:
    m, n = len(reference), len(hypothesis)
    d = np.zeros((m + 1, n + 1), dtype=np.int64)
    d[:, 0] = np.arange(m + 1)
    d[0, :] = np.arange(n + 1)
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            sub = d[i - 1, j - 1] + (reference[i - 1] != hypothesis[j - 1])
            d[i, j] = min(sub, d[i - 1, j] + 1, d[i, j - 1] + 1)
    return int(d[m, n])


def cer(reference: Sequence, hypothesis: Sequence) -> float:
    # levenshtein distance normalized by the reference length
    if len(reference) == 0:
        raise InvalidInputError("CER needs a non-empty reference")
    return edit_distance(list(reference), list(hypothesis)) / len(reference)
