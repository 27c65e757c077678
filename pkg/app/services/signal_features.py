"""Waveform analysis: mel-spectrogram, F0 contour, frame energy and phoneme averages.

All functions are pure; the frame grid is the centered one used everywhere in the
package (reflection padding of n_fft // 2 on both sides), so a waveform of L
samples always yields 1 + L // hop frames.
"""

import logging
from functools import lru_cache
from typing import Sequence

import librosa
import numpy as np

from app.core.config import AudioConfig, settings
from app.core.errors import InvalidInputError, ShapeMismatchError
from app.models.schemas import F0Contour, FrameEnergy, MelSpectrogram, Waveform

logger = logging.getLogger(__name__)


def frame_count(n_samples: int, hop_length: int = settings.audio.hop_length) -> int:
    return 1 + n_samples // hop_length


@lru_cache(maxsize=4)
def _mel_basis(sample_rate: int, n_fft: int, n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    # unnormalized triangles: each filter peaks at 1 on its center frequency
    return librosa.filters.mel(
        sr=sample_rate, n_fft=n_fft, n_mels=n_mels, fmin=fmin, fmax=fmax, norm=None
    )


def mel_basis(audio: AudioConfig = settings.audio) -> np.ndarray:
    return _mel_basis(audio.sample_rate, audio.n_fft, audio.n_mels, audio.fmin, audio.fmax)


def mel_center_frequencies(audio: AudioConfig = settings.audio) -> np.ndarray:
    edges = librosa.mel_frequencies(n_mels=audio.n_mels + 2, fmin=audio.fmin, fmax=audio.fmax)
    return edges[1:-1]


def _as_waveform(w) -> Waveform:
    if isinstance(w, Waveform):
        return w
    try:
        return Waveform(samples=w)
    except ValueError as exc:
        raise InvalidInputError(f"Invalid waveform: {exc}") from exc


def stft_magnitude(w: Waveform, audio: AudioConfig = settings.audio) -> np.ndarray:
    # linear STFT magnitudes [n_fft // 2 + 1 x T] on the centered frame grid
    w = _as_waveform(w)
    spec = librosa.stft(
        w.samples,
        n_fft=audio.n_fft,
        hop_length=audio.hop_length,
        win_length=audio.win_length,
        window="hann",
        center=True,
        pad_mode="reflect",
    )
    return np.abs(spec)


def mel_from_magnitude(mag: np.ndarray, audio: AudioConfig = settings.audio) -> MelSpectrogram:
    mel = mel_basis(audio) @ mag
    log_mel = np.log(np.maximum(mel, audio.log_floor))
    return MelSpectrogram(values=log_mel.astype(np.float32))


def compute_mel(w: Waveform, audio: AudioConfig = settings.audio) -> MelSpectrogram:
    """80-bin log-amplitude mel-spectrogram, amplitudes clamped at the log floor."""
    w = _as_waveform(w)
    return mel_from_magnitude(stft_magnitude(w, audio), audio)


def compute_energy(mag: np.ndarray) -> FrameEnergy:
    mag = np.asarray(mag, dtype=np.float64)
    if mag.ndim != 2:
        raise InvalidInputError(f"magnitudes must be a [F x T] matrix, got shape {mag.shape}")
    if np.any(mag < 0):
        raise InvalidInputError("magnitudes must be nonnegative")
    return FrameEnergy(values=np.sqrt(np.sum(mag**2, axis=0)))


def _frames(samples: np.ndarray, audio: AudioConfig) -> np.ndarray:
    pad = audio.n_fft // 2
    padded = np.pad(samples, pad, mode="reflect")
    frames = librosa.util.frame(padded, frame_length=audio.win_length, hop_length=audio.hop_length, axis=0)
    return frames[: frame_count(len(samples), audio.hop_length)]


def _normalized_autocorrelation(frames: np.ndarray) -> np.ndarray:
    # correlation between the head and the lag-shifted tail of each frame,
    # normalized by the energy of both overlapping parts
    frames = frames - frames.mean(axis=1, keepdims=True)
    n = frames.shape[1]
    spectrum = np.fft.rfft(frames, n=2 * n, axis=1)
    acf = np.fft.irfft(np.abs(spectrum) ** 2, n=2 * n, axis=1)[:, :n]

    cum = np.cumsum(frames**2, axis=1)
    total = cum[:, -1:]
    lags = np.arange(n)
    head = cum[:, n - 1 - lags]
    tail = total - np.concatenate([np.zeros_like(total), cum[:, :-1]], axis=1)
    denom = np.sqrt(np.maximum(head * tail, 0.0))
    return np.where(denom > 1e-12, acf / np.maximum(denom, 1e-12), 0.0)


def _refine_lag(curve: np.ndarray, lag: int) -> float:
    left, mid, right = curve[lag - 1], curve[lag], curve[lag + 1]
    curvature = left - 2.0 * mid + right
    if curvature >= 0:
        return float(lag)
    delta = 0.5 * (left - right) / curvature
    return lag + float(np.clip(delta, -0.5, 0.5))


def extract_f0(w: Waveform, audio: AudioConfig = settings.audio) -> F0Contour:
    # frame-wise autocorrelation pitch tracker aligned with the mel frames
    w = _as_waveform(w)
    frames = _frames(w.samples, audio)
    corr = _normalized_autocorrelation(frames)

    min_lag = int(np.ceil(audio.sample_rate / audio.f0_max))
    max_lag = min(int(np.floor(audio.sample_rate / audio.f0_min)), frames.shape[1] - 2)

    f0 = np.zeros(frames.shape[0])
    for idx, curve in enumerate(corr):
        window = curve[min_lag : max_lag + 1]
        best = int(np.argmax(window)) + min_lag
        peak = curve[best]
        if peak <= audio.voicing_threshold:
            continue

        # prefer the shortest period whose correlation is nearly as strong
        chosen = best
        k = 2
        while best / k >= min_lag:
            cand = int(round(best / k))
            lo, hi = max(cand - 1, min_lag), min(cand + 1, max_lag)
            local = lo + int(np.argmax(curve[lo : hi + 1]))
            if curve[local] >= 0.9 * peak:
                chosen = local
            k += 1

        lag = _refine_lag(curve, chosen)
        f0[idx] = np.clip(audio.sample_rate / lag, audio.f0_min, audio.f0_max)

    return F0Contour(values=f0)


def average_over_phonemes(frames: Sequence[float], durations: Sequence[int], voiced_only: bool = False) -> np.ndarray:
    """Mean of the frame values inside each phoneme's span.

    With voiced_only, zero frames are left out of the mean and a phoneme with no
    voiced frame averages to 0.
    """
    frames = np.asarray(frames, dtype=np.float64).reshape(-1)
    durations = np.asarray(durations, dtype=np.int64).reshape(-1)
    if durations.size == 0 or np.any(durations < 1):
        raise InvalidInputError("durations must all be >= 1")
    if int(durations.sum()) != frames.size:
        raise ShapeMismatchError(f"durations sum to {int(durations.sum())} but there are {frames.size} frames")

    out = np.zeros(durations.size)
    bounds = np.concatenate([[0], np.cumsum(durations)])
    for n in range(durations.size):
        span = frames[bounds[n] : bounds[n + 1]]
        if voiced_only:
            span = span[span != 0]
            if span.size == 0:
                continue
        out[n] = span.mean()
    return out
