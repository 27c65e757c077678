from io import BytesIO
from pathlib import Path

import numpy as np
import soundfile as sf

from app.core.errors import InvalidInputError
from app.models.schemas import SAMPLE_RATE, Waveform


def write_wav(path: Path, w: Waveform):
    # 16-bit PCM mono at the corpus rate
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), w.samples, w.sample_rate, subtype="PCM_16", format="WAV")


def _to_waveform(samples: np.ndarray, rate: int, source: str) -> Waveform:
    if samples.ndim != 1:
        raise InvalidInputError(f"'{source}' is not mono audio")
    if rate != SAMPLE_RATE:
        raise InvalidInputError(f"'{source}' is sampled at {rate} Hz, expected {SAMPLE_RATE} Hz")
    return Waveform(samples=np.clip(samples, -1.0, 1.0), sample_rate=rate)


def read_wav(path: Path) -> Waveform:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Audio file not found: '{path}'")
    samples, rate = sf.read(str(path), dtype="float64", always_2d=False)
    return _to_waveform(samples, rate, str(path))


def read_wav_bytes(contents: bytes, name: str = "upload") -> Waveform:
    try:
        samples, rate = sf.read(BytesIO(contents), dtype="float64", always_2d=False)
    except Exception as exc:
        raise InvalidInputError(f"Failed to decode audio '{name}': {exc}") from exc
    return _to_waveform(samples, rate, name)
