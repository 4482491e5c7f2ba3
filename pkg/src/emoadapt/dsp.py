"""Log-mel feature extraction for 16 kHz mono speech."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.io import wavfile
from scipy.signal import get_window

from .errors import DataError

SAMPLE_RATE = 16000
N_FFT = 512
HOP = 256
N_MELS = 64
MAX_SECONDS = 5.0
LOG_FLOOR = 1e-10
STD_FLOOR = 1e-8


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate != SAMPLE_RATE:
            raise DataError(f"unsupported sample rate {self.sample_rate} Hz (need {SAMPLE_RATE})")
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise DataError("audio clip must be a non-empty mono signal")

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureSample:
    mel: np.ndarray  # (64, n_frames) float32
    label: int
    corpus_id: str

    @property
    def n_frames(self) -> int:
        return self.mel.shape[1]


def load_wav(path) -> AudioClip:
    """Read a 16 kHz mono PCM16 or float32 WAV file, scaled to [-1, 1]."""
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except (ValueError, EOFError, OSError) as exc:
        raise DataError(f"{path}: unreadable WAV ({exc})") from exc
    if rate != SAMPLE_RATE:
        raise DataError(f"{path}: unsupported sample rate {rate} Hz (need {SAMPLE_RATE})")
    if data.ndim != 1:
        raise DataError(f"{path}: unsupported channel count {data.shape[1]} (need mono)")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported encoding {data.dtype} (need PCM16 or float32)")
    if samples.size == 0:
        raise DataError(f"{path}: empty audio")
    return AudioClip(samples, rate)


def write_wav(path, samples: np.ndarray) -> None:
    """Write PCM16 mono at 16 kHz; values are clipped to [-1, 1)."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(Path(path), SAMPLE_RATE, pcm)


def chunk(clip: AudioClip, rng: np.random.Generator, max_seconds: float = MAX_SECONDS) -> AudioClip:
    """Random contiguous window of at most ``max_seconds``; shorter clips pass through."""
    limit = int(round(max_seconds * clip.sample_rate))
    n = clip.samples.size
    if n <= limit:
        return clip
    offset = int(rng.integers(0, n - limit + 1))
    return AudioClip(clip.samples[offset : offset + limit], clip.sample_rate)


def n_frames_for(n_samples: int) -> int:
    return (max(n_samples, N_FFT) - N_FFT) // HOP + 1


def stft_magnitude(clip: AudioClip | np.ndarray) -> np.ndarray:
    """Hann-windowed magnitude spectrogram, shape (257, n_frames), no centre padding."""
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if x.size == 0:
        raise DataError("cannot take the STFT of an empty clip")
    if x.size < N_FFT:
        x = np.pad(x, (0, N_FFT - x.size))
    frames = sliding_window_view(x, N_FFT)[::HOP]
    window = get_window("hann", N_FFT)
    return np.abs(np.fft.rfft(frames * window, axis=1)).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    """Triangular HTK-mel filters, shape (n_mels, n_fft // 2 + 1), unit peak height."""
    if n_mels < 1:
        raise ValueError("n_mels must be at least 1")
    if f_max > sr / 2:
        raise ValueError(f"f_max {f_max} exceeds the Nyquist frequency {sr / 2}")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (center - lower)
    falling = (upper - freqs) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centers(n_mels: int = N_MELS, f_min: float = 0.0, f_max: float = 8000.0) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))[1:-1]


def log_mel(spec: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Unnormalised log-mel energies: ``ln(bank @ |S|^2 + 1e-10)``."""
    return np.log(bank @ (spec**2) + LOG_FLOOR)


def log_mel_normalize(spec: np.ndarray, bank: np.ndarray) -> np.ndarray:
    if spec.ndim != 2 or spec.shape[1] < 1:
        raise DataError("spectrogram needs at least one frame")
    centered = log_mel(spec, bank)
    centered = centered - centered.mean()
    std = float(centered.std())
    if std <= STD_FLOOR:
        return np.zeros_like(centered)
    return centered / std


_BANK = None


def extract(clip: AudioClip, rng: np.random.Generator) -> np.ndarray:
    """Chunk, STFT, log-mel and normalise one clip into a float32 (64, T) matrix."""
    global _BANK
    if _BANK is None:
        _BANK = mel_filterbank()
    clip = chunk(clip, rng)
    return log_mel_normalize(stft_magnitude(clip), _BANK).astype(np.float32)


# --------------------------------------------------------------------------
# feature cache: <stem>.f32 (little-endian float32, 64 rows, row-major) + <stem>.json


def save_feature(stem, mel: np.ndarray, source_path: str, label: str) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    mel = np.ascontiguousarray(mel, dtype="<f4")
    stem.with_suffix(".f32").write_bytes(mel.tobytes())
    sidecar = {"n_mels": int(mel.shape[0]), "n_frames": int(mel.shape[1]),
               "source_path": str(source_path), "label": label}
    stem.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_feature(stem) -> tuple[np.ndarray, dict]:
    stem = Path(stem)
    try:
        meta = json.loads(stem.with_suffix(".json").read_text())
        raw = stem.with_suffix(".f32").read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"missing feature file {exc.filename}") from exc
    n_mels, n_frames = meta["n_mels"], meta["n_frames"]
    if len(raw) != 4 * n_mels * n_frames:
        raise DataError(f"{stem}: feature file size does not match its sidecar")
    mel = np.frombuffer(raw, dtype="<f4").reshape(n_mels, n_frames).astype(np.float32)
    return mel, meta


def feature_exists(stem) -> bool:
    stem = Path(stem)
    return stem.with_suffix(".f32").exists() and stem.with_suffix(".json").exists()
