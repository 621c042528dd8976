"""WAV ingestion and the fixed 80x64 normalized log-mel front end."""

from __future__ import annotations

import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, FormatError, ParseError

SAMPLE_RATE = 16000
CLIP_SAMPLES = 16000
N_FFT = 1024
HOP = 256
N_MELS = 80
N_FRAMES = 64
FMIN = 125.0
FMAX = 7600.0
DB_FLOOR = -100.0
DB_CEIL = 20.0
AMP_EPS = 1e-5

# FeatureGrid values are stored as float32 with anything below this flushed to
# zero, so differences of two grids are exact in float64
GRID_DTYPE = np.float32
GRID_TINY = 2.0 ** -24


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise FormatError(f"sample_rate {self.sample_rate} != {SAMPLE_RATE}")
        if self.samples.ndim != 1:
            raise FormatError(f"waveform must be mono 1-d, got shape {self.samples.shape}")
        if self.samples.size and np.abs(self.samples).max() > 1.0:
            raise FormatError("waveform samples must lie in [-1, 1]")


def canonical_grid(values) -> np.ndarray:
    """Cast to the FeatureGrid dtype, clip to [0, 1] and flush tiny values to 0."""
    grid = np.clip(np.asarray(values, dtype=GRID_DTYPE), 0.0, 1.0)
    grid[grid < GRID_TINY] = 0.0
    return grid


def load_wav(path) -> Waveform:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels, width, rate, n = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            if rate != SAMPLE_RATE:
                raise FormatError(f"{path}: sample_rate {rate} != {SAMPLE_RATE}")
            if channels != 1:
                raise FormatError(f"{path}: channels {channels} != 1")
            if width != 2:
                raise FormatError(f"{path}: bit_depth {8 * width} != 16")
            raw = wf.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise ParseError(f"{path}: not a readable PCM WAVE file ({exc})") from exc
    if len(raw) != 2 * n:
        raise ParseError(f"{path}: truncated data chunk ({len(raw)} of {2 * n} bytes)")
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(ints.astype(np.float64) / 32768.0)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write int16 samples (or floats in [-1, 1], scaled by 32768 and clipped) as PCM16 mono."""
    samples = np.asarray(samples)
    if np.issubdtype(samples.dtype, np.floating):
        samples = np.clip(np.round(samples * 32768.0), -32768, 32767)
    ints = samples.astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(sample_rate)
        wf.writeframes(ints.tobytes())


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(w: Waveform, n_fft: int = N_FFT, hop: int = HOP) -> np.ndarray:
    """One-sided STFT magnitudes, shape ``(n_fft // 2 + 1, T)``."""
    x = w.samples
    if x.size < n_fft:
        x = np.pad(x, (0, max(CLIP_SAMPLES, n_fft) - x.size))
    frames = sliding_window_view(x, n_fft)[::hop]
    return np.abs(np.fft.rfft(frames * hann(n_fft), axis=1)).T


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))[1:-1]


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE,
                   fmin: float = FMIN, fmax: float = FMAX) -> np.ndarray:
    """Triangular HTK-mel filters, each row scaled to peak exactly 1."""
    if not (0 <= fmin < fmax <= sr / 2):
        raise ConfigError(f"invalid mel band edges fmin={fmin}, fmax={fmax} for sr={sr}")
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    fb = np.maximum(0.0, np.minimum((bins - lo) / (mid - lo), (hi - bins) / (hi - mid)))
    peaks = fb.max(axis=1)
    if (peaks <= 0).any():
        raise ConfigError(f"{int((peaks <= 0).sum())} mel filters fall between FFT bins; "
                          "lower n_mels or raise n_fft")
    return fb / peaks[:, None]


_FILTERBANK: np.ndarray | None = None


def log_mel(w: Waveform) -> np.ndarray:
    """Normalized 80x64 log-mel FeatureGrid in [0, 1] (0 corresponds to -100 dB)."""
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
    x = w.samples[:CLIP_SAMPLES]
    if x.size < CLIP_SAMPLES:
        x = np.pad(x, (0, CLIP_SAMPLES - x.size))
    mel = _FILTERBANK @ stft(Waveform(x))
    db = np.clip(20.0 * np.log10(mel + AMP_EPS), DB_FLOOR, DB_CEIL)
    norm = (db - DB_FLOOR) / (DB_CEIL - DB_FLOOR)
    grid = np.zeros((N_MELS, N_FRAMES))
    t = min(norm.shape[1], N_FRAMES)
    grid[:, :t] = norm[:, :t]
    return canonical_grid(grid)


def features_from_file(path) -> np.ndarray:
    return log_mel(load_wav(path))


def write_grid_csv(path, grid: np.ndarray) -> None:
    """CSV with one row per mel band, 9 significant digits."""
    grid = np.atleast_2d(np.asarray(grid))
    with open(path, "w", newline="") as fh:
        for row in grid:
            fh.write(",".join(f"{float(v):.9g}" for v in row) + "\n")


def read_grid_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)
