"""Synthetic spoken-command corpus in the Speech Commands directory layout.

Each "word" is a fixed sequence of segments: voiced segments are harmonic
complexes shaped by two formant resonances, unvoiced ones are band-passed
noise.  Speakers differ in pitch, formant scale, tempo and loudness, and
every clip gets background noise, so a classifier sees genuine log-mel
structure and makes some mistakes.  Used when the real corpus is not
available.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import DESK_CLASSES
from .features import CLIP_SAMPLES, SAMPLE_RATE, write_wav

# (kind, F1 Hz, F2 Hz, relative duration); "n" = noise band given by (lo, hi)
_WORDS: dict[str, list[tuple[str, float, float, float]]] = {
    "down": [("v", 300, 900, 0.3), ("v", 700, 1200, 0.5), ("v", 300, 1600, 0.2)],
    "go": [("n", 1500, 2500, 0.1), ("v", 500, 900, 0.9)],
    "left": [("v", 400, 1200, 0.2), ("v", 550, 1800, 0.5), ("n", 3500, 6000, 0.3)],
    "no": [("v", 250, 1500, 0.25), ("v", 450, 850, 0.75)],
    "off": [("v", 600, 1000, 0.5), ("n", 2000, 7000, 0.5)],
    "on": [("v", 650, 1050, 0.7), ("v", 250, 1400, 0.3)],
    "right": [("v", 350, 1300, 0.2), ("v", 750, 1300, 0.3), ("v", 350, 2200, 0.3), ("n", 3000, 5000, 0.2)],
    "stop": [("n", 4000, 7500, 0.35), ("n", 2000, 4000, 0.1), ("v", 600, 1000, 0.55)],
    "up": [("v", 650, 1200, 0.6), ("n", 800, 2500, 0.4)],
    "yes": [("v", 300, 2300, 0.3), ("v", 550, 1900, 0.3), ("n", 3500, 7000, 0.4)],
}


@dataclass
class Speaker:
    name: str
    f0: float
    formant_scale: float
    tempo: float
    level: float


def make_speaker(index: int, rng: np.random.Generator) -> Speaker:
    return Speaker(f"{index:08x}", rng.uniform(90, 240), rng.uniform(0.85, 1.2), rng.uniform(0.75, 1.25),
                   float(np.exp(rng.uniform(np.log(0.02), np.log(0.3)))))


def _resonance_gain(freqs: np.ndarray, centre: float, bw: float) -> np.ndarray:
    return 1.0 / (1.0 + ((freqs - centre) / bw) ** 2)


def _voiced(n: int, f0: float, f1: float, f2: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    harmonics = np.arange(1, int(7000 // f0) + 1) * f0
    gains = _resonance_gain(harmonics, f1, 90) + 0.7 * _resonance_gain(harmonics, f2, 120) + 0.02
    gains /= harmonics / f0  # spectral tilt
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(4, 6) * t)
    phases = rng.uniform(0, 2 * np.pi, size=len(harmonics))
    return (gains[:, None] * np.sin(2 * np.pi * harmonics[:, None] * t[None] * vibrato + phases[:, None])).sum(0)


def _noise_band(n: int, lo: float, hi: float, rng: np.random.Generator) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    spec[(freqs < lo) | (freqs > hi)] = 0.0
    return np.fft.irfft(spec, n)


def synth_word(word: str, speaker: Speaker, rng: np.random.Generator, snr_db: float) -> np.ndarray:
    """One 1-second clip of ``word`` spoken by ``speaker`` over background noise."""
    segments = _WORDS[word]
    total = int(rng.uniform(0.45, 0.7) * speaker.tempo * SAMPLE_RATE)
    parts = []
    for kind, a, b, frac in segments:
        n = max(64, int(total * frac))
        if kind == "v":
            seg = _voiced(n, speaker.f0, a * speaker.formant_scale, b * speaker.formant_scale, rng)
        else:
            seg = _noise_band(n, a * speaker.formant_scale, min(b * speaker.formant_scale, 7900), rng)
        seg = seg / (np.sqrt(np.mean(seg ** 2)) + 1e-12)
        ramp = np.minimum(1.0, np.minimum(np.arange(n), np.arange(n)[::-1]) / 160.0)
        parts.append(seg * ramp)
    voice = np.concatenate(parts)
    voice *= speaker.level / (np.abs(voice).max() + 1e-12)
    clip = np.zeros(CLIP_SAMPLES)
    start = rng.integers(0, max(1, CLIP_SAMPLES - len(voice)))
    clip[start:start + len(voice)] = voice[:CLIP_SAMPLES - start]
    noise = rng.standard_normal(CLIP_SAMPLES)
    sig_pow = np.mean(voice ** 2)
    noise *= np.sqrt(sig_pow / 10 ** (snr_db / 10))
    out = clip + noise
    return np.clip(out / max(1.0, np.abs(out).max() / 0.99), -1.0, 1.0)


def write_toy_corpus(root, per_class: int = 100, num_speakers: int = 60, seed: int = 0,
                     classes: Sequence[str] = DESK_CLASSES, snr_db: tuple[float, float] = (5.0, 25.0)) -> Path:
    """Write ``root/<word>/<speaker>_nohash_<n>.wav`` for every class; returns ``root``."""
    unknown = sorted(set(classes) - set(_WORDS))
    if unknown:
        raise ValueError(f"no toy pronunciation for {unknown}")
    root = Path(root)
    rng = np.random.default_rng(seed)
    speakers = [make_speaker(i, rng) for i in range(num_speakers)]
    for word in classes:
        d = root / word
        d.mkdir(parents=True, exist_ok=True)
        uses: dict[str, int] = {}
        for _ in range(per_class):
            spk = speakers[rng.integers(num_speakers)]
            n = uses.get(spk.name, 0)
            uses[spk.name] = n + 1
            clip = synth_word(word, spk, rng, rng.uniform(*snr_db))
            write_wav(d / f"{spk.name}_nohash_{n}.wav", clip)
    return root
