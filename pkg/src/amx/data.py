"""Corpus scanning, speaker-hash splits, batching and the synthetic fixture."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, IngestionError
from .features import N_FRAMES, N_MELS, canonical_grid, features_from_file

log = logging.getLogger(__name__)

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

FILENAME_RE = re.compile(r"^(?P<speaker>[^_]+)_nohash_(?P<n>\d+)\.wav$")

# the ten core command words used for the desk-scale subset
DESK_CLASSES = ("down", "go", "left", "no", "off", "on", "right", "stop", "up", "yes")


@dataclass
class LabeledExample:
    features: np.ndarray
    label: int
    speaker_id: str
    path: str = ""


@dataclass
class DatasetSplit:
    train: list[LabeledExample]
    val: list[LabeledExample]
    test: list[LabeledExample]
    class_names: list[str]
    report: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise ContractError(f"class names must be unique: {self.class_names}")
        k = len(self.class_names)
        for part in (self.train, self.val, self.test):
            bad = [ex.label for ex in part if not 0 <= ex.label < k]
            if bad:
                raise ContractError(f"labels {sorted(set(bad))} outside [0, {k})")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def speakers(self, part: str) -> set[str]:
        return {ex.speaker_id for ex in getattr(self, part)}


def fnv1a64(text: str) -> int:
    h = FNV_OFFSET
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * FNV_PRIME) & _MASK64
    return h


def assign_split(speaker_id: str, val_pct: int = 10, test_pct: int = 10) -> str:
    if val_pct < 0 or test_pct < 0 or val_pct + test_pct >= 100:
        raise ContractError(f"val_pct + test_pct must be < 100, got {val_pct} + {test_pct}")
    bucket = fnv1a64(speaker_id) % 100
    if bucket < val_pct:
        return "val"
    if bucket < val_pct + test_pct:
        return "test"
    return "train"


def stack(examples: Sequence[LabeledExample]) -> tuple[np.ndarray, np.ndarray]:
    """Features as ``(N, 80, 64)`` and labels as ``(N,)``."""
    if not examples:
        return np.zeros((0, N_MELS, N_FRAMES), dtype=np.float32), np.zeros(0, dtype=np.int64)
    return np.stack([ex.features for ex in examples]), np.array([ex.label for ex in examples], dtype=np.int64)


def _build_split(examples: list[LabeledExample], class_names: list[str], val_pct: int, test_pct: int,
                 report: dict) -> DatasetSplit:
    parts: dict[str, list[LabeledExample]] = {"train": [], "val": [], "test": []}
    counts = {name: {"train": 0, "val": 0, "test": 0} for name in class_names}
    for ex in examples:
        part = assign_split(ex.speaker_id, val_pct, test_pct)
        parts[part].append(ex)
        counts[class_names[ex.label]][part] += 1
    report = {**report, "counts": counts,
              "totals": {part: len(items) for part, items in parts.items()}}
    return DatasetSplit(parts["train"], parts["val"], parts["test"], class_names, report)


def scan_corpus(root, class_filter: Sequence[str] | None = None, max_per_class: int | None = None,
                val_pct: int = 10, test_pct: int = 10) -> DatasetSplit:
    """Read a Speech Commands style tree: ``root/<class>/<speaker>_nohash_<n>.wav``.

    Directories starting with ``_`` (e.g. ``_background_noise_``) are ignored.
    With ``max_per_class`` the first files in sorted order are kept.
    """
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"corpus root {root} is not a directory")
    available = sorted(p.name for p in root.iterdir() if p.is_dir() and not p.name.startswith("_"))
    if class_filter:
        missing = sorted(set(class_filter) - set(available))
        if missing:
            raise IngestionError(f"classes not found under {root}: {missing}")
        class_names = sorted(class_filter)
    else:
        class_names = available
    if len(class_names) < 2:
        raise IngestionError(f"need at least 2 classes under {root}, found {class_names}")

    examples: list[LabeledExample] = []
    skipped: list[str] = []
    for label, name in enumerate(class_names):
        files = sorted(p for p in (root / name).iterdir() if p.is_file() and p.suffix.lower() == ".wav")
        if not files:
            raise IngestionError(f"class directory {root / name} contains no WAV files")
        kept = 0
        for path in files:
            m = FILENAME_RE.match(path.name)
            if m is None:
                log.warning("skipping %s: filename does not match <speaker>_nohash_<n>.wav", path)
                skipped.append(str(path))
                continue
            if max_per_class is not None and kept >= max_per_class:
                break
            examples.append(LabeledExample(features_from_file(path), label, m["speaker"], str(path)))
            kept += 1
        if kept == 0:
            raise IngestionError(f"class directory {root / name} has no parseable clips")
    report = {"root": str(root), "class_names": class_names, "skipped_count": len(skipped), "skipped": skipped}
    return _build_split(examples, class_names, val_pct, test_pct, report)


def write_report(split: DatasetSplit, path) -> None:
    Path(path).write_text(json.dumps(split.report, indent=2, sort_keys=True) + "\n")


def band_center(c: int, num_classes: int) -> float:
    return (c + 1) * N_MELS / (num_classes + 1)


def synth_grid(c: int, num_classes: int, rng: np.random.Generator, noise_sigma: float = 0.05,
               band_width: float = 2.5) -> np.ndarray:
    rows = np.arange(N_MELS)[:, None]
    profile = np.exp(-0.5 * ((rows - band_center(c, num_classes)) / band_width) ** 2)
    amp = rng.uniform(0.6, 1.0)
    onset = rng.integers(0, 16)
    offset = min(N_FRAMES, onset + rng.integers(24, 48))
    env = np.zeros((1, N_FRAMES))
    env[0, onset:offset] = 1.0
    grid = amp * profile * env
    noise = rng.normal(0.0, noise_sigma, size=grid.shape) if noise_sigma > 0 else 0.0
    return canonical_grid(grid + noise)


def synth_dataset(num_classes: int, per_class: int, seed: int, noise_sigma: float = 0.05,
                  band_width: float = 2.5, val_pct: int = 10, test_pct: int = 10) -> DatasetSplit:
    """Band-per-class fixture: class ``c`` carries a horizontal band at row ``(c+1)*80/(K+1)``.

    Every clip gets its own pseudo-speaker so the speaker-hash split applies.
    """
    if num_classes < 2:
        raise ContractError(f"synth_dataset needs num_classes >= 2, got {num_classes}")
    rng = np.random.default_rng(seed)
    class_names = [f"band{c:02d}" for c in range(num_classes)]
    examples = []
    for c in range(num_classes):
        for i in range(per_class):
            grid = synth_grid(c, num_classes, rng, noise_sigma, band_width)
            examples.append(LabeledExample(grid, c, f"s{seed}c{c}n{i}", f"synthetic/{class_names[c]}/{i}"))
    report = {"synthetic": {"num_classes": num_classes, "per_class": per_class, "seed": seed,
                            "noise_sigma": noise_sigma, "band_width": band_width}}
    return _build_split(examples, class_names, val_pct, test_pct, report)


def batch_iter(items: Sequence, batch_size: int, shuffle_seed: int | None = None) -> Iterator:
    """Yield consecutive batches; the last one may be short.

    ``shuffle_seed`` permutes the order first.  numpy arrays are batched with
    fancy indexing, other sequences as lists.
    """
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    n = len(items)
    if n == 0:
        raise IngestionError("cannot iterate over an empty split")
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if isinstance(items, np.ndarray):
            yield items[idx]
        else:
            yield [items[i] for i in idx]
