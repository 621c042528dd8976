"""Transfer evaluation against a separately seeded classifier, and latent-shift diagnostics."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .actmax import MaxConfig, MaximizationResult, ModelBundle, class_to_class_batch, energy_concentration
from .data import LabeledExample, stack
from .errors import ContractError, EvaluationError
from .models import ClassifierModel, encoder_forward, predict
from .tsne import TSNEResult, tsne

PHASES = ("before", "after")


def _check_same_k(a: ClassifierModel, b: ClassifierModel) -> None:
    if a.num_classes != b.num_classes:
        raise ContractError(f"classifiers disagree on class count: {a.num_classes} vs {b.num_classes}")


def success_flags(original: ClassifierModel, separate: ClassifierModel, grids: np.ndarray,
                  targets: Sequence[int]) -> np.ndarray:
    """Vectorised success test: both classifiers must argmax to the target."""
    _check_same_k(original, separate)
    grids = np.asarray(grids)
    targets = np.asarray(targets)
    if len(grids) == 0:
        return np.zeros(0, dtype=bool)
    return (predict(original, grids) == targets) & (predict(separate, grids) == targets)


def maximization_success(original: ClassifierModel, separate: ClassifierModel, x_hat: np.ndarray,
                         target: int) -> bool:
    return bool(success_flags(original, separate, np.asarray(x_hat)[None], [target])[0])


@dataclass
class TransferGrid:
    matrix: np.ndarray          # (K, K), row = maximization target, column = separate-classifier decision
    class_names: list[str]
    counts: np.ndarray          # samples per row

    @property
    def mean_diagonal(self) -> float:
        return float(np.mean(np.diag(self.matrix)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["target"] + list(self.class_names))
            for name, row in zip(self.class_names, self.matrix):
                w.writerow([name] + [repr(float(v)) for v in row])


def transfer_grid(separate: ClassifierModel, samples: Mapping[int, np.ndarray],
                  class_names: Sequence[str] | None = None) -> TransferGrid:
    """Row ``r`` holds the separate classifier's decision distribution over row-``r`` samples."""
    k = separate.num_classes
    names = list(class_names or separate.class_names or [str(c) for c in range(k)])
    if len(names) != k:
        raise ContractError(f"{len(names)} class names for a {k}-class classifier")
    matrix = np.zeros((k, k))
    counts = np.zeros(k, dtype=np.int64)
    for r in range(k):
        grids = samples.get(r)
        if grids is None or len(grids) == 0:
            raise EvaluationError(f"transfer grid row for class {names[r]!r} has no samples")
        pred = predict(separate, np.asarray(grids))
        hist = np.bincount(pred, minlength=k).astype(np.float64)
        counts[r] = len(pred)
        matrix[r] = hist / counts[r]
    return TransferGrid(matrix, names, counts)


@dataclass
class ModeSummary:
    mode: str
    runs: int
    original_rate: float       # original classifier argmax == target
    stop_rate: float           # reached the probability threshold
    transfer_rate: float       # original and separate both hit the target
    mean_diagonal: float
    mean_energy_top1: float
    mean_iterations: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def summarize_mode(models: ModelBundle, results: Mapping[int, list[MaximizationResult]],
                   class_names: Sequence[str] | None = None) -> tuple[ModeSummary, TransferGrid]:
    if models.separate is None:
        raise ContractError("transfer evaluation needs a separate classifier")
    flat = [r for c in sorted(results) for r in results[c]]
    if not flat:
        raise EvaluationError("no maximization results to summarize")
    grids = np.stack([r.maximized for r in flat])
    targets = np.array([r.target for r in flat])
    orig_hit = predict(models.classifier, grids) == targets
    both = success_flags(models.classifier, models.separate, grids, targets)
    grid = transfer_grid(models.separate, {c: np.stack([r.maximized for r in rs]) for c, rs in results.items() if rs},
                         class_names)
    summary = ModeSummary(
        mode=flat[0].mode,
        runs=len(flat),
        original_rate=float(orig_hit.mean()),
        stop_rate=float(np.mean([r.reached_stop for r in flat])),
        transfer_rate=float(both.mean()),
        mean_diagonal=grid.mean_diagonal,
        mean_energy_top1=float(np.mean([energy_concentration(r.additive_noise) for r in flat])),
        mean_iterations=float(np.mean([r.iterations_used for r in flat])),
    )
    return summary, grid


# --------------------------------------------------------------------------
# latent-shift diagnostics
# --------------------------------------------------------------------------

@dataclass
class EmbeddingPoint:
    x: float
    y: float
    command: str
    speaker: str
    phase: str
    misclassified: bool


@dataclass
class ShiftRow:
    index: int
    command: str
    speaker: str
    misclassified: bool
    displacement: float
    iterations_used: int
    reached_stop: bool


@dataclass
class LatentShiftReport:
    points: list[EmbeddingPoint]
    rows: list[ShiftRow]
    tsne: TSNEResult

    def mean_displacement(self, misclassified: bool) -> float:
        vals = [r.displacement for r in self.rows if r.misclassified == misclassified]
        return float(np.mean(vals)) if vals else float("nan")

    def write_embedding_csv(self, path) -> None:
        write_embedding_csv(self.points, path)

    def write_shift_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "command", "speaker", "misclassified", "displacement", "iterations_used",
                        "reached_stop"])
            for r in self.rows:
                w.writerow([r.index, r.command, r.speaker, int(r.misclassified), repr(r.displacement),
                            r.iterations_used, int(r.reached_stop)])


def write_embedding_csv(points: Sequence[EmbeddingPoint], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "command", "speaker", "phase", "misclassified"])
        for p in points:
            w.writerow([repr(p.x), repr(p.y), p.command, p.speaker, p.phase, int(p.misclassified)])


def embed_points(latents: np.ndarray, commands: Sequence[str], speakers: Sequence[str], phases: Sequence[str],
                 misclassified: Sequence[bool], perplexity: float = 30.0, iters: int = 1000,
                 seed: int = 0) -> tuple[list[EmbeddingPoint], TSNEResult]:
    res = tsne(latents, perplexity=perplexity, iters=iters, seed=seed)
    pts = [EmbeddingPoint(float(x), float(y), c, s, p, bool(m))
           for (x, y), c, s, p, m in zip(res.embedding, commands, speakers, phases, misclassified)]
    return pts, res


def latent_shift_report(models: ModelBundle, examples: Sequence[LabeledExample], cfg: MaxConfig | None = None,
                        perplexity: float = 30.0, iters: int = 1000, seed: int = 0,
                        class_names: Sequence[str] | None = None) -> LatentShiftReport:
    """Class-to-class latent maximization of ``examples`` plus one joint t-SNE of before/after codes.

    ``misclassified`` refers to the original classifier on the untouched features.
    """
    if models.autoencoder is None:
        raise ContractError("latent-shift report needs an autoencoder")
    if not examples:
        raise EvaluationError("latent-shift report needs at least one example")
    names = list(class_names or models.classifier.class_names or
                 [str(c) for c in range(models.classifier.num_classes)])
    x, y = stack(examples)
    wrong = predict(models.classifier, x) != y
    results = class_to_class_batch("latent", models, examples, cfg)
    before = np.stack([r.start for r in results]).astype(np.float64)
    after = np.stack([r.final_latent for r in results]).astype(np.float64)
    disp = np.linalg.norm(after - before, axis=1)
    rows = [ShiftRow(i, names[ex.label], ex.speaker_id, bool(wrong[i]), float(disp[i]), r.iterations_used,
                     r.reached_stop) for i, (ex, r) in enumerate(zip(examples, results))]
    n = len(examples)
    commands = [names[ex.label] for ex in examples] * 2
    speakers = [ex.speaker_id for ex in examples] * 2
    phases = ["before"] * n + ["after"] * n
    flags = list(wrong) * 2
    points, res = embed_points(np.concatenate([before, after]), commands, speakers, phases, flags,
                               perplexity, iters, seed)
    return LatentShiftReport(points, rows, res)


def latent_codes(models: ModelBundle, examples: Sequence[LabeledExample]) -> np.ndarray:
    return encoder_forward(models.autoencoder, stack(examples)[0].astype(models.autoencoder.dtype))
