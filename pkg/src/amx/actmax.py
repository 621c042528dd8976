"""Gradient-ascent activation maximization, directly on features or through a decoder.

Both maximizers ascend the *pre-softmax* logit of the target class with a
fixed step and stop per sample once the target softmax probability reaches
``target_prob_stop``.  They run on batches: every sample is independent
(the objective is a sum of per-sample logits) and drops out of the active
set when it stops.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import Graph, Tensor
from .data import LabeledExample
from .errors import ConfigError, ContractError, NumericError
from .features import GRID_TINY, N_FRAMES, N_MELS, write_grid_csv
from .models import AutoencoderModel, ClassifierModel, encoder_forward

MODES = ("direct", "latent")
DEFAULT_LR = {"direct": 0.05, "latent": 0.1}


@dataclass
class MaxConfig:
    learning_rate: float | None = None  # None picks the per-mode default
    max_iters: int = 500
    target_prob_stop: float = 0.99
    clamp_inputs: bool = True

    def __post_init__(self):
        if self.learning_rate is not None and self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.max_iters < 0:
            raise ConfigError(f"max_iters must be >= 0, got {self.max_iters}")

    def lr(self, mode: str) -> float:
        return DEFAULT_LR[mode] if self.learning_rate is None else self.learning_rate


@dataclass
class ModelBundle:
    classifier: ClassifierModel
    autoencoder: AutoencoderModel | None = None
    separate: ClassifierModel | None = None


@dataclass
class MaximizationResult:
    mode: str
    target: int
    start: np.ndarray            # grid (direct) or latent code (latent)
    start_grid: np.ndarray       # x: the grid the run started from (dec(z0) in latent mode)
    maximized: np.ndarray        # x-hat
    additive_noise: np.ndarray   # x - x-hat, float64
    trajectory: list[float]      # target logit before each step and at x-hat
    iterations_used: int
    reached_stop: bool
    final_prob: float
    final_latent: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"mode": self.mode, "target": self.target, "iterations_used": self.iterations_used,
                "reached_stop": self.reached_stop, "final_prob": self.final_prob,
                "trajectory": list(self.trajectory), **self.meta}


def _softmax64(logits: np.ndarray) -> np.ndarray:
    z = logits.astype(np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def project_grid(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and flush values below 2**-24 to zero (keeps grid differences exact)."""
    x = np.clip(x, 0.0, 1.0)
    x[x < GRID_TINY] = 0.0
    return x


def _ascend(start: np.ndarray, targets: np.ndarray, lr: float, cfg: MaxConfig,
            evaluate: Callable[[np.ndarray, np.ndarray, bool], tuple[np.ndarray, np.ndarray, np.ndarray]],
            project: Callable[[np.ndarray], np.ndarray] | None):
    """Shared per-sample ascent loop.

    ``evaluate(state, targets, with_grad)`` returns ``(logits, grad, grid)`` for
    the given rows; ``grid`` is the classifier input actually scored.
    """
    n = len(start)
    state = start.copy()
    traj: list[list[float]] = [[] for _ in range(n)]
    iters = np.zeros(n, dtype=np.int64)
    reached = np.zeros(n, dtype=bool)
    final_prob = np.zeros(n)
    first_grid: list[np.ndarray | None] = [None] * n
    last_grid: list[np.ndarray | None] = [None] * n
    active = np.arange(n)
    for it in range(cfg.max_iters + 1):
        if active.size == 0:
            break
        try:
            logits, grad, grid = evaluate(state[active], targets[active], it < cfg.max_iters)
        except NumericError as exc:
            raise NumericError(f"maximization iteration {it}: {exc}") from exc
        probs = _softmax64(logits)
        rows = np.arange(active.size)
        h = logits[rows, targets[active]]
        p = probs[rows, targets[active]]
        for r, j in enumerate(active):
            traj[j].append(float(h[r]))
            if it == 0:
                first_grid[j] = grid[r].copy()
            last_grid[j] = grid[r]
        hit = p >= cfg.target_prob_stop
        done = hit | (it == cfg.max_iters)
        reached[active[hit]] = True
        iters[active[done]] = it
        final_prob[active[done]] = p[done]
        moving = ~done
        if moving.any():
            idx = active[moving]
            with np.errstate(over="ignore", invalid="ignore"):  # caught as NumericError next iteration
                step = (lr * grad[moving]).astype(state.dtype, copy=False)
                nxt = state[idx] + step
            state[idx] = project(nxt) if project is not None else nxt
        active = active[moving]
    return state, traj, iters, reached, final_prob, first_grid, last_grid


def _check_targets(targets: np.ndarray, k: int) -> None:
    if ((targets < 0) | (targets >= k)).any():
        raise ContractError(f"target class out of range [0, {k})")


def maximize_direct_batch(clf: ClassifierModel, x0: np.ndarray, targets: Sequence[int],
                          cfg: MaxConfig | None = None) -> list[MaximizationResult]:
    """Ascend ``x <- clamp01(x + lr * grad_x logit_target)`` for each grid in ``x0``."""
    cfg = cfg or MaxConfig()
    x0 = np.asarray(x0, dtype=clf.dtype)
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    if x0.ndim != 3 or len(x0) != len(targets):
        raise ContractError(f"expected (B, H, W) starts with B targets, got {x0.shape} and {targets.shape}")
    _check_targets(targets, clf.num_classes)

    def evaluate(x, tgt, with_grad):
        g = Graph(grad=with_grad)
        xt = Tensor(x, requires_grad=with_grad)
        logits = clf.logits(g, xt)
        grad = None
        if with_grad:
            g.backward(g.sum(g.pick(logits, tgt)))
            grad = xt.grad
        return logits.data, grad, x

    project = project_grid if cfg.clamp_inputs else None
    final, traj, iters, reached, probs, _, _ = _ascend(x0, targets, cfg.lr("direct"), cfg, evaluate, project)
    results = []
    for j in range(len(x0)):
        noise = x0[j].astype(np.float64) - final[j].astype(np.float64)
        results.append(MaximizationResult("direct", int(targets[j]), x0[j].copy(), x0[j].copy(), final[j].copy(),
                                          noise, traj[j], int(iters[j]), bool(reached[j]), float(probs[j])))
    return results


def maximize_direct(clf: ClassifierModel, x0: np.ndarray, target: int,
                    cfg: MaxConfig | None = None) -> MaximizationResult:
    return maximize_direct_batch(clf, np.asarray(x0)[None], [target], cfg)[0]


def maximize_latent_batch(clf: ClassifierModel, dec: AutoencoderModel, z0: np.ndarray, targets: Sequence[int],
                          cfg: MaxConfig | None = None) -> list[MaximizationResult]:
    """Ascend ``z <- z + lr * grad_z logit_target(clf(dec(z)))``; ``z`` is never clamped."""
    cfg = cfg or MaxConfig()
    z0 = np.asarray(z0, dtype=dec.dtype)
    targets = np.asarray(targets, dtype=np.intp).reshape(-1)
    if z0.ndim != 2 or len(z0) != len(targets):
        raise ContractError(f"expected (B, latent) starts with B targets, got {z0.shape} and {targets.shape}")
    _check_targets(targets, clf.num_classes)

    def evaluate(z, tgt, with_grad):
        g = Graph(grad=with_grad)
        zt = Tensor(z, requires_grad=with_grad)
        x = dec.decode(g, zt)
        if x.shape[-2:] != (N_MELS, N_FRAMES) and isinstance(dec, AutoencoderModel):
            raise ContractError(f"decoder output shape {x.shape} does not match classifier input")
        logits = clf.logits(g, x)
        grad = None
        if with_grad:
            g.backward(g.sum(g.pick(logits, tgt)))
            grad = zt.grad
        return logits.data, grad, x.data

    final, traj, iters, reached, probs, first, last = _ascend(z0, targets, cfg.lr("latent"), cfg, evaluate, None)
    results = []
    for j in range(len(z0)):
        x_start, x_hat = first[j], last[j].copy()
        noise = x_start.astype(np.float64) - x_hat.astype(np.float64)
        results.append(MaximizationResult("latent", int(targets[j]), z0[j].copy(), x_start, x_hat, noise, traj[j],
                                          int(iters[j]), bool(reached[j]), float(probs[j]),
                                          final_latent=final[j].copy()))
    return results


def maximize_latent(clf: ClassifierModel, dec: AutoencoderModel, z0: np.ndarray, target: int,
                    cfg: MaxConfig | None = None) -> MaximizationResult:
    return maximize_latent_batch(clf, dec, np.asarray(z0)[None], [target], cfg)[0]


# --------------------------------------------------------------------------
# protocols
# --------------------------------------------------------------------------

def _check_mode(mode: str, models: ModelBundle) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "latent" and models.autoencoder is None:
        raise ContractError("latent mode needs an autoencoder")


def noise_start(mode: str, models: ModelBundle, seed) -> np.ndarray:
    """Seeded start: uniform(0, 1) grid (direct) or standard-normal latent code (latent)."""
    rng = np.random.default_rng(seed)
    if mode == "direct":
        return project_grid(rng.uniform(0.0, 1.0, size=(N_MELS, N_FRAMES)).astype(models.classifier.dtype))
    return rng.standard_normal(models.autoencoder.latent_dim).astype(models.autoencoder.dtype)


def _run(mode: str, models: ModelBundle, starts: np.ndarray, targets, cfg: MaxConfig | None):
    if mode == "direct":
        return maximize_direct_batch(models.classifier, starts, targets, cfg)
    return maximize_latent_batch(models.classifier, models.autoencoder, starts, targets, cfg)


def noise_to_class_batch(mode: str, models: ModelBundle, targets: Sequence[int], seeds: Sequence,
                         cfg: MaxConfig | None = None) -> list[MaximizationResult]:
    _check_mode(mode, models)
    if len(targets) != len(seeds):
        raise ContractError(f"{len(targets)} targets but {len(seeds)} seeds")
    starts = np.stack([noise_start(mode, models, s) for s in seeds])
    results = _run(mode, models, starts, targets, cfg)
    for r, s in zip(results, seeds):
        r.meta["seed"] = s if isinstance(s, int) else list(s)
        r.meta["protocol"] = "noise-to-class"
    return results


def noise_to_class(mode: str, models: ModelBundle, target: int, seed, cfg: MaxConfig | None = None
                   ) -> MaximizationResult:
    return noise_to_class_batch(mode, models, [target], [seed], cfg)[0]


def noise_protocol(mode: str, models: ModelBundle, per_class: int, seed: int, cfg: MaxConfig | None = None,
                   batch_size: int = 64, classes: Sequence[int] | None = None) -> dict[int, list[MaximizationResult]]:
    """``per_class`` seeded noise starts for every class; sample ``i`` of class ``c`` uses seed ``[seed, c, i]``."""
    classes = range(models.classifier.num_classes) if classes is None else classes
    out: dict[int, list[MaximizationResult]] = {}
    for c in classes:
        seeds = [[seed, c, i] for i in range(per_class)]
        out[c] = []
        for b in range(0, per_class, batch_size):
            chunk = seeds[b:b + batch_size]
            out[c].extend(noise_to_class_batch(mode, models, [c] * len(chunk), chunk, cfg))
    return out


def class_to_class_batch(mode: str, models: ModelBundle, examples: Sequence[LabeledExample],
                         cfg: MaxConfig | None = None) -> list[MaximizationResult]:
    """Maximize each example toward its own label (latent mode starts from its encoding)."""
    _check_mode(mode, models)
    if not examples:
        return []
    targets = [ex.label for ex in examples]
    grids = np.stack([ex.features for ex in examples])
    if mode == "direct":
        results = maximize_direct_batch(models.classifier, grids, targets, cfg)
    else:
        z0 = encoder_forward(models.autoencoder, grids.astype(models.autoencoder.dtype))
        results = maximize_latent_batch(models.classifier, models.autoencoder, z0, targets, cfg)
    for r, ex in zip(results, examples):
        r.meta.update({"protocol": "class-to-class", "speaker_id": ex.speaker_id, "path": ex.path})
    return results


def class_to_class(mode: str, models: ModelBundle, example: LabeledExample,
                   cfg: MaxConfig | None = None) -> MaximizationResult:
    return class_to_class_batch(mode, models, [example], cfg)[0]


def additive_noise(r: MaximizationResult) -> np.ndarray:
    """``x - x_hat``; in latent mode ``x`` is the decoded start."""
    return r.additive_noise


def energy_concentration(noise: np.ndarray, top_fraction: float = 0.01) -> float:
    """Share of total squared energy held by the top ``top_fraction`` of cells."""
    e = np.sort(np.square(np.asarray(noise, dtype=np.float64)).ravel())[::-1]
    total = e.sum()
    if total == 0:
        return 0.0
    k = max(1, int(round(top_fraction * e.size)))
    return float(e[:k].sum() / total)


def write_result(r: MaximizationResult, out_dir, stem: str, cfg: MaxConfig | None = None) -> tuple[Path, Path]:
    """JSON record plus the maximized grid as a CSV sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"{stem}.csv"
    json_path = out_dir / f"{stem}.json"
    write_grid_csv(csv_path, r.maximized)
    record = {"config": asdict(cfg or MaxConfig()), **r.summary(), "maximized_csv": csv_path.name}
    json_path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return json_path, csv_path
