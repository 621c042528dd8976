"""Exact O(n^2) t-SNE with per-point perplexity calibration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

P_FLOOR = 1e-12


@dataclass
class TSNEResult:
    embedding: np.ndarray        # (n, 2), centered
    kl_history: np.ndarray       # KL(P || Q) at the start of every iteration, true (unexaggerated) P
    conditional_p: np.ndarray    # row-normalized p_{j|i}
    betas: np.ndarray            # per-row precision 1 / (2 sigma^2)


def pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    sq = np.einsum("ij,ij->i", x, x)
    d = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _row_entropy(d: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    p = np.exp(-beta * d)
    s = p.sum()
    h = np.log(s) + beta * float(d @ p) / s
    return h, p / s


def conditional_probabilities(x: np.ndarray, perplexity: float = 30.0, tol: float = 1e-5,
                              max_steps: int = 200) -> tuple[np.ndarray, np.ndarray]:
    """Binary-search each row's Gaussian precision so its perplexity matches ``perplexity``.

    Returns ``(P, betas)`` with ``P[i, j] = p_{j|i}`` and a zero diagonal.
    """
    n = len(x)
    d_all = pairwise_sq_dists(np.asarray(x, dtype=np.float64))
    target = np.log(perplexity)
    p_cond = np.zeros((n, n))
    betas = np.ones(n)
    for i in range(n):
        d = np.delete(d_all[i], i)
        d = d - d.min()  # shift-invariant; avoids underflow of every term
        beta, lo, hi = 1.0, 0.0, np.inf
        scale = float(np.median(d)) or 1.0
        beta = 1.0 / scale
        for _ in range(max_steps):
            h, row = _row_entropy(d, beta)
            if abs(np.exp(h) - perplexity) < tol:
                break
            if h > target:  # too flat: sharpen
                lo = beta
                beta = beta * 2.0 if hi == np.inf else 0.5 * (beta + hi)
            else:
                hi = beta
                beta = 0.5 * (beta + lo)
        betas[i] = beta
        p_cond[i, np.arange(n) != i] = row
    return p_cond, betas


def row_perplexities(p_cond: np.ndarray) -> np.ndarray:
    """exp(Shannon entropy) of each row, recomputed directly from the probabilities."""
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p_cond > 0, p_cond * np.log(p_cond), 0.0)
    return np.exp(-terms.sum(axis=1))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    mask = p > 0
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def tsne(latents, perplexity: float = 30.0, iters: int = 1000, seed: int = 0, learning_rate: float = 200.0,
         exaggeration: float = 12.0, exaggeration_iters: int = 250, momentum: float = 0.5,
         final_momentum: float = 0.8, init_sigma: float = 1e-4) -> TSNEResult:
    """Embed ``latents`` (``(n, d)``) in two dimensions.

    Plain momentum gradient descent: early exaggeration and the lower momentum
    apply for the first ``exaggeration_iters`` iterations.
    """
    x = np.asarray(latents, dtype=np.float64)
    n = len(x)
    if x.ndim != 2 or n < 3 * perplexity:
        raise ContractError(f"t-SNE with perplexity {perplexity} needs at least {3 * perplexity:g} points, "
                            f"got {n}")
    p_cond, betas = conditional_probabilities(x, perplexity)
    p = (p_cond + p_cond.T) / (2.0 * n)
    p = np.maximum(p, P_FLOOR)
    np.fill_diagonal(p, 0.0)

    rng = np.random.default_rng(seed)
    y = rng.normal(0.0, init_sigma, size=(n, 2))
    velocity = np.zeros_like(y)
    kl = np.zeros(iters)
    for it in range(iters):
        num = 1.0 / (1.0 + pairwise_sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), P_FLOOR)
        np.fill_diagonal(q, 0.0)
        kl[it] = kl_divergence(p, q)
        early = it < exaggeration_iters
        pq = (exaggeration * p if early else p) - q
        w = pq * num
        grad = 4.0 * (w.sum(axis=1)[:, None] * y - w @ y)
        velocity = (momentum if early else final_momentum) * velocity - learning_rate * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    y = y - y.mean(axis=0)
    return TSNEResult(y, kl, p_cond, betas)


def trailing_mean(values: np.ndarray, window: int = 50) -> np.ndarray:
    """Mean over each full window ending at positions ``window-1 .. len-1``."""
    c = np.cumsum(np.concatenate([[0.0], np.asarray(values, dtype=np.float64)]))
    return (c[window:] - c[:-window]) / window
