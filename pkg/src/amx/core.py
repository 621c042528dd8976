"""Reverse-mode automatic differentiation over numpy arrays.

A :class:`Graph` records every operation applied to :class:`Tensor` objects in
insertion order; :meth:`Graph.backward` walks that list in reverse.  Each
operation is stored as a pure ``forward`` function plus a ``backward`` rule, so
the graph can also be replayed with perturbed leaves for finite-difference
checks (:func:`check_gradients`).

Every op accepts an optional leading batch axis.  Single-sample shapes follow
the layer contracts (``dense``: ``(n,)``, ``conv2d``: ``(C, H, W)``); batched
shapes prepend ``B``.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

CE_EPS = 1e-12


class Tensor:
    """Dense array with an optional accumulated gradient."""

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if not arr.flags.c_contiguous:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        if not np.isfinite(arr).all():
            raise NumericError(f"tensor {name or ''} has non-finite values".replace("  ", " "))
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self.grad: np.ndarray | None = None
        # weak, so graphs free by refcount instead of waiting for the cycle collector
        self._producer: weakref.ref | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._producer is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[[np.ndarray, Any, Sequence[bool]], Sequence[np.ndarray | None]]
    cache: Any = None
    # discrete decision taken by the forward pass (relu sign, pool argmax);
    # finite differences are unreliable when it flips
    branch: Callable[[Any], np.ndarray] | None = None


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{op}: produced non-finite values")


_F32_TINY = np.finfo(np.float32).tiny


def _flush_subnormal(a: np.ndarray) -> np.ndarray:
    # float32 subnormals make BLAS and ufuncs an order of magnitude slower
    if a.dtype == np.float32:
        a[np.abs(a) < _F32_TINY] = 0.0
    return a


def _batched(x: np.ndarray, ndim: int, op: str) -> tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[None], False
    if x.ndim == ndim + 1:
        return x, True
    raise DimensionError(f"{op}: expected {ndim}-d or batched {ndim + 1}-d input, got shape {x.shape}")


# --------------------------------------------------------------------------
# primitive forward / backward rules
# --------------------------------------------------------------------------

def _dense_fwd(x, w, b):
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"dense: input shape {x.shape} does not conform to weights shape {w.shape} "
                             f"and bias shape {b.shape}")
    return x @ w.T + b, (x, w)


def _dense_bwd(g, cache, needs):
    x, w = cache
    gx = g @ w if needs[0] else None
    if x.ndim == 1:
        gw = np.outer(g, x) if needs[1] else None
        gb = g if needs[2] else None
    else:
        gw = g.T @ x if needs[1] else None
        gb = g.sum(axis=0) if needs[2] else None
    return gx, gw, gb


def _same_pads(size: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


def _conv_fwd(x, k, b, *, stride: int, padding: str):
    x4, batched = _batched(x, 3, "conv2d")
    if k.ndim != 4 or k.shape[1] != x4.shape[1] or b.shape != (k.shape[0],):
        raise DimensionError(f"conv2d: input shape {x.shape} does not conform to kernels shape {k.shape} "
                             f"and bias shape {b.shape}")
    n_b, n_c, h, w = x4.shape
    n_f, _, kh, kw = k.shape
    if padding == "valid":
        ph, pw = (0, 0), (0, 0)
    elif padding == "same":
        ph, pw = _same_pads(h, kh, stride), _same_pads(w, kw, stride)
    else:
        raise ContractError(f"conv2d: padding must be 'valid' or 'same', got {padding!r}")
    if kh > h + sum(ph) or kw > w + sum(pw):
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input "
                             f"{h + sum(ph)}x{w + sum(pw)} (input shape {x.shape}, kernels shape {k.shape})")
    xp = np.pad(x4, ((0, 0), (0, 0), ph, pw)) if sum(ph) + sum(pw) else x4
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    # rows (c, i, j), columns (b, y, x): keeps the innermost copy axis contiguous
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(n_c * kh * kw, n_b * ho * wo)
    kmat = k.reshape(n_f, -1)
    out = (kmat @ cols).reshape(n_f, n_b, ho, wo)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3)) + b[:, None, None]
    cache = (cols, kmat, k.shape, xp.shape, ph, pw, stride, batched)
    return (out if batched else out[0]), cache


def _conv_bwd(g, cache, needs):
    cols, kmat, kshape, xpshape, ph, pw, stride, batched = cache
    g4 = g if batched else g[None]
    n_b, n_f, ho, wo = g4.shape
    gm = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(n_f, -1)
    gk = (gm @ cols.T).reshape(kshape) if needs[1] else None
    gb = g4.sum(axis=(0, 2, 3)) if needs[2] else None
    gx = None
    if needs[0]:
        _, n_c, kh, kw = kshape
        gcols = (kmat.T @ gm).reshape(n_c, kh, kw, n_b, ho, wo)
        gxp = np.zeros((n_c, n_b, xpshape[2], xpshape[3]), dtype=g.dtype)
        hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + hspan:stride, j:j + wspan:stride] += gcols[:, i, j]
        gx = gxp[:, :, ph[0]:xpshape[2] - ph[1], pw[0]:xpshape[3] - pw[1]].transpose(1, 0, 2, 3)
        gx = np.ascontiguousarray(gx if batched else gx[0])
    return gx, gk, gb


def _pool_fwd(x, *, size: int):
    x4, batched = _batched(x, 3, "max_pool2d")
    n_b, n_c, h, w = x4.shape
    if h % size or w % size:
        raise DimensionError(f"max_pool2d: spatial dims {h}x{w} not divisible by pool size {size}")
    out = x4[:, :, ::size, ::size]
    idx = np.zeros(out.shape, dtype=np.int8 if size * size < 128 else np.intp)
    # strict '>' keeps the first row-major maximum on ties
    for k in range(1, size * size):
        v = x4[:, :, k // size::size, k % size::size]
        idx = np.where(v > out, np.int8(k) if idx.dtype == np.int8 else k, idx)
        out = np.maximum(out, v)
    out = np.ascontiguousarray(out)
    return (out if batched else out[0]), (idx, x4.shape, size, batched)


def _pool_bwd(g, cache, needs):
    idx, shape, size, batched = cache
    g4 = g if batched else g[None]
    gx = np.zeros(shape, dtype=g.dtype)
    for k in range(size * size):
        gx[:, :, k // size::size, k % size::size] = np.where(idx == k, g4, 0)
    return ((gx if batched else gx[0]),)


def _relu_fwd(x):
    return np.maximum(x, 0), x


def _relu_bwd(g, x, needs):
    return (g * (x > 0),)


def _sigmoid_fwd(x):
    y = _flush_subnormal(expit(x))
    return y, y


def _sigmoid_bwd(g, y, needs):
    return (g * y * (1 - y),)


def _softmax_fwd(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)
    return y, y


def _softmax_bwd(g, y, needs):
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def _xent_fwd(p, *, target):
    if p.ndim == 1:
        rows = np.zeros(1, dtype=np.intp)
        tgt = np.atleast_1d(np.asarray(target, dtype=np.intp))
    elif p.ndim == 2:
        rows = np.arange(p.shape[0])
        tgt = np.asarray(target, dtype=np.intp).reshape(-1)
        if tgt.shape != (p.shape[0],):
            raise DimensionError(f"cross_entropy: {tgt.shape[0]} targets for probs shape {p.shape}")
    else:
        raise DimensionError(f"cross_entropy: probs must be 1-d or 2-d, got shape {p.shape}")
    k = p.shape[-1]
    if (tgt < 0).any() or (tgt >= k).any():
        raise IndexError(f"cross_entropy: target class out of range [0, {k})")
    p2 = p.reshape(-1, k)
    picked = p2[rows, tgt]
    loss = -np.log(picked + CE_EPS).mean()
    return np.asarray(loss, dtype=p.dtype), (p.shape, rows, tgt, picked)


def _xent_bwd(g, cache, needs):
    shape, rows, tgt, picked = cache
    gp = np.zeros((len(rows), shape[-1]), dtype=g.dtype)
    gp[rows, tgt] = -g / (len(rows) * (picked + CE_EPS))
    return (gp.reshape(shape),)


def _mse_fwd(a, b):
    if a.shape != b.shape:
        raise DimensionError(f"mse: shape {a.shape} != shape {b.shape}")
    d = a - b
    return np.asarray(np.mean(d * d), dtype=a.dtype), d


def _mse_bwd(g, d, needs):
    ga = g * 2.0 * d / d.size
    return (ga if needs[0] else None), (-ga if needs[1] else None)


def _reshape_fwd(x, *, shape):
    try:
        return x.reshape(shape), x.shape
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot reshape {x.shape} into {shape}") from exc


def _reshape_bwd(g, shape, needs):
    return (g.reshape(shape),)


def _upsample_fwd(x, *, factor: int):
    if x.ndim < 2:
        raise DimensionError(f"upsample2d: needs at least 2 dims, got shape {x.shape}")
    return x.repeat(factor, axis=-2).repeat(factor, axis=-1), (x.shape, factor)


def _upsample_bwd(g, cache, needs):
    shape, f = cache
    lead = g.shape[:-2]
    h, w = shape[-2], shape[-1]
    return (g.reshape(*lead, h, f, w, f).sum(axis=(-3, -1)),)


def _pick_fwd(x, *, index):
    if x.ndim == 1:
        i = int(index)
        if not 0 <= i < x.shape[0]:
            raise IndexError(f"pick: index {i} out of range for shape {x.shape}")
        return np.asarray(x[i]), (x.shape, i)
    idx = np.asarray(index, dtype=np.intp).reshape(-1)
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise DimensionError(f"pick: {idx.shape[0]} indices for shape {x.shape}")
    if (idx < 0).any() or (idx >= x.shape[1]).any():
        raise IndexError(f"pick: index out of range for shape {x.shape}")
    return x[np.arange(x.shape[0]), idx], (x.shape, idx)


def _pick_bwd(g, cache, needs):
    shape, idx = cache
    gx = np.zeros(shape, dtype=g.dtype)
    if len(shape) == 1:
        gx[idx] = g
    else:
        gx[np.arange(shape[0]), idx] = g
    return (gx,)


def _sum_fwd(x):
    return np.asarray(x.sum()), x.shape


def _sum_bwd(g, shape, needs):
    return (np.broadcast_to(g, shape).copy(),)


def _affine_fwd(x, *, scale: float, shift: float):
    return x * scale + shift, None


def _affine_bwd(g, cache, needs, *, scale: float):
    return (g * scale,)


def _identity_fwd(x):
    return x.copy(), None


def _identity_bwd(g, cache, needs):
    return (g,)


# --------------------------------------------------------------------------
# graph
# --------------------------------------------------------------------------

class Graph:
    """Insertion-ordered record of operations.

    With ``grad=False`` nothing is recorded and op outputs never require
    gradients; use it for inference so intermediate caches are freed.
    """

    def __init__(self, grad: bool = True):
        self.grad = grad
        self.nodes: list[Node] = []
        self._leaves: dict[int, Tensor] = {}

    def _record(self, op, inputs, forward, backward, branch=None) -> Tensor:
        for t in inputs:
            if not isinstance(t, Tensor):
                raise ContractError(f"{op}: inputs must be Tensor objects, got {type(t).__name__}")
        with np.errstate(over="ignore", invalid="ignore"):  # reported below as NumericError
            out_data, cache = forward(*(t.data for t in inputs))
        _check_finite(out_data, op)
        needs_grad = self.grad and any(t.requires_grad for t in inputs)
        out = Tensor(out_data, requires_grad=needs_grad)
        if needs_grad:
            node = Node(op, tuple(inputs), out, forward, backward, cache, branch)
            out._producer = weakref.ref(node)
            self.nodes.append(node)
            for t in inputs:
                if t.is_leaf and t.requires_grad:
                    self._leaves.setdefault(id(t), t)
        return out

    # layers ---------------------------------------------------------------
    def dense(self, x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
        return self._record("dense", (x, weights, bias), _dense_fwd, _dense_bwd)

    def conv2d(self, x: Tensor, kernels: Tensor, bias: Tensor, stride: int = 1, padding: str = "valid") -> Tensor:
        if stride < 1:
            raise ContractError(f"conv2d: stride must be positive, got {stride}")
        fwd = _bind(_conv_fwd, stride=stride, padding=padding)
        return self._record("conv2d", (x, kernels, bias), fwd, _conv_bwd)

    def max_pool2d(self, x: Tensor, size: int) -> Tensor:
        if size < 1:
            raise ContractError(f"max_pool2d: size must be positive, got {size}")
        return self._record("max_pool2d", (x,), _bind(_pool_fwd, size=size), _pool_bwd, branch=lambda c: c[0])

    def relu(self, x: Tensor) -> Tensor:
        return self._record("relu", (x,), _relu_fwd, _relu_bwd, branch=lambda c: np.sign(c).astype(np.int8))

    def sigmoid(self, x: Tensor) -> Tensor:
        return self._record("sigmoid", (x,), _sigmoid_fwd, _sigmoid_bwd)

    def softmax(self, logits: Tensor) -> Tensor:
        if logits.data.ndim == 0 or logits.shape[-1] < 1:
            raise DimensionError(f"softmax: needs K >= 1, got shape {logits.shape}")
        return self._record("softmax", (logits,), _softmax_fwd, _softmax_bwd)

    def cross_entropy(self, probs: Tensor, target) -> Tensor:
        """Mean of ``-ln(p[target] + 1e-12)`` over the batch."""
        return self._record("cross_entropy", (probs,), _bind(_xent_fwd, target=target), _xent_bwd)

    def mse(self, a: Tensor, b: Tensor) -> Tensor:
        return self._record("mse", (a, b), _mse_fwd, _mse_bwd)

    # shape plumbing ---------------------------------------------------------
    def reshape(self, x: Tensor, shape: Sequence[int]) -> Tensor:
        return self._record("reshape", (x,), _bind(_reshape_fwd, shape=tuple(shape)), _reshape_bwd)

    def upsample2d(self, x: Tensor, factor: int = 2) -> Tensor:
        """Nearest-neighbour upsampling of the last two axes."""
        return self._record("upsample2d", (x,), _bind(_upsample_fwd, factor=factor), _upsample_bwd)

    def pick(self, x: Tensor, index) -> Tensor:
        """Select ``x[index]`` (1-d) or ``x[b, index[b]]`` per row (2-d)."""
        return self._record("pick", (x,), _bind(_pick_fwd, index=index), _pick_bwd)

    def sum(self, x: Tensor) -> Tensor:
        return self._record("sum", (x,), _sum_fwd, _sum_bwd)

    def affine(self, x: Tensor, scale: float, shift: float) -> Tensor:
        """Elementwise ``x * scale + shift`` with constant coefficients."""
        return self._record("affine", (x,), _bind(_affine_fwd, scale=float(scale), shift=float(shift)),
                            _bind(_affine_bwd, scale=float(scale)))

    def identity(self, x: Tensor) -> Tensor:
        return self._record("identity", (x,), _identity_fwd, _identity_bwd)

    # differentiation --------------------------------------------------------
    @property
    def leaves(self) -> list[Tensor]:
        """Gradient-requiring leaf tensors, in first-use order."""
        return list(self._leaves.values())

    def backward(self, loss: Tensor) -> None:
        """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf in the graph.

        Leaves that do not influence ``loss`` receive zero gradients.  Calling
        this twice without :meth:`zero_grad` doubles every gradient.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaf_grads: dict[int, np.ndarray] = {}
        if loss.is_leaf and loss.requires_grad:
            self._leaves.setdefault(id(loss), loss)
            leaf_grads[id(loss)] = np.ones_like(loss.data)
        for node in reversed(self.nodes):
            g = pending.pop(id(node.output), None)
            if g is None:
                continue
            needs = [t.requires_grad for t in node.inputs]
            for t, gi in zip(node.inputs, node.backward(g, node.cache, needs)):
                if gi is None or not t.requires_grad:
                    continue
                gi = _flush_subnormal(gi if gi.flags.writeable else gi.copy())
                store = leaf_grads if t.is_leaf else pending
                prev = store.get(id(t))
                store[id(t)] = gi if prev is None else prev + gi
        for key, t in self._leaves.items():
            total = leaf_grads.get(key)
            if total is None:
                total = np.zeros_like(t.data)
            total = np.asarray(total, dtype=t.data.dtype).reshape(t.shape)
            _check_finite(total, f"backward (grad of {t.name or 'tensor'})")
            t.grad = total.copy() if t.grad is None else t.grad + total

    def zero_grad(self) -> None:
        for t in self._leaves.values():
            t.zero_grad()

    def replay(self, loss: Tensor) -> tuple[float, list[np.ndarray]]:
        """Re-run every recorded forward from current leaf values.

        Returns the loss value and the discrete branch decisions of kinked ops.
        """
        values: dict[int, np.ndarray] = {}
        branches: list[np.ndarray] = []
        for node in self.nodes:
            arrays = [t.data if t.is_leaf else values[id(t)] for t in node.inputs]
            out, cache = node.forward(*arrays)
            values[id(node.output)] = out
            if node.branch is not None:
                branches.append(node.branch(cache))
        if loss.is_leaf:
            return float(loss.data.reshape(-1)[0]), branches
        return float(values[id(loss)].reshape(-1)[0]), branches


def _bind(fn, **attrs):
    def bound(*arrays):
        return fn(*arrays, **attrs)
    bound.__name__ = fn.__name__
    return bound


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------

@dataclass
class TensorCheck:
    name: str
    size: int
    checked: int
    excluded: int
    max_abs_err: float
    max_rel_err: float


@dataclass
class GradCheckReport:
    max_abs_err: float
    max_rel_err: float
    per_tensor: list[TensorCheck] = field(default_factory=list)

    def passed(self, rel_tol: float = 1e-4) -> bool:
        return self.max_rel_err < rel_tol

    def table(self) -> str:
        lines = [f"{'tensor':<20} {'size':>7} {'checked':>7} {'excluded':>8} {'max_abs':>11} {'max_rel':>11}"]
        for row in self.per_tensor:
            lines.append(f"{row.name:<20} {row.size:>7} {row.checked:>7} {row.excluded:>8} "
                         f"{row.max_abs_err:>11.3e} {row.max_rel_err:>11.3e}")
        return "\n".join(lines)


def check_gradients(graph: Graph, step: float = 1e-5, loss: Tensor | None = None,
                    rel_floor: float = 1e-6) -> GradCheckReport:
    """Compare backprop gradients with central differences on every leaf element.

    Relative error is ``|a - n| / max(|a|, |n|, rel_floor)``.  Elements whose
    perturbation flips a relu sign or a pool argmax (including relu inputs that
    sit exactly at 0) are excluded and counted.  Existing ``.grad`` values are
    left untouched.  Use float64 leaves.
    """
    if loss is None:
        if not graph.nodes:
            raise ContractError("check_gradients: graph is empty")
        loss = graph.nodes[-1].output
    if loss.data.size != 1:
        raise ContractError(f"check_gradients: loss must be scalar, got shape {loss.shape}")

    leaves = graph.leaves
    saved = [t.grad for t in leaves]
    for t in leaves:
        t.grad = None
    graph.backward(loss)
    analytic = [t.grad for t in leaves]
    for t, g in zip(leaves, saved):
        t.grad = g

    _, base_branches = graph.replay(loss)
    rows: list[TensorCheck] = []
    for i, (t, a_grad) in enumerate(zip(leaves, analytic)):
        flat = t.data.reshape(-1)
        a_flat = a_grad.reshape(-1)
        max_abs = max_rel = 0.0
        excluded = 0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            f_plus, br_plus = graph.replay(loss)
            flat[j] = orig - step
            f_minus, br_minus = graph.replay(loss)
            flat[j] = orig
            if not (_same_branches(base_branches, br_plus) and _same_branches(base_branches, br_minus)):
                excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2 * step)
            analytic_j = float(a_flat[j])
            err = abs(analytic_j - numeric)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / max(abs(analytic_j), abs(numeric), rel_floor))
        rows.append(TensorCheck(t.name or f"leaf{i}", flat.size, flat.size - excluded, excluded, max_abs, max_rel))
    return GradCheckReport(
        max_abs_err=max((r.max_abs_err for r in rows), default=0.0),
        max_rel_err=max((r.max_rel_err for r in rows), default=0.0),
        per_tensor=rows,
    )


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
