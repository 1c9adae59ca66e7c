"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything the detector trains with runs through this module: float64
numpy arrays wrapped in :class:`Tensor`, a global :class:`Tape` that
records one entry per differentiable operation, and :func:`backward`,
which walks the tape in exact reverse recording order and accumulates
gradients. The operation set is deliberately small: just enough to
express linear maps, softmax, layer normalization, multi-head attention,
pooling, concatenation and the two-class cross-entropy loss.

A tape and its tensors belong to one logical training thread. Inference
should run inside :func:`no_grad`, which disables recording entirely.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

LOG_CLAMP = 1e-12  # floor applied to probabilities before log()


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """An operation produced NaN/Inf, or overflowed float64."""


class MissingGradientError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, what: str):
    # Fast path: any NaN/Inf poisons the sum. A finite array whose sum
    # overflows float64 is treated as out of domain as well.
    if not math.isfinite(float(arr.sum())):
        if np.isfinite(arr).all():
            raise NonFiniteError(f"{what}: magnitudes overflow float64 summation")
        raise NonFiniteError(f"{what}: non-finite values")


class Tensor:
    """Dense row-major float64 array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Recorded operations in execution order.

    Each entry is ``(out, inputs, backward_rule)`` where ``backward_rule``
    maps the output gradient to one gradient per input. Recording order
    is a topological order of the computation, so :func:`backward` can
    traverse entries strictly in reverse.
    """

    def __init__(self):
        self.entries: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self.enabled = True

    def reset(self):
        self.entries.clear()

    def __len__(self) -> int:
        return len(self.entries)


TAPE = Tape()


@contextmanager
def no_grad():
    """Disable tape recording within the block (pure inference)."""
    prev = TAPE.enabled
    TAPE.enabled = False
    try:
        yield
    finally:
        TAPE.enabled = prev


def _record(out: Tensor, inputs: tuple[Tensor, ...], backward_rule) -> Tensor:
    if TAPE.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        TAPE.entries.append((out, inputs, backward_rule))
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor recorded
    with ``requires_grad`` that ``loss`` depends on.

    Repeated calls without clearing gradients keep accumulating, so the
    gradient of a sum of losses equals the sum of the individual
    backward passes.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward root must be a scalar, got shape {loss.data.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, rule in reversed(TAPE.entries):
        g_out = grads.pop(id(out), None)
        if g_out is None:
            continue
        holders.pop(id(out), None)
        if out.requires_grad:
            out.grad = g_out if out.grad is None else out.grad + g_out
        for t, g in zip(inputs, rule(g_out)):
            if g is None:
                continue
            _check_finite(g, "gradient")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
                holders[key] = t
    for key, t in holders.items():
        if t.requires_grad:
            g = grads[key]
            t.grad = g if t.grad is None else t.grad + g


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------


def _require_2d(x: Tensor, op: str):
    if x.data.ndim != 2:
        raise ShapeError(f"{op} expects a 2-D tensor, got shape {x.data.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dims disagree: {a.data.shape} x {b.data.shape}")
    a_data, b_data = a.data, b.data
    out = Tensor(a_data @ b_data)
    _check_finite(out.data, "matmul output")

    def rule(g):
        return g @ b_data.T, a_data.T @ g

    return _record(out, (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a 1-D bias broadcast over the rows
    of a 2-D left operand."""
    if a.data.shape == b.data.shape:
        out = Tensor(a.data + b.data)
        _check_finite(out.data, "add output")

        def rule(g):
            return g, g

        return _record(out, (a, b), rule)
    if a.data.ndim == 2 and b.data.ndim == 1 and b.data.shape[0] == a.data.shape[1]:
        out = Tensor(a.data + b.data)
        _check_finite(out.data, "add output")

        def rule(g):
            return g, g.sum(axis=0)

        return _record(out, (a, b), rule)
    raise ShapeError(f"add shapes incompatible: {a.data.shape} vs {b.data.shape}")


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"mul shapes differ: {a.data.shape} vs {b.data.shape}")
    a_data, b_data = a.data, b.data
    out = Tensor(a_data * b_data)
    _check_finite(out.data, "mul output")

    def rule(g):
        return g * b_data, g * a_data

    return _record(out, (a, b), rule)


def scale(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data * c)
    _check_finite(out.data, "scale output")

    def rule(g):
        return (g * c,)

    return _record(out, (x,), rule)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0))

    def rule(g):
        return (g * mask,)

    return _record(out, (x,), rule)


def transpose(x: Tensor) -> Tensor:
    _require_2d(x, "transpose")
    out = Tensor(x.data.T.copy())

    def rule(g):
        return (g.T,)

    return _record(out, (x,), rule)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old_shape = x.data.shape
    out = Tensor(x.data.reshape(shape))

    def rule(g):
        return (g.reshape(old_shape),)

    return _record(out, (x,), rule)


def sum_all(x: Tensor) -> Tensor:
    shape = x.data.shape
    out = Tensor(x.data.sum())
    _check_finite(out.data, "sum output")

    def rule(g):
        return (np.broadcast_to(g, shape),)

    return _record(out, (x,), rule)


def mean_pool_rows(x: Tensor) -> Tensor:
    """Column means of a [T, d] tensor: pooling over the temporal axis."""
    _require_2d(x, "mean_pool_rows")
    rows = x.data.shape[0]
    out = Tensor(x.data.mean(axis=0))
    _check_finite(out.data, "mean_pool output")

    def rule(g):
        return (np.broadcast_to(g / rows, (rows, g.shape[0])),)

    return _record(out, (x,), rule)


def _concat(xs: list[Tensor] | tuple[Tensor, ...], axis: int, op: str) -> Tensor:
    if not xs:
        raise ShapeError(f"{op} needs at least one tensor")
    out = Tensor(np.concatenate([t.data for t in xs], axis=axis))
    sizes = [t.data.shape[axis] for t in xs]
    offsets = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _record(out, tuple(xs), rule)


def concat_rows(xs) -> Tensor:
    """Stack [Ti, d] tensors along the temporal axis."""
    for t in xs:
        _require_2d(t, "concat_rows")
    return _concat(xs, 0, "concat_rows")


def concat_cols(xs) -> Tensor:
    """Concatenate [T, di] tensors along the channel axis."""
    for t in xs:
        _require_2d(t, "concat_cols")
    return _concat(xs, 1, "concat_cols")


def concat_channels(xs) -> Tensor:
    """Concatenate 1-D feature vectors."""
    for t in xs:
        if t.data.ndim != 1:
            raise ShapeError(f"concat_channels expects 1-D tensors, got {t.data.shape}")
    return _concat(xs, 0, "concat_channels")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax with per-row max subtraction for stability."""
    _require_2d(x, "softmax_rows")
    _check_finite(x.data, "softmax input")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def rule(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _record(out, (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization (population variance) followed by affine."""
    _require_2d(x, "layer_norm")
    n = x.data.shape[1]
    if gamma.data.shape != (n,) or beta.data.shape != (n,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.data.shape}/{beta.data.shape} "
            f"do not match row width {n}"
        )
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    out = Tensor(xhat * gamma.data + beta.data)
    _check_finite(out.data, "layer_norm output")
    gamma_data = gamma.data

    def rule(g):
        dxhat = g * gamma_data
        dx = (inv / n) * (
            n * dxhat
            - dxhat.sum(axis=1, keepdims=True)
            - xhat * (dxhat * xhat).sum(axis=1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _record(out, (x, gamma, beta), rule)


def cross_entropy(probabilities: Tensor, label: int) -> Tensor:
    """Two-class cross entropy on an already-normalized distribution.

    The input must be a [p_real, p_fake] probability pair. Arguments of
    the log are clamped at ``LOG_CLAMP`` so a fully saturated softmax
    yields a large finite loss instead of infinity.
    """
    p = probabilities.data
    if p.shape != (2,):
        raise ShapeError(f"cross_entropy expects a [2] distribution, got {p.shape}")
    if label not in (0, 1):
        raise ValueError(f"label must be 0 or 1, got {label}")
    _check_finite(p, "cross_entropy input")
    if p.min() < -1e-9 or p.max() > 1.0 + 1e-9 or abs(p.sum() - 1.0) > 1e-6:
        raise ValueError(f"input is not a probability distribution: {p}")
    picked = 1 if label == 1 else 0
    clamped = max(float(p[picked]), LOG_CLAMP)
    out = Tensor(-math.log(clamped))

    def rule(g):
        grad = np.zeros(2)
        if p[picked] > LOG_CLAMP:
            grad[picked] = -1.0 / clamped
        return (g * grad,)

    return _record(out, (probabilities,), rule)


@dataclass
class MHAParams:
    """Per-head query/key/value projections plus the output projection.

    ``wq[i]``, ``wk[i]``, ``wv[i]`` are [d_model, d_head]; ``wo`` is
    [d_model, d_model]. Projections carry no bias, matching the original
    Transformer formulation.
    """

    wq: list[Tensor]
    wk: list[Tensor]
    wv: list[Tensor]
    wo: Tensor

    @property
    def n_heads(self) -> int:
        return len(self.wq)

    def tensors(self) -> list[Tensor]:
        return [*self.wq, *self.wk, *self.wv, self.wo]


def multi_head_attention(
    q: Tensor,
    k: Tensor,
    v: Tensor,
    params: MHAParams,
    n_heads: int,
    attn_sink: list | None = None,
) -> Tensor:
    """Scaled dot-product attention with per-head projections.

    Per head: softmax(q Wq (k Wk)^T / sqrt(d_head)) (v Wv); head outputs
    are concatenated along channels and passed through ``wo``. When
    ``attn_sink`` is a list, the stacked per-head attention weights
    (shape [n_heads, Tq, Tk], detached) are appended to it.
    """
    _require_2d(q, "multi_head_attention")
    d_model = q.data.shape[1]
    if d_model % n_heads != 0:
        raise ShapeError(f"d_model {d_model} not divisible by {n_heads} heads")
    if params.n_heads != n_heads:
        raise ShapeError(f"params carry {params.n_heads} heads, expected {n_heads}")
    if k.data.shape != v.data.shape:
        raise ShapeError(f"key/value shapes differ: {k.data.shape} vs {v.data.shape}")
    d_head = d_model // n_heads
    inv_sqrt = 1.0 / math.sqrt(d_head)
    heads = []
    captured = []
    for i in range(n_heads):
        qi = matmul(q, params.wq[i])
        ki = matmul(k, params.wk[i])
        vi = matmul(v, params.wv[i])
        weights = softmax_rows(scale(matmul(qi, transpose(ki)), inv_sqrt))
        if attn_sink is not None:
            captured.append(weights.data.copy())
        heads.append(matmul(weights, vi))
    merged = heads[0] if n_heads == 1 else concat_cols(heads)
    if attn_sink is not None:
        attn_sink.append(np.stack(captured))
    return matmul(merged, params.wo)
