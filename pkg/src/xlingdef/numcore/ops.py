"""Differentiable operations over Tensor.

Every op computes its forward result eagerly and, when a Graph is active
and an input requires grad, records a closure that routes the output
gradient to the inputs. Backward closures write fresh arrays or rely on
accumulate() to copy views, so buffers are never aliased across nodes.
"""

import numpy as np

from . import kernels
from .tensor import Tensor, accumulate, active_graph, record


class ShapeError(ValueError):
    pass


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _rec(*inputs: Tensor) -> bool:
    return active_graph() is not None and any(t.requires_grad for t in inputs)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise / arithmetic
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=_rec(a, b))

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(g, b.data.shape))

    record(out, bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, requires_grad=_rec(a, b))

    def bwd(g):
        accumulate(a, _unbroadcast(g, a.data.shape))
        accumulate(b, _unbroadcast(-g, b.data.shape))

    record(out, bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=_rec(a, b))

    def bwd(g):
        accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    record(out, bwd)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c, requires_grad=_rec(a))
    record(out, lambda g: accumulate(a, g * c))
    return out


def add_const(a: Tensor, c) -> Tensor:
    """a + constant (no gradient into c). c may broadcast."""
    out = Tensor(a.data + c, requires_grad=_rec(a))
    record(out, lambda g: accumulate(a, _unbroadcast(g, a.data.shape)))
    return out


def mul_const(a: Tensor, c) -> Tensor:
    """a * constant mask/array (no gradient into c)."""
    out = Tensor(a.data * c, requires_grad=_rec(a))
    record(out, lambda g: accumulate(a, _unbroadcast(g * c, a.data.shape)))
    return out


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0), requires_grad=_rec(a))
    record(out, lambda g: accumulate(a, g * (a.data > 0.0)))
    return out


def square(a: Tensor) -> Tensor:
    out = Tensor(a.data * a.data, requires_grad=_rec(a))
    record(out, lambda g: accumulate(a, 2.0 * g * a.data))
    return out


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    out = Tensor(y, requires_grad=_rec(a))

    def bwd(g):
        # subgradient 0 at y == 0 so a zero-distance kink cannot emit NaN
        safe = np.where(y > 0.0, y, 1.0)
        accumulate(a, np.where(y > 0.0, 0.5 * g / safe, 0.0))

    record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    out = Tensor(a.data.reshape(shape), requires_grad=_rec(a))
    record(out, lambda g: accumulate(a, g.reshape(a.data.shape)))
    return out


def transpose_last2(a: Tensor) -> Tensor:
    return swap_axes(a, -1, -2)


def swap_axes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    out = Tensor(np.swapaxes(a.data, ax1, ax2), requires_grad=_rec(a))
    record(out, lambda g: accumulate(a, np.ascontiguousarray(np.swapaxes(g, ax1, ax2))))
    return out


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_rec(*tensors))

    def bwd(g):
        start = 0
        for t in tensors:
            n = t.data.shape[axis]
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(start, start + n)
            accumulate(t, g[tuple(sl)])
            start += n

    record(out, bwd)
    return out


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    out = Tensor(a.data[tuple(sl)], requires_grad=_rec(a))

    def bwd(g):
        full = np.zeros_like(a.data)
        full[tuple(sl)] = g
        accumulate(a, full)

    record(out, bwd)
    return out


def index_axis(a: Tensor, axis: int, i: int) -> Tensor:
    """Select one index along `axis`, collapsing it."""
    out = Tensor(np.take(a.data, i, axis=axis), requires_grad=_rec(a))

    def bwd(g):
        full = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = i
        full[tuple(sl)] = g
        accumulate(a, full)

    record(out, bwd)
    return out


def broadcast_rows(a: Tensor, batch: int) -> Tensor:
    """[n, d] -> [batch, n, d] by repetition; gradient sums over batch."""
    out = Tensor(np.broadcast_to(a.data, (batch,) + a.data.shape),
                 requires_grad=_rec(a))
    record(out, lambda g: accumulate(a, g.sum(axis=0)))
    return out


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------


def sum_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = Tensor(a.data.sum(axis=axis, keepdims=keepdims), requires_grad=_rec(a))

    def bwd(g):
        if axis is None:
            accumulate(a, np.broadcast_to(g, a.data.shape))
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            accumulate(a, np.broadcast_to(ge, a.data.shape))

    record(out, bwd)
    return out


def mean_axis(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return scale(sum_axis(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max along axis; gradient flows to the argmax only, ties to the
    lowest index (np.argmax convention)."""
    idx = np.argmax(a.data, axis=axis)
    out = Tensor(np.max(a.data, axis=axis), requires_grad=_rec(a))

    def bwd(g):
        full = np.zeros_like(a.data)
        np.put_along_axis(full, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis=axis)
        accumulate(a, full)

    record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """np.matmul semantics on >=2D operands, batch dims broadcast."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2D operands, got {a.shape} x {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data), requires_grad=_rec(a, b))

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            accumulate(b, _unbroadcast(gb, b.data.shape))

    record(out, bwd)
    return out


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x [..., d] @ w [d, k] (+ b [k]); folds leading dims into one GEMM."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: {x.shape} x {w.shape}")
    d, k = w.shape
    lead = x.data.shape[:-1]
    x2 = x.data.reshape(-1, d)
    y = x2 @ w.data
    if b is not None:
        y += b.data
    rg = _rec(x, w) or (b is not None and _rec(b))
    out = Tensor(y.reshape(lead + (k,)), requires_grad=rg)

    def bwd(g):
        g2 = g.reshape(-1, k)
        if w.requires_grad:
            accumulate(w, x2.T @ g2)
        if x.requires_grad:
            accumulate(x, (g2 @ w.data.T).reshape(x.data.shape))
        if b is not None and b.requires_grad:
            accumulate(b, g2.sum(axis=0))

    record(out, bwd)
    return out


# ---------------------------------------------------------------------------
# row-wise kernels (softmax, layer norm, cross entropy, embedding)
# ---------------------------------------------------------------------------


def softmax(a: Tensor) -> Tensor:
    """Stable softmax along the last axis."""
    n = a.shape[-1]
    rows = a.data.reshape(-1, n)
    p = kernels.softmax_rows(rows)
    out = Tensor(p.reshape(a.data.shape), requires_grad=_rec(a))

    def bwd(g):
        gx = kernels.softmax_rows_bwd(p, np.ascontiguousarray(g.reshape(-1, n)))
        accumulate(a, gx.reshape(a.data.shape))

    record(out, bwd)
    return out


def masked_softmax(a: Tensor, mask: np.ndarray) -> Tensor:
    """softmax(a + mask) along the last axis; mask is an additive constant
    (0 for visible, a large negative number for hidden)."""
    return softmax(add_const(a, mask))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row normalization over the last axis, then affine."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gain.shape}/{bias.shape} vs d={d}")
    rows = np.ascontiguousarray(x.data.reshape(-1, d))
    y, mean, rstd = kernels.layernorm_rows(rows, gain.data, bias.data, eps)
    out = Tensor(y.reshape(x.data.shape), requires_grad=_rec(x, gain, bias))

    def bwd(g):
        g2 = np.ascontiguousarray(g.reshape(-1, d))
        gx, ggain, gbias = kernels.layernorm_rows_bwd(g2, rows, gain.data, mean, rstd)
        accumulate(x, gx.reshape(x.data.shape))
        accumulate(gain, ggain)
        accumulate(bias, gbias)

    record(out, bwd)
    return out


def cross_entropy(logits: Tensor, targets, pad_index: int) -> Tensor:
    """Mean negative log-likelihood over non-pad positions.

    logits: [t, V]; targets: t integer class indices; positions whose
    target equals pad_index are excluded from both sum and count.
    """
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [t, V] logits, got {logits.shape}")
    t, v = logits.shape
    tg = np.asarray(targets, dtype=np.int64)
    if tg.shape != (t,):
        raise ShapeError(f"targets shape {tg.shape} vs {t} positions")
    live = tg != pad_index
    if np.any((tg[live] < 0) | (tg[live] >= v)):
        bad = tg[live][(tg[live] < 0) | (tg[live] >= v)][0]
        raise IndexError(f"target {bad} out of range [0, {v})")
    nll_sum, count, probs = kernels.cross_entropy_fwd(
        np.ascontiguousarray(logits.data), tg, pad_index)
    if count == 0:
        raise ValueError("empty loss: every position is padded")
    out = Tensor(np.float64(nll_sum / count), requires_grad=_rec(logits))

    def bwd(g):
        gl = kernels.cross_entropy_bwd(probs, tg, pad_index, 1.0 / count,
                                       float(np.asarray(g).reshape(-1)[0]))
        accumulate(logits, gl)

    record(out, bwd)
    return out


def embedding(table: Tensor, ids) -> Tensor:
    """Row gather: out[..., :] = table[ids[...]]."""
    idx = np.asarray(ids, dtype=np.int64)
    out = Tensor(table.data[idx], requires_grad=_rec(table))

    def bwd(g):
        if not table.requires_grad:
            return
        gt = np.zeros_like(table.data)
        kernels.embedding_grad(
            np.ascontiguousarray(g.reshape(-1, table.data.shape[1])),
            idx.reshape(-1), gt)
        accumulate(table, gt)

    record(out, bwd)
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; identity when p == 0."""
    if p <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p) / (1.0 - p)
    return mul_const(a, keep)
