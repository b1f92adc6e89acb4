"""Hot numeric kernels with two interchangeable backends.

The numba backend JIT-compiles fused loops for the row-wise kernels that
dominate non-GEMM runtime (softmax, layer norm, cross entropy, Adam,
embedding scatter). The numpy backend is a pure-vectorized fallback with
identical signatures. Selection:

    XLINGDEF_KERNELS=auto    numba if importable, else numpy (default)
    XLINGDEF_KERNELS=numba   require numba, raise if missing
    XLINGDEF_KERNELS=numpy   force the pure-numpy path

All kernels operate on contiguous float64 arrays. Matrix products are not
here: those go through BLAS via np.matmul either way.
"""

import math
import os

import numpy as np

_MODE = os.environ.get("XLINGDEF_KERNELS", "auto").lower()
if _MODE not in ("auto", "numba", "numpy"):
    raise ValueError(f"XLINGDEF_KERNELS must be auto|numba|numpy, got {_MODE!r}")

_HAS_NUMBA = False
if _MODE in ("auto", "numba"):
    try:
        from numba import njit

        _HAS_NUMBA = True
    except ImportError:
        if _MODE == "numba":
            raise

USE_NUMBA = _HAS_NUMBA and _MODE != "numpy"


def backend_name() -> str:
    return "numba" if USE_NUMBA else "numpy"


# -----------------------------------------------------------------------------
# numpy reference implementations
# -----------------------------------------------------------------------------


def _softmax_rows_np(x):
    """x (R, n) -> probs (R, n), stable row softmax."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_rows_bwd_np(p, g):
    """dL/dx for p = softmax(x): p * (g - sum(p*g))."""
    dot = (p * g).sum(axis=1, keepdims=True)
    return p * (g - dot)


def _layernorm_rows_np(x, gain, bias, eps):
    """x (R, d) -> (y, mean (R,), rstd (R,)). Population variance + eps."""
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[:, None]) * rstd[:, None]
    return xhat * gain + bias, mean, rstd


def _layernorm_rows_bwd_np(g, x, gain, mean, rstd):
    """Returns (gx, ggain, gbias) for y = gain*xhat + bias."""
    d = x.shape[1]
    xhat = (x - mean[:, None]) * rstd[:, None]
    ggain = (g * xhat).sum(axis=0)
    gbias = g.sum(axis=0)
    gxhat = g * gain
    # d xhat / dx folded: gx = rstd * (gxhat - mean(gxhat) - xhat * mean(gxhat*xhat))
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, ggain, gbias


def _cross_entropy_np(logits, targets, pad_index):
    """Returns (nll_sum, count, probs). NLL summed over non-pad rows."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    live = targets != pad_index
    count = int(live.sum())
    rows = np.nonzero(live)[0]
    lse = (np.log(z) + m)[:, 0]
    nll_sum = float((lse[rows] - logits[rows, targets[rows]]).sum())
    return nll_sum, count, probs


def _cross_entropy_bwd_np(probs, targets, pad_index, inv_count, gout):
    """dL/dlogits for mean NLL: (p - onehot)/count on non-pad rows, 0 on pad."""
    g = probs * (gout * inv_count)
    live = targets != pad_index
    rows = np.nonzero(live)[0]
    g[rows, targets[rows]] -= gout * inv_count
    g[~live] = 0.0
    return g


def _adam_update_np(p, g, m, v, t, lr, beta1, beta2, eps):
    """In-place Adam with bias correction; arrays flat f64."""
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    mhat = m / (1.0 - beta1**t)
    vhat = v / (1.0 - beta2**t)
    p -= lr * mhat / (np.sqrt(vhat) + eps)


def _embedding_grad_np(gout, ids, gtable):
    """Scatter-add gout (N, d) into gtable rows selected by ids (N,)."""
    np.add.at(gtable, ids, gout)


# -----------------------------------------------------------------------------
# numba kernels (same contracts)
# -----------------------------------------------------------------------------

if USE_NUMBA:

    @njit(cache=True)
    def _softmax_rows_nb(x):
        R, n = x.shape
        out = np.empty((R, n))
        for r in range(R):
            m = x[r, 0]
            for j in range(1, n):
                if x[r, j] > m:
                    m = x[r, j]
            s = 0.0
            for j in range(n):
                e = math.exp(x[r, j] - m)
                out[r, j] = e
                s += e
            inv = 1.0 / s
            for j in range(n):
                out[r, j] *= inv
        return out

    @njit(cache=True)
    def _softmax_rows_bwd_nb(p, g):
        R, n = p.shape
        out = np.empty((R, n))
        for r in range(R):
            dot = 0.0
            for j in range(n):
                dot += p[r, j] * g[r, j]
            for j in range(n):
                out[r, j] = p[r, j] * (g[r, j] - dot)
        return out

    @njit(cache=True)
    def _layernorm_rows_nb(x, gain, bias, eps):
        R, d = x.shape
        y = np.empty((R, d))
        mean = np.empty(R)
        rstd = np.empty(R)
        for r in range(R):
            mu = 0.0
            for j in range(d):
                mu += x[r, j]
            mu /= d
            var = 0.0
            for j in range(d):
                t = x[r, j] - mu
                var += t * t
            var /= d
            rs = 1.0 / math.sqrt(var + eps)
            mean[r] = mu
            rstd[r] = rs
            for j in range(d):
                y[r, j] = (x[r, j] - mu) * rs * gain[j] + bias[j]
        return y, mean, rstd

    @njit(cache=True)
    def _layernorm_rows_bwd_nb(g, x, gain, mean, rstd):
        R, d = x.shape
        gx = np.empty((R, d))
        ggain = np.zeros(d)
        gbias = np.zeros(d)
        for r in range(R):
            mu = mean[r]
            rs = rstd[r]
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                xh = (x[r, j] - mu) * rs
                gh = g[r, j] * gain[j]
                ggain[j] += g[r, j] * xh
                gbias[j] += g[r, j]
                m1 += gh
                m2 += gh * xh
            m1 /= d
            m2 /= d
            for j in range(d):
                xh = (x[r, j] - mu) * rs
                gh = g[r, j] * gain[j]
                gx[r, j] = rs * (gh - m1 - xh * m2)
        return gx, ggain, gbias

    @njit(cache=True)
    def _cross_entropy_nb(logits, targets, pad_index):
        R, V = logits.shape
        probs = np.empty((R, V))
        nll_sum = 0.0
        count = 0
        for r in range(R):
            m = logits[r, 0]
            for j in range(1, V):
                if logits[r, j] > m:
                    m = logits[r, j]
            s = 0.0
            for j in range(V):
                e = math.exp(logits[r, j] - m)
                probs[r, j] = e
                s += e
            inv = 1.0 / s
            for j in range(V):
                probs[r, j] *= inv
            t = targets[r]
            if t != pad_index:
                nll_sum += math.log(s) + m - logits[r, t]
                count += 1
        return nll_sum, count, probs

    @njit(cache=True)
    def _cross_entropy_bwd_nb(probs, targets, pad_index, inv_count, gout):
        R, V = probs.shape
        g = np.empty((R, V))
        scale = gout * inv_count
        for r in range(R):
            t = targets[r]
            if t == pad_index:
                for j in range(V):
                    g[r, j] = 0.0
            else:
                for j in range(V):
                    g[r, j] = probs[r, j] * scale
                g[r, t] -= scale
        return g

    @njit(cache=True)
    def _adam_update_nb(p, g, m, v, t, lr, beta1, beta2, eps):
        n = p.shape[0]
        c1 = 1.0 - beta1**t
        c2 = 1.0 - beta2**t
        for i in range(n):
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
            p[i] -= lr * (m[i] / c1) / (math.sqrt(v[i] / c2) + eps)

    @njit(cache=True)
    def _embedding_grad_nb(gout, ids, gtable):
        N, d = gout.shape
        for i in range(N):
            r = ids[i]
            for j in range(d):
                gtable[r, j] += gout[i, j]

    softmax_rows = _softmax_rows_nb
    softmax_rows_bwd = _softmax_rows_bwd_nb
    layernorm_rows = _layernorm_rows_nb
    layernorm_rows_bwd = _layernorm_rows_bwd_nb
    cross_entropy_fwd = _cross_entropy_nb
    cross_entropy_bwd = _cross_entropy_bwd_nb
    adam_update = _adam_update_nb
    embedding_grad = _embedding_grad_nb
else:
    softmax_rows = _softmax_rows_np
    softmax_rows_bwd = _softmax_rows_bwd_np
    layernorm_rows = _layernorm_rows_np
    layernorm_rows_bwd = _layernorm_rows_bwd_np
    cross_entropy_fwd = _cross_entropy_np
    cross_entropy_bwd = _cross_entropy_bwd_np
    adam_update = _adam_update_np
    embedding_grad = _embedding_grad_np

NUMPY_IMPLS = {
    "softmax_rows": _softmax_rows_np,
    "softmax_rows_bwd": _softmax_rows_bwd_np,
    "layernorm_rows": _layernorm_rows_np,
    "layernorm_rows_bwd": _layernorm_rows_bwd_np,
    "cross_entropy_fwd": _cross_entropy_np,
    "cross_entropy_bwd": _cross_entropy_bwd_np,
    "adam_update": _adam_update_np,
    "embedding_grad": _embedding_grad_np,
}
