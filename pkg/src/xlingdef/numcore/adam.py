"""Adam optimizer over named parameter dicts."""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
              state: AdamState) -> None:
    """One Adam update, in place. Moment buffers are created lazily and
    keyed by parameter name; a shape change for a known name is an error."""
    state.step_count += 1
    t = state.step_count
    for name in sorted(grads):
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ValueError(
                f"grad shape {g.shape} vs param {name} shape {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros(p.data.size)
            state.v[name] = np.zeros(p.data.size)
        # flat views: params are C-contiguous so the update lands in place
        kernels.adam_update(p.data.reshape(-1),
                            np.ascontiguousarray(g).reshape(-1),
                            state.m[name], state.v[name],
                            t, state.lr, state.beta1, state.beta2, state.eps)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for g in grads.values():
        total += float(np.dot(g.ravel(), g.ravel()))
    norm = float(np.sqrt(total))
    if norm > max_norm and norm > 0.0:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm
