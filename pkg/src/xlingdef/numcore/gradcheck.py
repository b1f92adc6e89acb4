"""Finite-difference verification of tape gradients."""

from dataclasses import dataclass

import numpy as np

from .tensor import Graph, Tensor, backward


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance

    def __str__(self) -> str:
        lines = [f"{'PASS' if self.passed else 'FAIL'} "
                 f"(max rel err {self.max_rel_err:.3e}, tol {self.tolerance:.0e})"]
        for name in sorted(self.per_param):
            lines.append(f"  {name:40s} {self.per_param[name]:.3e}")
        return "\n".join(lines)


def grad_check(model_fn, params: dict[str, Tensor], tolerance: float = 1e-5,
               h: float = 1e-5, max_entries_per_param: int | None = None,
               rng: np.random.Generator | None = None,
               floor: float = 1e-8) -> GradCheckReport:
    """Compare tape gradients of the scalar model_fn() against central
    differences of step h, entry by entry.

    model_fn must be a deterministic closure over `params` returning a
    scalar Tensor. The error is relative above `floor` and absolute below
    it (entries smaller than the floor fall under central-difference
    resolution for losses of that scale, so they are held to
    tolerance * floor instead). max_entries_per_param subsamples large
    tensors (seeded rng required).
    """
    with Graph() as g:
        loss = model_fn()
        backward(loss, g)
    analytic = {}
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name} received no gradient")
        analytic[name] = p.grad.copy()
        p.grad = None

    per_param: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        a = analytic[name].reshape(-1)
        n = flat.size
        if max_entries_per_param is not None and n > max_entries_per_param:
            if rng is None:
                raise ValueError("subsampling requires an rng")
            idxs = rng.choice(n, size=max_entries_per_param, replace=False)
        else:
            idxs = range(n)
        worst = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(model_fn().item())
            flat[i] = orig - h
            f_minus = float(model_fn().item())
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(a[i]), abs(numeric), floor)
            worst = max(worst, abs(a[i] - numeric) / denom)
        per_param[name] = worst
    return GradCheckReport(per_param, max(per_param.values(), default=0.0),
                           tolerance)
