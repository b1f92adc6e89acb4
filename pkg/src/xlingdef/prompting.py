"""Prompt-state extraction, pooling, and the contrastive objective.

The encoder's hidden rows at the prompt slots summarize what the model
thinks the task and the language are. Pooling the n task rows into one
vector per example, then averaging within a same-language group, gives
one task vector and one language vector per group. The contrastive loss
pulls the two groups' task vectors together (they describe the same task)
while pushing each away from the language vectors, hinged at a margin and
sharpened by a temperature.
"""

from dataclasses import dataclass

import numpy as np

from .model import AssembledInput
from .numcore import Tensor, ops

POOLINGS = ("attention", "mean", "max")


@dataclass(frozen=True)
class ContrastiveConfig:
    margin: float = 1.0
    temperature: float = 0.16
    pooling: str = "attention"
    lam: float = 0.2
    symmetrize_negatives: bool = False

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.margin < 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling}")


@dataclass
class PromptStates:
    H_tp: Tensor  # [n, d] task-prompt rows
    h_lp: Tensor  # [d] language-prompt row


@dataclass
class ContrastiveOutput:
    d_p: float
    d_n: float
    loss: float
    loss_t: Tensor  # differentiable scalar for the training graph


def extract_prompt_states(h: Tensor, inp: AssembledInput) -> PromptStates:
    """Rows of h at the recorded prompt positions: slot 0 is the language
    prompt, slots 1..n the task prompt."""
    if inp.n_task == 0:
        raise ValueError("no task span: input was assembled in direct mode")
    lo, hi = inp.task_span
    return PromptStates(H_tp=ops.slice_axis(h, 0, lo, hi + 1),
                        h_lp=ops.index_axis(h, 0, inp.lang_pos))


def extract_prompt_states_batch(h: Tensor, n_task: int) -> tuple[Tensor, Tensor]:
    """Batched variant over [B, S, d]: returns (H_tp [B, n, d], h_lp [B, d])."""
    if n_task == 0:
        raise ValueError("no task span: batch was packed in direct mode")
    return (ops.slice_axis(h, 1, 1, 1 + n_task), ops.index_axis(h, 1, 0))


def pool(h_tp: Tensor, h_lp: Tensor, method: str) -> Tensor:
    """Collapse the n task rows to one vector. Attention scores each row
    by its dot product with the language row over sqrt(d)."""
    n, d = h_tp.shape
    if method == "mean":
        return ops.mean_axis(h_tp, axis=0)
    if method == "max":
        return ops.max_axis(h_tp, axis=0)
    if method == "attention":
        scores = ops.scale(ops.matmul(h_tp, ops.reshape(h_lp, (d, 1))),
                           1.0 / np.sqrt(d))
        w = ops.softmax(ops.reshape(scores, (1, n)))
        return ops.reshape(ops.matmul(w, h_tp), (d,))
    raise ValueError(f"unknown pooling method {method!r}")


def pool_batch(h_tp: Tensor, h_lp: Tensor, method: str) -> Tensor:
    """pool() over [B, n, d] and [B, d]; returns [B, d]."""
    b, n, d = h_tp.shape
    if method == "mean":
        return ops.mean_axis(h_tp, axis=1)
    if method == "max":
        return ops.max_axis(h_tp, axis=1)
    if method == "attention":
        scores = ops.scale(ops.matmul(h_tp, ops.reshape(h_lp, (b, d, 1))),
                           1.0 / np.sqrt(d))
        w = ops.softmax(ops.reshape(scores, (b, n)))
        return ops.reshape(ops.matmul(ops.reshape(w, (b, 1, n)), h_tp), (b, d))
    raise ValueError(f"unknown pooling method {method!r}")


def group_prompt_vectors(h_enc: Tensor, n_task: int, method: str) -> tuple[Tensor, Tensor]:
    """One task vector and one language vector for a same-language group:
    per-example pooling, then the arithmetic mean over the group."""
    h_tp, h_lp = extract_prompt_states_batch(h_enc, n_task)
    pooled = pool_batch(h_tp, h_lp, method)
    return ops.mean_axis(pooled, axis=0), ops.mean_axis(h_lp, axis=0)


def _l2(a: Tensor, b: Tensor) -> Tensor:
    return ops.sqrt(ops.sum_axis(ops.square(ops.sub(a, b))))


def contrastive_loss(h_tp_i: Tensor, h_tp_j: Tensor, h_lp_i: Tensor,
                     h_lp_j: Tensor, cfg: ContrastiveConfig) -> ContrastiveOutput:
    """Hinged distance contrast: positive distance between the two task
    vectors, negative distance from task vector to the language vectors,
    loss = max(d_p - d_n + margin, 0) / temperature."""
    shapes = {t.shape for t in (h_tp_i, h_tp_j, h_lp_i, h_lp_j)}
    if len(shapes) != 1:
        raise ValueError(f"prompt vectors disagree in shape: {sorted(shapes)}")
    d_p = _l2(h_tp_i, h_tp_j)
    d_n = ops.scale(ops.add(_l2(h_tp_i, h_lp_i), _l2(h_tp_i, h_lp_j)), 0.5)
    if cfg.symmetrize_negatives:
        d_n_j = ops.scale(ops.add(_l2(h_tp_j, h_lp_j), _l2(h_tp_j, h_lp_i)), 0.5)
        d_n = ops.scale(ops.add(d_n, d_n_j), 0.5)
    hinge = ops.relu(ops.add_const(ops.sub(d_p, d_n), cfg.margin))
    loss = ops.scale(hinge, 1.0 / cfg.temperature)
    return ContrastiveOutput(d_p=float(d_p.item()), d_n=float(d_n.item()),
                             loss=float(loss.item()), loss_t=loss)


def combined_loss(l_mle: Tensor, l_c: Tensor, lam: float) -> Tensor:
    """Convex blend lam * l_c + (1 - lam) * l_mle. The endpoints return
    the input tensor itself, so lam=0 is bit-identical to MLE-only."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if lam == 0.0:
        return l_mle
    if lam == 1.0:
        return l_c
    return ops.add(ops.scale(l_c, lam), ops.scale(l_mle, 1.0 - lam))
