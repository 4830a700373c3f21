"""Loss terms of the two-pass objective and the per-step breakdown record.

Composite structure (weights lam, gamma, sigma):

    first  = mse1 + lam * id1 + gamma * lm1
    second = mse2 + lam * id2 + gamma * lm2
    total  = first + sigma * second

`LossBreakdown.compose` derives the aggregate fields from the component
scalars in plain float arithmetic, so those identities hold exactly in every
logged record (the tensor-graph total used for backprop is built separately).

Call-order contract for instrumentation: `loss_identity` evaluates the
embedding on (x_id, x0_ref, x0_hat) in that order; `loss_landmark` runs the
detector on (prediction, target) in that order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F

Tensor = torch.Tensor

COSINE_EPS = 1e-8


def loss_mse(eps: Tensor, eps_pred: Tensor) -> Tensor:
    """Mean of squared elementwise differences."""
    if eps.shape != eps_pred.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_pred.shape)}"
        )
    return torch.mean((eps - eps_pred) ** 2)


def loss_identity(
    x_id: Tensor,
    x0_ref: Tensor,
    x0_hat: Tensor,
    t,
    steps: int,
    embed_fn: Callable[[Tensor], Tensor],
) -> Tensor:
    """Time-weighted negative cosine similarity to the two source images.

    Per item with weight w = t/steps:

        -w * cos(F(x_id), F(x0_hat)) - (1 - w) * cos(F(x0_ref), F(x0_hat))

    so at t=0 only the expression-source term remains and at t=steps only
    the identity-source term. Batch-averaged; `embed_fn` should be a frozen
    identity embedding. t may be a scalar or per-item vector in [0, steps].
    """
    f_id = embed_fn(x_id)
    f_ref = embed_fn(x0_ref)
    f_hat = embed_fn(x0_hat)
    t = torch.as_tensor(t, device=f_hat.device)
    if t.ndim == 0:
        t = t.reshape(1).expand(f_hat.shape[0])
    if bool((t < 0).any()) or bool((t > steps).any()):
        raise ValueError(f"t must lie in [0, {steps}]")
    w = t.to(f_hat.dtype) / float(steps)
    cs_id = F.cosine_similarity(f_id, f_hat, dim=-1, eps=COSINE_EPS)
    cs_ref = F.cosine_similarity(f_ref, f_hat, dim=-1, eps=COSINE_EPS)
    return (-w * cs_id - (1.0 - w) * cs_ref).mean()


def loss_landmark(
    x0_hat: Tensor, x0: Tensor, detector: Callable[[Tensor], Tensor]
) -> Tensor:
    """Mean squared error over detected keypoint coordinates, batch-averaged."""
    pred = detector(x0_hat)
    target = detector(x0)
    if pred.shape != target.shape:
        raise ValueError(
            f"detector output mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}"
        )
    return torch.mean((pred - target) ** 2)


@dataclass(frozen=True)
class LossBreakdown:
    """Scalar record of one training step.

    Aggregates satisfy the composition identities exactly:
    first = mse1 + lam*id1 + gamma*lm1, second likewise, and
    total = first + sigma*second, in float arithmetic on these fields.
    """

    mse1: float
    id1: float
    lm1: float
    first: float
    mse2: float
    id2: float
    lm2: float
    second: float
    total: float

    @classmethod
    def compose(
        cls,
        mse1: float,
        id1: float,
        lm1: float,
        mse2: float,
        id2: float,
        lm2: float,
        lam: float,
        gamma: float,
        sigma: float,
    ) -> "LossBreakdown":
        first = mse1 + lam * id1 + gamma * lm1
        second = mse2 + lam * id2 + gamma * lm2
        total = first + sigma * second
        return cls(mse1, id1, lm1, first, mse2, id2, lm2, second, total)

    def log_record(self, step: int) -> dict:
        return {
            "step": step,
            "mse1": self.mse1,
            "id1": self.id1,
            "lm1": self.lm1,
            "mse2": self.mse2,
            "id2": self.id2,
            "lm2": self.lm2,
            "total": self.total,
        }
