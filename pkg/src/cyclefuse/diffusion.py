"""Noise schedules, forward noising, closed-form recovery, ancestral sampling.

Conventions:
    beta[t]       per-step noise variance, 0 < beta[t] < 1
    alpha[t]      1 - beta[t]
    alpha_bar[t]  prod_{s<=t} alpha[s]   (signal retention after t+1 steps)

Forward noising draws x_t directly from x_0:

    x_t = sqrt(alpha_bar[t]) * x_0 + sqrt(1 - alpha_bar[t]) * eps

and the clean image is recovered from a noise estimate by inverting it:

    x0_hat = (x_t - sqrt(1 - alpha_bar[t]) * eps_hat) / sqrt(alpha_bar[t])

Schedule arrays are kept in float64 so cumulative products stay accurate for
long schedules; coefficients are cast to the data dtype at use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import torch

Tensor = torch.Tensor


@dataclass(frozen=True)
class NoiseSchedule:
    beta: Tensor
    alpha: Tensor
    alpha_bar: Tensor

    @property
    def steps(self) -> int:
        return int(self.beta.shape[0])


def build_schedule(
    steps: int, beta_start: float, beta_end: float, kind: str = "linear"
) -> NoiseSchedule:
    """Construct a variance schedule of `steps` betas.

    The linear kind interpolates beta evenly from beta_start to beta_end
    inclusive. Requires steps >= 1 and 0 < beta_start <= beta_end < 1.
    """
    if not isinstance(steps, int) or steps < 1:
        raise ValueError(f"steps must be a positive integer, got {steps!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    beta = torch.linspace(beta_start, beta_end, steps, dtype=torch.float64)
    alpha = 1.0 - beta
    alpha_bar = torch.cumprod(alpha, dim=0)
    assert bool(alpha_bar[-1] > 0), "schedule underflowed to zero signal"
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _timesteps(t, batch: int, steps: int, device) -> Tensor:
    t = torch.as_tensor(t, dtype=torch.long, device=device)
    if t.ndim == 0:
        t = t.reshape(1).expand(batch)
    if t.ndim != 1 or t.shape[0] != batch:
        raise ValueError(f"t must be scalar or shape ({batch},), got {tuple(t.shape)}")
    if bool((t < 0).any()) or bool((t >= steps).any()):
        raise ValueError(f"timestep out of range [0, {steps})")
    return t


def _coeff(values: Tensor, t: Tensor, like: Tensor) -> Tensor:
    """Gather per-item schedule values, shaped to broadcast over `like`."""
    out = values.to(device=like.device)[t].to(like.dtype)
    return out.reshape(-1, *([1] * (like.ndim - 1)))


def q_sample(x0: Tensor, t, eps: Tensor, sched: NoiseSchedule) -> Tensor:
    """Noise x0 to step t: sqrt(ab)*x0 + sqrt(1-ab)*eps. No clamping."""
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {tuple(eps.shape)} != x0 shape {tuple(x0.shape)}")
    t = _timesteps(t, x0.shape[0], sched.steps, x0.device)
    ab = _coeff(sched.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1.0 - ab) * eps


def recover_x0(x_t: Tensor, t, eps_pred: Tensor, sched: NoiseSchedule) -> Tensor:
    """Invert q_sample given a noise estimate: (x_t - sqrt(1-ab)*eps) / sqrt(ab)."""
    if eps_pred.shape != x_t.shape:
        raise ValueError(
            f"eps_pred shape {tuple(eps_pred.shape)} != x_t shape {tuple(x_t.shape)}"
        )
    t = _timesteps(t, x_t.shape[0], sched.steps, x_t.device)
    ab = _coeff(sched.alpha_bar, t, x_t)
    assert bool((ab > 0).all()), "alpha_bar must stay positive"
    return (x_t - torch.sqrt(1.0 - ab) * eps_pred) / torch.sqrt(ab)


def sample(
    denoise_fn: Callable[[Tensor, Tensor, object], Tensor],
    conditions: object,
    sched: NoiseSchedule,
    seed: int,
    shape: tuple[int, ...],
    *,
    clamp_recovered: bool = False,
    dtype: torch.dtype = torch.float32,
) -> Tensor:
    """Ancestral reverse process from pure noise.

    Iterates t = steps-1 .. 0. At each step the predicted noise gives x0_hat
    via `recover_x0`; the posterior mean is formed from x0_hat and the
    schedule, and fresh noise scaled by sqrt(beta_t) is added for t > 0 (none
    at t = 0). Deterministic given (seed, conditions, denoiser weights); the
    RNG is owned by this call.

    `clamp_recovered` optionally clamps x0_hat into [-1, 1] inside the loop;
    off by default because it changes the samples.
    """
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=g, dtype=dtype)
    for i in reversed(range(sched.steps)):
        t = torch.full((shape[0],), i, dtype=torch.long)
        eps = denoise_fn(x, t, conditions)
        if eps.shape != x.shape:
            raise ValueError(
                f"denoiser output shape {tuple(eps.shape)} != state shape {tuple(x.shape)}"
            )
        x0_hat = recover_x0(x, t, eps, sched)
        if clamp_recovered:
            x0_hat = x0_hat.clamp(-1.0, 1.0)
        ab = float(sched.alpha_bar[i])
        ab_prev = float(sched.alpha_bar[i - 1]) if i > 0 else 1.0
        alpha = float(sched.alpha[i])
        beta = float(sched.beta[i])
        coef_x0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
        coef_xt = math.sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab)
        x = coef_x0 * x0_hat + coef_xt * x
        if i > 0:
            x = x + math.sqrt(beta) * torch.randn(shape, generator=g, dtype=dtype)
    return x
