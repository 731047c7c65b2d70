"""Closed-form evidence lower bound with replay overshooting.

For one trajectory the objective is::

    alpha * sum_t log N(x_t; g(mu_{t|T}), C Sigma_{t|T} C^T + R)
    + (1 - alpha) * sum_t log N(x_t; g(mu_bar_t), C Sigma_bar_t C^T + R)
    - sum_t KL(N(mu_{t|T}, Sigma_{t|T}) || N(f(mu_{t-1|T}, u_{t-1}), A Sigma_{t-1|T} A^T + Q))

where ``(mu_bar, Sigma_bar)`` is the open-loop rollout started from the
smoothed t = 0 belief. Terms are evaluated in closed form (no sampling) and
are vectorized over the time axis once the smoother has run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DecompositionError, Tensor
from .ekf import (
    SmoothedTrace,
    ekf_filter,
    observe,
    previous_inputs,
    rollout,
    rts_smooth,
    time_major,
)
from .gaussian import kl_divergence, log_prob, pushforward_affine, stack_gaussians


@dataclass
class LossBreakdown:
    """Per-trajectory terms, each of shape ``(..., 1, 1)``.

    ``total`` is the quantity to maximize; trainers minimize ``-total``.
    """

    reconstruction: Tensor
    overshoot: Tensor
    kl: Tensor
    total: Tensor
    alpha: float

    def batch_mean(self) -> "LossBreakdown":
        return LossBreakdown(
            ad.batch_mean(self.reconstruction),
            ad.batch_mean(self.overshoot),
            ad.batch_mean(self.kl),
            ad.batch_mean(self.total),
            self.alpha,
        )


def reconstruction_term(smoothed: SmoothedTrace, x, g, R) -> Tensor:
    """Sum over t = 1..T of log p(x_t) under the pushforward of N(mu_{t|T}, Sigma_{t|T})."""
    x_tm = time_major(x, name="x")
    if x_tm.shape[0] != len(smoothed):
        raise ContractError(f"x has {x_tm.shape[0]} steps, smoothed trace has {len(smoothed)}")
    pred = observe(g, stack_gaussians(smoothed.smoothed[1:]), R)
    return ad.sum_over(log_prob(pred, Tensor(x_tm)), 0)


def kl_term(smoothed: SmoothedTrace, f, Q, u=None) -> Tensor:
    """Sum over t = 1..T of KL(smoothed_t || transition prior from smoothed_{t-1})."""
    T = len(smoothed)
    prev = stack_gaussians(smoothed.smoothed[:-1])
    cur = stack_gaussians(smoothed.smoothed[1:])
    u_prev = previous_inputs(u, getattr(f, "input_dim", 0), T)
    mean, A = f.forward_and_jacobian(prev.mean, None if u_prev is None else Tensor(u_prev))
    prior = pushforward_affine(prev, A, mean, Q)
    return ad.sum_over(kl_divergence(cur, prior), 0)


def overshoot_term(init, u, x, f, g, Q, R) -> Tensor:
    """Sum of log p(x_t) under the open-loop rollout started from ``init``."""
    x_tm = time_major(x, name="x")
    roll = rollout(init, u, f, g, Q, R, steps=x_tm.shape[0])
    return ad.sum_over(log_prob(roll.observed, Tensor(x_tm)), 0)


def _phase(label: str, fn, *args):
    try:
        return fn(*args)
    except DecompositionError as e:
        new = DecompositionError(f"[{label}] {e}", pivot=e.pivot, batch_index=e.batch_index)
        new.step = getattr(e, "step", None)
        new.phase = label
        raise new from None


def total_loss(x, u, model, alpha: float = 0.5) -> LossBreakdown:
    """filter -> smooth -> three terms -> ``alpha``-weighted assembly.

    ``model`` is a :class:`~neural_ekf.models.NeuralEKF` (or anything with the
    same attributes). ``x``/``u`` are ``(T, d)`` or ``(B, T, d)`` arrays.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    f, g = model.transition, model.observation
    Q, R = model.Q.materialize(), model.R.materialize()
    init = model.init_belief()
    trace = _phase("filter", ekf_filter, x, u, f, g, Q, R, init)
    smoothed = _phase("smooth", rts_smooth, trace)
    rec = _phase("loss", reconstruction_term, smoothed, x, g, R)
    kl = _phase("loss", kl_term, smoothed, f, Q, u)
    over = _phase("loss", overshoot_term, smoothed.smoothed[0], u, x, f, g, Q, R)
    total = rec * alpha + over * (1.0 - alpha) - kl
    return LossBreakdown(rec, over, kl, total, alpha)


def batch_objective(x, u, model, alpha: float = 0.5) -> tuple[Tensor, LossBreakdown]:
    """Scalar loss ``-mean_b total_b`` for a batch plus the per-trajectory breakdown."""
    parts = total_loss(x, u, model, alpha)
    return -ad.batch_mean(parts.total), parts


def per_trajectory_values(parts: LossBreakdown) -> dict[str, np.ndarray]:
    return {
        "total": parts.total.value.reshape(-1),
        "reconstruction": parts.reconstruction.value.reshape(-1),
        "overshoot": parts.overshoot.value.reshape(-1),
        "kl": parts.kl.value.reshape(-1),
    }
