"""Extended Kalman filtering, RTS smoothing and open-loop rollout on the tape.

Sequences are passed as arrays of shape ``(T, d)`` (one trajectory) or
``(B, T, d)`` (a batch of equal-length trajectories); every Gaussian in the
returned traces then carries the batch axis in front of its matrix axes.

Input convention: row ``t`` of ``u`` is the input held from sample ``t`` to
sample ``t + 1``, so the transition into sample ``t`` is driven by row
``t - 1`` and a zero input precedes the first sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DecompositionError, DimensionError, Tensor
from .gaussian import Gaussian, sanitize, stack_gaussians


@dataclass
class FilterTrace:
    init: Gaussian
    predicted: list  # N(mu_{t|t-1}, Sigma_{t|t-1}), t = 1..T
    filtered: list  # N(mu_{t|t}, Sigma_{t|t}), t = 1..T
    jacobians_A: list  # A at mu_{t-1|t-1}, i.e. the Jacobian used to predict t
    jacobians_C: list  # C at mu_{t|t-1}
    innovations: list

    def __len__(self) -> int:
        return len(self.filtered)


@dataclass
class SmoothedTrace:
    smoothed: list  # N(mu_{t|T}, Sigma_{t|T}), t = 0..T
    gains: list  # smoother gains for t = 0..T-1

    def __len__(self) -> int:
        return len(self.smoothed) - 1


@dataclass
class Rollout:
    latent: list  # q_bar(z_t), t = 1..T
    observed: Gaussian  # stacked over time: leading axis T


def time_major(arr, dim: int | None = None, name: str = "sequence") -> np.ndarray:
    """``(T, d)`` -> ``(T, d, 1)`` and ``(B, T, d)`` -> ``(T, B, d, 1)``."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        out = a[:, :, None]
    elif a.ndim == 3:
        out = np.transpose(a, (1, 0, 2))[..., None]
    else:
        raise DimensionError(f"{name} must be (T, d) or (B, T, d), got shape {a.shape}")
    if dim is not None and out.shape[-2] != dim:
        raise DimensionError(f"{name} has {out.shape[-2]} channels, model expects {dim}")
    return out


def previous_inputs(u, input_dim: int, steps: int):
    """Per-step driving inputs u_{t-1} for t = 1..T (time-major), or ``None``."""
    if input_dim == 0 or u is None:
        return None
    u_tm = time_major(u, input_dim, "u")
    if u_tm.shape[0] != steps:
        raise DimensionError(f"u has {u_tm.shape[0]} steps, x has {steps}")
    prev = np.empty_like(u_tm)
    prev[0] = 0.0
    prev[1:] = u_tm[:-1]
    return prev


def _input_dim(f) -> int:
    return getattr(f, "input_dim", 0)


def _tag(err: DecompositionError, where: str) -> DecompositionError:
    new = DecompositionError(f"{where}: {err}", pivot=err.pivot, batch_index=err.batch_index)
    new.step = getattr(err, "step", None)
    return new


def predict_step(prior: Gaussian, u, f, Q) -> tuple[Gaussian, Tensor]:
    """mu = f(mu_prev, u), Sigma = A Sigma_prev A^T + Q with A the Jacobian at mu_prev."""
    mean, A = f.forward_and_jacobian(prior.mean, u)
    cov = sanitize(A @ prior.cov @ A.T + Q)
    return Gaussian(mean, cov), A


def update_step(pred: Gaussian, x, g, R) -> tuple[Gaussian, Tensor, Tensor]:
    """Condition on ``x``; returns (filtered, C, innovation)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    gm, C = g.forward_and_jacobian(pred.mean)
    if x.shape[-2] != gm.shape[-2]:
        raise DimensionError(f"observation has dim {x.shape[-2]}, model predicts {gm.shape[-2]}")
    CS = C @ pred.cov
    S = sanitize(CS @ C.T + R)
    K = ad.solve_spd(S, CS).T  # Sigma C^T S^-1, using symmetry of Sigma and S
    innovation = x - gm
    mean = pred.mean + K @ innovation
    cov = sanitize(pred.cov - K @ CS)
    return Gaussian(mean, cov), C, innovation


def ekf_filter(x, u, f, g, Q, R, init: Gaussian) -> FilterTrace:
    """Alternate predict/update over t = 1..T starting from ``init``."""
    x_tm = time_major(x, name="x")
    T = x_tm.shape[0]
    if T < 1:
        raise DimensionError("filter needs at least one observation")
    u_prev = previous_inputs(u, _input_dim(f), T)
    belief = init
    trace = FilterTrace(init, [], [], [], [], [])
    for t in range(T):
        try:
            pred, A = predict_step(belief, None if u_prev is None else u_prev[t], f, Q)
            belief, C, innov = update_step(pred, x_tm[t], g, R)
        except DecompositionError as e:
            err = _tag(e, f"filter step t={t + 1}")
            err.step = t + 1
            raise err from None
        trace.predicted.append(pred)
        trace.filtered.append(belief)
        trace.jacobians_A.append(A)
        trace.jacobians_C.append(C)
        trace.innovations.append(innov)
    return trace


def rts_smooth(trace: FilterTrace) -> SmoothedTrace:
    """Backward pass from T to 0 reusing the filter's Jacobians."""
    T = len(trace)
    smoothed = [None] * (T + 1)
    gains = [None] * T
    smoothed[T] = trace.filtered[T - 1]
    for t in range(T - 1, -1, -1):
        filt = trace.init if t == 0 else trace.filtered[t - 1]
        pred = trace.predicted[t]  # N(mu_{t+1|t}, Sigma_{t+1|t})
        A = trace.jacobians_A[t]
        nxt = smoothed[t + 1]
        try:
            Ks = ad.solve_spd(pred.cov, A @ filt.cov).T
        except DecompositionError as e:
            err = _tag(e, f"smoother step t={t}")
            err.step = t
            raise err from None
        mean = filt.mean + Ks @ (nxt.mean - pred.mean)
        cov = sanitize(filt.cov + Ks @ (nxt.cov - pred.cov) @ Ks.T)
        smoothed[t] = Gaussian(mean, cov)
        gains[t] = Ks
    return SmoothedTrace(smoothed, gains)


def observe(g, latent: Gaussian, R) -> Gaussian:
    """Observation pushforward N(g(mu), C Sigma C^T + R)."""
    gm, C = g.forward_and_jacobian(latent.mean)
    return Gaussian(gm, sanitize(C @ latent.cov @ C.T + R))


def rollout(init: Gaussian, u, f, g, Q, R, steps: int | None = None) -> Rollout:
    """Open-loop generative prediction from ``init`` (the belief at t = 0)."""
    d_u = _input_dim(f)
    if d_u:
        u_tm = time_major(u, d_u, "u")
        T = u_tm.shape[0] if steps is None else steps
        u_prev = previous_inputs(u, d_u, u_tm.shape[0])
    else:
        if steps is None:
            if u is None:
                raise DimensionError("rollout needs either u or steps")
            steps = np.asarray(u).shape[-2]
        T = steps
        u_prev = None
    if T < 1:
        raise DimensionError("rollout needs at least one step")
    belief = init
    latent = []
    for t in range(T):
        belief, _ = predict_step(belief, None if u_prev is None else u_prev[t], f, Q)
        latent.append(belief)
    observed = observe(g, stack_gaussians(latent), R)
    return Rollout(latent, observed)
