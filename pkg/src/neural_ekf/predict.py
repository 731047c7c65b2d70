"""Response prediction with a trained model.

Three modes:

* ``rollout``: open-loop prediction from the inputs alone. The t = 0 belief is
  the smoothed initial state inferred from the first ``condition_steps``
  observations (or the learned prior when ``condition_steps`` is 0).
* ``filtered``: observation pushforward of the filtering posteriors.
* ``smoothed``: observation pushforward of the smoothing posteriors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ContractError
from .data import Normalization, TimeSeriesDataset, apply_normalization, destandardize
from .ekf import ekf_filter, observe, rollout, rts_smooth
from .gaussian import stack_gaussians

MODES = ("rollout", "filtered", "smoothed")
DEFAULT_CONDITION_STEPS = 50


@dataclass
class Prediction:
    mean: np.ndarray  # (T, d_x)
    variance: np.ndarray  # (T, d_x), diagonal of the predictive covariance


def _unpack(g, batch: int):
    """Time-major stacked Gaussian ``(T, B, d, 1)`` -> per-trajectory (mean, var) arrays."""
    mean = g.mean.value[..., 0]
    var = np.diagonal(g.cov.value, axis1=-2, axis2=-1)
    mean = mean.reshape(mean.shape[0], batch, -1).transpose(1, 0, 2)
    var = var.reshape(var.shape[0], batch, -1).transpose(1, 0, 2)
    return mean, var


def predict_arrays(model, x: np.ndarray, u: np.ndarray | None, mode: str = "rollout",
                   condition_steps: int = DEFAULT_CONDITION_STEPS) -> tuple[np.ndarray, np.ndarray]:
    """Predict a ``(B, T, d_x)`` batch in model (standardized) units; returns (mean, variance)."""
    if mode not in MODES:
        raise ContractError(f"unknown prediction mode {mode!r}; expected one of {MODES}")
    x = np.asarray(x, dtype=float)
    B = x.shape[0]
    if u is not None and np.asarray(u).shape[-1] == 0:
        u = None
    f, g = model.transition, model.observation
    Q, R = model.Q.materialize(), model.R.materialize()
    if mode == "rollout":
        K = min(int(condition_steps), x.shape[1])
        if K > 0:
            trace = ekf_filter(x[:, :K], None if u is None else u[:, :K], f, g, Q, R, model.init_belief())
            init = rts_smooth(trace).smoothed[0]
        else:
            init = model.init_belief()
        out = rollout(init, u, f, g, Q, R, steps=x.shape[1]).observed
    else:
        trace = ekf_filter(x, u, f, g, Q, R, model.init_belief())
        beliefs = trace.filtered if mode == "filtered" else rts_smooth(trace).smoothed[1:]
        out = observe(g, stack_gaussians(beliefs), R)
    return _unpack(out, B)


def predict_dataset(model, ds: TimeSeriesDataset, norm: Normalization, mode: str = "rollout",
                    condition_steps: int = DEFAULT_CONDITION_STEPS) -> list[Prediction]:
    """Predict every trajectory of a dataset given in physical units.

    ``norm`` is the training normalization; outputs are mapped back to
    physical units. Equal-length trajectories are processed as one batch.
    """
    if ds.obs_dim != model.observation.obs_dim:
        raise ContractError(f"dataset has {ds.obs_dim} output channels but the checkpoint model has "
                            f"{model.observation.obs_dim}")
    if ds.input_dim != getattr(model.transition, "input_dim", 0):
        raise ContractError(f"dataset has {ds.input_dim} input channels but the checkpoint model has "
                            f"{getattr(model.transition, 'input_dim', 0)}")
    scaled = apply_normalization(ds, norm)
    groups: dict[int, list[int]] = {}
    for i, n in enumerate(scaled.lengths()):
        groups.setdefault(n, []).append(i)
    results: list[Prediction | None] = [None] * len(ds)
    for idx in groups.values():
        U, X = scaled.arrays(idx)
        mean, var = predict_arrays(model, X, U, mode, condition_steps)
        for j, i in enumerate(idx):
            results[i] = Prediction(destandardize(mean[j], norm), destandardize(var[j], norm, variance=True))
    return results
