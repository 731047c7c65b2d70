"""Batched stochastic-gradient training of a :class:`~neural_ekf.models.NeuralEKF`.

Each batch evaluates the ELBO of every member in one vectorized pass, averages
the per-trajectory objectives, and takes one Adam step on ``-ELBO`` after
global-norm clipping. Logs report ``loss = -ELBO`` and the mean of each term.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ContractError, Tape
from .data import TimeSeriesDataset
from .elbo import batch_objective, per_trajectory_values

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "loss", "reconstruction", "overshoot", "kl")


class TrainingError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 1e-3
    alpha: float = 0.5
    seed: int = 0
    gradient_clip: float = 10.0
    checkpoint_every: int = 0
    # when set, every epoch draws one random window of this length per trajectory
    crop_length: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if not self.learning_rate >= 0.0:
            raise ContractError("learning_rate must be >= 0")
        if self.gradient_clip is not None and self.gradient_clip <= 0:
            raise ContractError("gradient_clip must be positive")
        if self.crop_length is not None and self.crop_length < 1:
            raise ContractError("crop_length must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def adam_step(params: dict, grads: dict, moments: dict, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update on dicts of arrays.

    ``moments`` is ``{"m": {...}, "v": {...}, "t": int}``; fresh dicts are
    returned and the inputs are left untouched.
    """
    t = moments.get("t", 0) + 1
    new_params, m_out, v_out = {}, {}, {}
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = beta1 * moments["m"].get(name, np.zeros_like(p)) + (1.0 - beta1) * g
        v = beta2 * moments["v"].get(name, np.zeros_like(p)) + (1.0 - beta2) * g * g
        m_out[name], v_out[name] = m, v
        new_params[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return new_params, {"m": m_out, "v": v_out, "t": t}


def clip_by_global_norm(grads: dict, max_norm: float | None):
    """Rescale so the joint L2 norm is at most ``max_norm``; returns (grads, norm before)."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is None or norm <= max_norm or norm == 0.0:
        return dict(grads), norm
    s = max_norm / norm
    return {k: g * s for k, g in grads.items()}, norm


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.moments = {"m": {}, "v": {}, "t": 0}

    def step(self, tensors: dict, grads: dict) -> None:
        values = {k: t.value for k, t in tensors.items()}
        new, self.moments = adam_step(values, grads, self.moments, self.lr, self.beta1, self.beta2, self.eps)
        for k, t in tensors.items():
            t.value = new[k]


@dataclass
class TrainState:
    model: object
    optimizer: Adam
    epoch: int = 0
    history: list = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _epoch_data(ds: TimeSeriesDataset, cfg: TrainConfig, rng: np.random.Generator):
    if cfg.crop_length is None:
        return ds.arrays()
    L = cfg.crop_length
    us, xs = [], []
    for i, tr in enumerate(ds.trajectories):
        if tr.length < L:
            raise ContractError(f"crop_length {L} exceeds trajectory {i} (length {tr.length})")
        s = int(rng.integers(0, tr.length - L + 1))
        us.append(tr.u[s:s + L])
        xs.append(tr.x[s:s + L])
    return np.stack(us), np.stack(xs)


def _param_norms(model) -> dict:
    return {k: float(np.linalg.norm(v.value)) for k, v in model.parameters().items()}


def train(dataset: TimeSeriesDataset, model, cfg: TrainConfig, state: TrainState | None = None,
          on_epoch=None) -> TrainState:
    """Run ``cfg.epochs`` epochs (continuing from ``state`` when resuming).

    ``on_epoch(state, row)`` is called after every epoch; the row holds the
    epoch-mean loss and terms.
    """
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    if dataset.obs_dim != model.observation.obs_dim:
        raise ContractError(f"dataset has {dataset.obs_dim} output channels, model expects {model.observation.obs_dim}")
    if dataset.input_dim != getattr(model.transition, "input_dim", 0):
        raise ContractError(f"dataset has {dataset.input_dim} input channels, model expects "
                            f"{getattr(model.transition, 'input_dim', 0)}")
    if state is None:
        state = TrainState(model, Adam(cfg.learning_rate))
    state.optimizer.lr = cfg.learning_rate
    params = model.parameters()
    start = state.epoch
    for epoch in range(start + 1, start + cfg.epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch])
        U, X = _epoch_data(dataset, cfg, rng)
        sums = {k: 0.0 for k in ("total", "reconstruction", "overshoot", "kl")}
        for b, idx in enumerate(_batches(len(X), cfg.batch_size, rng)):
            model.zero_grad()
            with Tape() as tape:
                loss, parts = batch_objective(X[idx], U[idx] if U.shape[-1] else None, model, cfg.alpha)
                if not np.isfinite(loss.item()):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, batch {b}",
                        {"epoch": epoch, "batch": b, "parameter_norms": _param_norms(model)},
                    )
                tape.backward(loss)
            grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.value)) for k, p in params.items()}
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(
                    f"non-finite gradient at epoch {epoch}, batch {b}",
                    {"epoch": epoch, "batch": b, "parameter_norms": _param_norms(model)},
                )
            grads, _ = clip_by_global_norm(grads, cfg.gradient_clip)
            state.optimizer.step(params, grads)
            for k, v in per_trajectory_values(parts).items():
                sums[k] += float(v.sum())
        n = len(X)
        row = {
            "epoch": epoch,
            "loss": -sums["total"] / n,
            "reconstruction": sums["reconstruction"] / n,
            "overshoot": sums["overshoot"] / n,
            "kl": sums["kl"] / n,
        }
        state.epoch = epoch
        state.history.append(row)
        log.info("epoch %d loss %.6g (%.1fs)", epoch, row["loss"], time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(state, row)
    return state
