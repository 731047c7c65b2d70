"""Gaussian beliefs: log-density, KL divergence, affine pushforward.

All quantities are :class:`~neural_ekf.autodiff.Tensor` so that they stay on
the tape. Means are column vectors ``(..., d, 1)`` and covariances
``(..., d, d)``; leading axes batch over trajectories and/or time.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

DEFAULT_JITTER = 1e-6
LOG_2PI = math.log(2.0 * math.pi)

_local = threading.local()


def current_jitter() -> float:
    return getattr(_local, "jitter", DEFAULT_JITTER)


@contextlib.contextmanager
def covariance_jitter(eps: float):
    """Temporarily change the diagonal jitter added by :func:`sanitize`.

    Exact linear-Gaussian comparisons run with ``covariance_jitter(0.0)``.
    """
    prev = current_jitter()
    _local.jitter = float(eps)
    try:
        yield
    finally:
        _local.jitter = prev


def sanitize(cov) -> Tensor:
    """Symmetrize and add ``eps * I`` (``eps`` from :func:`current_jitter`)."""
    return ad.symmetrize(cov, current_jitter())


@dataclass(frozen=True)
class Gaussian:
    mean: Tensor
    cov: Tensor

    def __post_init__(self):
        d = self.mean.shape[-2]
        if self.mean.shape[-1] != 1:
            raise DimensionError(f"Gaussian mean must be a column, got {self.mean.shape}")
        if self.cov.shape[-2:] != (d, d):
            raise DimensionError(
                f"Gaussian mean {self.mean.shape} and covariance {self.cov.shape} disagree"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-2]

    def __getitem__(self, key) -> "Gaussian":
        """Index the leading (batch/time) axes."""
        if not isinstance(key, tuple):
            key = (key,)
        key = key + (Ellipsis,)
        return Gaussian(self.mean[key], self.cov[key])

    def detach(self) -> "Gaussian":
        return Gaussian(self.mean.detach(), self.cov.detach())


def _expand(t: Tensor, batch: tuple) -> Tensor:
    if t.batch_shape == batch:
        return t
    return t + Tensor(np.zeros((*batch, *t.shape[-2:])))


def stack_gaussians(items) -> Gaussian:
    """Stack along a new leading axis; means and covariances share one batch shape."""
    items = list(items)
    batch = np.broadcast_shapes(*(g.mean.batch_shape for g in items), *(g.cov.batch_shape for g in items))
    return Gaussian(ad.stack([_expand(g.mean, batch) for g in items]),
                    ad.stack([_expand(g.cov, batch) for g in items]))


class CovarianceParam:
    """Diagonal covariance stored as per-dimension log-variances."""

    def __init__(self, log_diag, name: str | None = None):
        self.log_diag = Tensor(np.asarray(log_diag, dtype=float).reshape(-1, 1),
                               requires_grad=True, name=name)

    @classmethod
    def from_variance(cls, variance: float, dim: int, name: str | None = None):
        return cls(np.full(dim, math.log(variance)), name=name)

    @property
    def dim(self) -> int:
        return self.log_diag.rows

    def materialize(self) -> Tensor:
        return ad.diag_embed(ad.exp(self.log_diag))

    def numpy(self) -> np.ndarray:
        return np.diag(np.exp(self.log_diag.value[:, 0]))


def log_prob(g: Gaussian, x) -> Tensor:
    """Closed-form Gaussian log-density, shape ``(..., 1, 1)``."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.shape[-2] != g.dim or x.shape[-1] != 1:
        raise DimensionError(f"log_prob: point {x.shape} vs Gaussian of dim {g.dim}")
    r = x - g.mean
    inner = ad.logdet(g.cov) + ad.quad_form(r, g.cov)
    return (inner + g.dim * LOG_2PI) * -0.5


def kl_divergence(q: Gaussian, p: Gaussian) -> Tensor:
    """KL(q || p) for two Gaussians of equal dimension."""
    if q.dim != p.dim:
        raise DimensionError(f"kl_divergence: dims {q.dim} and {p.dim} differ")
    diff = p.mean - q.mean
    terms = (
        ad.logdet(p.cov)
        - ad.logdet(q.cov)
        + ad.trace(ad.solve_spd(p.cov, q.cov))
        + ad.quad_form(diff, p.cov)
    )
    return (terms - float(q.dim)) * 0.5


def pushforward_affine(g: Gaussian, jac, new_mean, noise_cov) -> Gaussian:
    """``N(new_mean, jac @ cov @ jac.T + noise_cov)`` with a sanitized covariance."""
    jac = jac if isinstance(jac, Tensor) else Tensor(jac)
    if jac.shape[-1] != g.dim:
        raise DimensionError(f"pushforward: jacobian {jac.shape} vs Gaussian of dim {g.dim}")
    cov = jac @ g.cov @ jac.T + noise_cov
    new_mean = new_mean if isinstance(new_mean, Tensor) else Tensor(new_mean)
    return Gaussian(new_mean, sanitize(cov))
