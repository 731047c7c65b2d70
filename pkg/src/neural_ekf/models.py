"""Learnable transition and observation functions with state Jacobians.

The Jacobians are built from tape operations (``W_L D_{L-1} W_{L-1} ... W_1``,
``D`` the activation slopes), so a loss that uses them can be differentiated
with respect to the network weights in a single reverse pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .gaussian import CovarianceParam, Gaussian

ACTIVATIONS = ("tanh", "identity")


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    output_dim: int
    hidden_widths: tuple = (64, 64, 64)
    activation: str = "tanh"
    # multiplies the Xavier draw of the output layer only
    output_gain: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if not self.hidden_widths:
            raise ContractError("hidden_widths must be non-empty")
        if self.input_dim < 1 or self.output_dim < 1 or min(self.hidden_widths) < 1:
            raise ContractError("all MLP dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.input_dim, *self.hidden_widths, self.output_dim]


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def init_params(cfg: MlpConfig, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Xavier-uniform weights and zero biases, deterministic under ``seed``."""
    rng = np.random.default_rng(seed)
    sizes = cfg.layer_sizes
    params = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = xavier_bound(fan_in, fan_out)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if i == len(sizes) - 2:
            W = W * cfg.output_gain
        params.append((W, np.zeros((fan_out, 1))))
    return params


class Mlp:
    def __init__(self, cfg: MlpConfig, params=None, seed: int = 0):
        self.cfg = cfg
        if params is None:
            params = init_params(cfg, seed)
        if len(params) != len(cfg.layer_sizes) - 1:
            raise ContractError("parameter list does not match the layer count")
        self.weights = [Tensor(W, requires_grad=True) for W, _ in params]
        self.biases = [Tensor(b, requires_grad=True) for _, b in params]

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        return out

    def _check(self, x: Tensor) -> None:
        if x.shape[-2] != self.cfg.input_dim or x.shape[-1] != 1:
            raise DimensionError(
                f"MLP expects input (..., {self.cfg.input_dim}, 1), got {x.shape}"
            )

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check(x)
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = W @ h + b
            if i < last and self.cfg.activation == "tanh":
                h = ad.tanh(h)
        return h

    def forward_and_jacobian(self, x, wrt: int | None = None) -> tuple[Tensor, Tensor]:
        """Output and its Jacobian w.r.t. the first ``wrt`` input entries."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check(x)
        wrt = self.cfg.input_dim if wrt is None else wrt
        tanh_act = self.cfg.activation == "tanh"
        pre = []
        h = x
        last = len(self.weights) - 1
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            a = W @ h + b
            if i < last:
                pre.append(a)
                h = ad.tanh(a) if tanh_act else a
            else:
                h = a

        J = self.weights[last]
        for i in range(last - 1, -1, -1):
            if tanh_act:
                J = J * ad.tanh_derivative(pre[i]).T
            W = self.weights[i]
            if i == 0 and wrt != self.cfg.input_dim:
                W = W[:, :wrt]
            J = J @ W
        return h, J


class TransitionModel:
    """``z_next = z + net([z; u])`` (residual) or ``net([z; u])``."""

    def __init__(self, net: Mlp, state_dim: int, input_dim: int, residual: bool = True):
        if net.cfg.input_dim != state_dim + input_dim or net.cfg.output_dim != state_dim:
            raise DimensionError(
                f"transition net {net.cfg.input_dim}->{net.cfg.output_dim} does not fit "
                f"state_dim={state_dim}, input_dim={input_dim}"
            )
        self.net = net
        self.state_dim = state_dim
        self.input_dim = input_dim
        self.residual = residual
        self._eye = np.eye(state_dim)

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters()

    def _inputs(self, z: Tensor, u) -> Tensor:
        if z.shape[-2] != self.state_dim:
            raise DimensionError(f"transition expects state dim {self.state_dim}, got {z.shape}")
        if self.input_dim == 0:
            return z
        if u is None:
            raise DimensionError(f"transition expects an input of dim {self.input_dim}")
        u = u if isinstance(u, Tensor) else Tensor(u)
        if u.shape[-2] != self.input_dim:
            raise DimensionError(f"transition expects input dim {self.input_dim}, got {u.shape}")
        return ad.concat([z, u], axis=-2)

    def __call__(self, z, u=None) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        out = self.net(self._inputs(z, u))
        return z + out if self.residual else out

    def forward_and_jacobian(self, z, u=None) -> tuple[Tensor, Tensor]:
        z = z if isinstance(z, Tensor) else Tensor(z)
        out, J = self.net.forward_and_jacobian(self._inputs(z, u), self.state_dim)
        if self.residual:
            return z + out, J + self._eye
        return out, J


class ObservationModel:
    """``x = net(z)``; control inputs never enter the observation."""

    def __init__(self, net: Mlp, state_dim: int, obs_dim: int):
        if net.cfg.input_dim != state_dim or net.cfg.output_dim != obs_dim:
            raise DimensionError(
                f"observation net {net.cfg.input_dim}->{net.cfg.output_dim} does not fit "
                f"state_dim={state_dim}, obs_dim={obs_dim}"
            )
        self.net = net
        self.state_dim = state_dim
        self.obs_dim = obs_dim

    def parameters(self) -> dict[str, Tensor]:
        return self.net.parameters()

    def __call__(self, z) -> Tensor:
        return self.net(z)

    def forward_and_jacobian(self, z) -> tuple[Tensor, Tensor]:
        return self.net.forward_and_jacobian(z)


class LinearTransition:
    """``z_next = A z + B u``; exact EKF reference case."""

    def __init__(self, A, B=None, learnable: bool = False):
        self.A = Tensor(A, requires_grad=learnable)
        self.B = None if B is None else Tensor(B, requires_grad=learnable)
        self.state_dim = self.A.rows
        self.input_dim = 0 if self.B is None else self.B.cols

    def parameters(self) -> dict[str, Tensor]:
        out = {"A": self.A}
        if self.B is not None:
            out["B"] = self.B
        return {k: v for k, v in out.items() if v.requires_grad}

    def __call__(self, z, u=None) -> Tensor:
        return self.forward_and_jacobian(z, u)[0]

    def forward_and_jacobian(self, z, u=None) -> tuple[Tensor, Tensor]:
        z = z if isinstance(z, Tensor) else Tensor(z)
        out = self.A @ z
        if self.B is not None and u is not None:
            out = out + self.B @ (u if isinstance(u, Tensor) else Tensor(u))
        return out, self.A


class LinearObservation:
    """``x = C z + d``."""

    def __init__(self, C, d=None, learnable: bool = False):
        self.C = Tensor(C, requires_grad=learnable)
        self.d = None if d is None else Tensor(np.reshape(d, (-1, 1)), requires_grad=learnable)
        self.state_dim = self.C.cols
        self.obs_dim = self.C.rows

    def parameters(self) -> dict[str, Tensor]:
        out = {"C": self.C}
        if self.d is not None:
            out["d"] = self.d
        return {k: v for k, v in out.items() if v.requires_grad}

    def __call__(self, z) -> Tensor:
        return self.forward_and_jacobian(z)[0]

    def forward_and_jacobian(self, z) -> tuple[Tensor, Tensor]:
        z = z if isinstance(z, Tensor) else Tensor(z)
        out = self.C @ z
        if self.d is not None:
            out = out + self.d
        return out, self.C


def jacobian_state(model, z, u=None) -> Tensor:
    """State Jacobian of a transition (``u`` given) or observation model."""
    if isinstance(model, (TransitionModel, LinearTransition)):
        return model.forward_and_jacobian(z, u)[1]
    return model.forward_and_jacobian(z)[1]


@dataclass(frozen=True)
class ModelConfig:
    state_dim: int
    input_dim: int
    obs_dim: int
    hidden_widths: tuple = (64, 64, 64)
    activation: str = "tanh"
    residual: bool = True
    transition_output_gain: float = 0.1
    q_init: float = 1e-2
    r_init: float = 1e-2
    sigma0_init: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.state_dim < 1 or self.obs_dim < 1 or self.input_dim < 0:
            raise ContractError("state_dim, obs_dim must be >= 1 and input_dim >= 0")

    @classmethod
    def for_dofs(cls, dofs: int, input_dim: int, obs_dim: int, **kw) -> "ModelConfig":
        """Latent dimension set to twice the modeled degrees of freedom."""
        return cls(state_dim=2 * dofs, input_dim=input_dim, obs_dim=obs_dim, **kw)


@dataclass
class NeuralEKF:
    """Everything training updates: networks, Q, R and the initial belief."""

    transition: object
    observation: object
    Q: CovarianceParam
    R: CovarianceParam
    init_mean: Tensor
    init_cov: CovarianceParam
    config: ModelConfig | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, cfg: ModelConfig, seed: int = 0) -> "NeuralEKF":
        seq = np.random.SeedSequence(seed)
        s_t, s_o = (int(s.generate_state(1)[0]) for s in seq.spawn(2))
        t_cfg = MlpConfig(
            cfg.state_dim + cfg.input_dim,
            cfg.state_dim,
            cfg.hidden_widths,
            cfg.activation,
            output_gain=cfg.transition_output_gain,
        )
        o_cfg = MlpConfig(cfg.state_dim, cfg.obs_dim, cfg.hidden_widths, cfg.activation)
        return cls(
            transition=TransitionModel(Mlp(t_cfg, seed=s_t), cfg.state_dim, cfg.input_dim, cfg.residual),
            observation=ObservationModel(Mlp(o_cfg, seed=s_o), cfg.state_dim, cfg.obs_dim),
            Q=CovarianceParam.from_variance(cfg.q_init, cfg.state_dim),
            R=CovarianceParam.from_variance(cfg.r_init, cfg.obs_dim),
            init_mean=Tensor(np.zeros((cfg.state_dim, 1)), requires_grad=True),
            init_cov=CovarianceParam.from_variance(cfg.sigma0_init, cfg.state_dim),
            config=cfg,
        )

    @property
    def state_dim(self) -> int:
        return self.init_mean.rows

    def parameters(self) -> dict[str, Tensor]:
        """Named learnable tensors in a fixed order."""
        out = {}
        for k, v in self.transition.parameters().items():
            out[f"transition.{k}"] = v
        for k, v in self.observation.parameters().items():
            out[f"observation.{k}"] = v
        out["Q.log_diag"] = self.Q.log_diag
        out["R.log_diag"] = self.R.log_diag
        if self.init_mean.requires_grad:
            out["init.mean"] = self.init_mean
        out["init.log_diag"] = self.init_cov.log_diag
        return out

    def init_belief(self) -> Gaussian:
        return Gaussian(self.init_mean, self.init_cov.materialize())

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None
