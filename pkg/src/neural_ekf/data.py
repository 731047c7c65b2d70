"""Datasets, the Duffing simulator, CSV ingestion and preprocessing.

A :class:`TimeSeriesDataset` holds equal-rate trajectories of inputs ``u``
(``T x d_u``) and responses ``x`` (``T x d_x``). Every preprocessing function
is pure: it returns a new dataset and appends one provenance entry.

The learned transition absorbs the sampling interval, so a model must be
used on data sampled at the rate it was trained on.
"""

from __future__ import annotations

import copy
import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy import signal

from .autodiff import ContractError
from .util import worker_count

MANIFEST_FORMAT = "neural-ekf-dataset/1"


class DataError(ValueError):
    """Malformed input data (bad CSV, missing columns, NaNs)."""


class SimulationError(RuntimeError):
    pass


@dataclass
class Trajectory:
    u: np.ndarray
    x: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64).reshape(len(self.u), -1)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(len(self.x), -1)
        if len(self.u) != len(self.x):
            raise ContractError(f"u has {len(self.u)} rows but x has {len(self.x)}")

    @property
    def length(self) -> int:
        return len(self.x)


@dataclass
class Normalization:
    """Per-channel affine record; ``flagged`` channels were left unscaled."""

    u_mean: np.ndarray
    u_std: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    u_flagged: list = field(default_factory=list)
    x_flagged: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "u_mean": [float(v) for v in self.u_mean],
            "u_std": [float(v) for v in self.u_std],
            "x_mean": [float(v) for v in self.x_mean],
            "x_std": [float(v) for v in self.x_std],
            "u_flagged": [int(i) for i in self.u_flagged],
            "x_flagged": [int(i) for i in self.x_flagged],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Normalization":
        return cls(
            np.asarray(d["u_mean"], float),
            np.asarray(d["u_std"], float),
            np.asarray(d["x_mean"], float),
            np.asarray(d["x_std"], float),
            list(d.get("u_flagged", [])),
            list(d.get("x_flagged", [])),
        )

    @classmethod
    def identity(cls, d_u: int, d_x: int) -> "Normalization":
        return cls(np.zeros(d_u), np.ones(d_u), np.zeros(d_x), np.ones(d_x))


@dataclass
class TimeSeriesDataset:
    trajectories: list
    sample_rate: float
    input_names: list
    output_names: list
    normalization: Normalization | None = None
    provenance: list = field(default_factory=list)

    def __post_init__(self):
        if self.trajectories:
            d_u = self.trajectories[0].u.shape[1]
            d_x = self.trajectories[0].x.shape[1]
            for i, tr in enumerate(self.trajectories):
                if tr.u.shape[1] != d_u or tr.x.shape[1] != d_x:
                    raise ContractError(f"trajectory {i} has inconsistent channel counts")
            if len(self.input_names) != d_u or len(self.output_names) != d_x:
                raise ContractError("channel names do not match the data")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def input_dim(self) -> int:
        return len(self.input_names)

    @property
    def obs_dim(self) -> int:
        return len(self.output_names)

    def lengths(self) -> list[int]:
        return [tr.length for tr in self.trajectories]

    def replace(self, trajectories=None, op: str | None = None, **kw) -> "TimeSeriesDataset":
        """Copy with new trajectories/fields and an extra provenance entry."""
        out = TimeSeriesDataset(
            trajectories=self.trajectories if trajectories is None else trajectories,
            sample_rate=kw.pop("sample_rate", self.sample_rate),
            input_names=list(self.input_names),
            output_names=list(self.output_names),
            normalization=kw.pop("normalization", self.normalization),
            provenance=copy.deepcopy(self.provenance),
        )
        if op is not None:
            out.provenance.append({"op": op, "args": kw})
        return out

    def arrays(self, indices=None) -> tuple[np.ndarray, np.ndarray]:
        """Stack (a subset of) equal-length trajectories into ``(B, T, d)`` arrays."""
        trs = self.trajectories if indices is None else [self.trajectories[i] for i in indices]
        lengths = {tr.length for tr in trs}
        if len(lengths) != 1:
            raise ContractError(f"trajectories have differing lengths {sorted(lengths)}; window them first")
        return np.stack([tr.u for tr in trs]), np.stack([tr.x for tr in trs])


# --- Duffing oscillator ----------------------------------------------------


DEFAULT_STIFFNESS = ((4.0, -0.5), (0.5, 4.0))
SYMMETRIC_STIFFNESS = ((4.0, -0.5), (-0.5, 4.0))


@dataclass
class DuffingConfig:
    """``M x'' + C x' + K x + k_n x_1^3 e_1 = u`` (cubic term added per unit mass)."""

    mass: np.ndarray = field(default_factory=lambda: np.eye(2))
    stiffness: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_STIFFNESS))
    damping: np.ndarray = field(default_factory=lambda: 0.5 * np.eye(2))
    cubic: float = 1.0
    dt: float = 0.01
    steps: int = 500
    forcing: str = "random"
    forcing_std: float = 1.0
    init_range: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.mass = np.atleast_2d(np.asarray(self.mass, float))
        self.stiffness = np.atleast_2d(np.asarray(self.stiffness, float))
        self.damping = np.atleast_2d(np.asarray(self.damping, float))
        n = self.mass.shape[0]
        for name, m in (("mass", self.mass), ("stiffness", self.stiffness), ("damping", self.damping)):
            if m.shape != (n, n):
                raise ContractError(f"{name} matrix must be {n}x{n}, got {m.shape}")
        if abs(np.linalg.det(self.mass)) < 1e-12:
            raise ContractError("mass matrix must be invertible")
        if self.dt <= 0:
            raise ContractError("dt must be positive")
        if self.steps < 1:
            raise ContractError("steps must be >= 1")
        if self.forcing not in ("free", "random"):
            raise ContractError(f"forcing must be 'free' or 'random', got {self.forcing!r}")

    @property
    def dofs(self) -> int:
        return self.mass.shape[0]

    @classmethod
    def from_dict(cls, d: dict) -> "DuffingConfig":
        d = dict(d)
        if d.pop("symmetric_stiffness", False) and "stiffness" not in d:
            d["stiffness"] = np.array(SYMMETRIC_STIFFNESS)
        scale = d.pop("stiffness_scale", 1.0)
        cfg = cls(**d)
        cfg.stiffness = cfg.stiffness * scale
        return cfg

    def derivative(self, s: np.ndarray, u: np.ndarray) -> np.ndarray:
        n = self.dofs
        x, v = s[:n], s[n:]
        Minv = self._minv()
        acc = -Minv @ (self.stiffness @ x) - Minv @ (self.damping @ v) + Minv @ u
        acc[0] -= self.cubic * x[0] ** 3
        return np.concatenate([v, acc])

    def _minv(self) -> np.ndarray:
        m = getattr(self, "_minv_cache", None)
        if m is None:
            m = np.linalg.inv(self.mass)
            object.__setattr__(self, "_minv_cache", m)
        return m


def rk4_step(state, t: float, dt: float, deriv):
    """One classical Runge-Kutta step of ``ds/dt = deriv(s, t)``."""
    if dt <= 0:
        raise ContractError("dt must be positive")
    k1 = deriv(state, t)
    k2 = deriv(state + 0.5 * dt * k1, t + 0.5 * dt)
    k3 = deriv(state + 0.5 * dt * k2, t + 0.5 * dt)
    k4 = deriv(state + dt * k3, t + dt)
    return state + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _simulate_one(cfg: DuffingConfig, index: int, rng: np.random.Generator, s0=None):
    n = cfg.dofs
    s = rng.uniform(-cfg.init_range, cfg.init_range, size=2 * n) if s0 is None else np.asarray(s0, float)
    if cfg.forcing == "random":
        u = rng.normal(0.0, cfg.forcing_std, size=(cfg.steps, n))
    else:
        u = np.zeros((cfg.steps, n))
    states = np.empty((cfg.steps, 2 * n))
    for k in range(cfg.steps):
        states[k] = s
        if k == cfg.steps - 1:
            break
        uk = u[k]
        s = rk4_step(s, k * cfg.dt, cfg.dt, lambda y, _t: cfg.derivative(y, uk))
        if not np.all(np.isfinite(s)) or np.max(np.abs(s)) > 1e6:
            raise SimulationError(f"trajectory {index} diverged at step {k + 1}")
    return Trajectory(u=u, x=states[:, :n].copy(), meta={"source": "duffing", "index": index, "states": states})


def simulate_duffing(cfg: DuffingConfig, n: int, initial_states=None) -> TimeSeriesDataset:
    """``n`` trajectories; row ``k`` holds the displacements at ``k * dt`` and the
    force applied over ``[k dt, (k + 1) dt)``. Initial states are uniform in
    ``[-init_range, init_range]`` unless given."""
    seeds = np.random.SeedSequence(cfg.seed).spawn(n)

    def run(i):
        s0 = None if initial_states is None else initial_states[i]
        return _simulate_one(cfg, i, np.random.default_rng(seeds[i]), s0)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        trajs = list(pool.map(run, range(n)))
    dofs = cfg.dofs
    ds = TimeSeriesDataset(
        trajectories=trajs,
        sample_rate=1.0 / cfg.dt,
        input_names=[f"u{i + 1}" for i in range(dofs)],
        output_names=[f"x{i + 1}" for i in range(dofs)],
    )
    ds.provenance.append({"op": "simulate_duffing", "args": {"n": n, **duffing_config_dict(cfg)}})
    return ds


def duffing_config_dict(cfg: DuffingConfig) -> dict:
    return {
        "mass": cfg.mass.tolist(),
        "stiffness": cfg.stiffness.tolist(),
        "damping": cfg.damping.tolist(),
        "cubic": cfg.cubic,
        "dt": cfg.dt,
        "steps": cfg.steps,
        "forcing": cfg.forcing,
        "forcing_std": cfg.forcing_std,
        "init_range": cfg.init_range,
        "seed": cfg.seed,
    }


@dataclass
class LinearSystemConfig:
    """Scalar ``z' = a z + b u + w``, ``x = c z + v`` with Gaussian ``w``, ``v``."""

    a: float = 0.95
    b: float = 0.5
    c: float = 1.0
    process_std: float = 0.05
    obs_std: float = 0.1
    forcing_std: float = 1.0
    steps: int = 50
    rate: float = 10.0
    seed: int = 0


def simulate_linear(cfg: LinearSystemConfig, n: int) -> TimeSeriesDataset:
    """Small linear-Gaussian dataset used for quick training checks."""
    rng = np.random.default_rng(cfg.seed)
    trajs = []
    for i in range(n):
        u = rng.normal(0.0, cfg.forcing_std, size=(cfg.steps, 1))
        w = rng.normal(0.0, cfg.process_std, size=cfg.steps)
        v = rng.normal(0.0, cfg.obs_std, size=cfg.steps)
        z = np.empty(cfg.steps)
        z[0] = rng.normal()
        for k in range(1, cfg.steps):
            z[k] = cfg.a * z[k - 1] + cfg.b * u[k - 1, 0] + w[k]
        trajs.append(Trajectory(u=u, x=(cfg.c * z + v)[:, None], meta={"source": "linear", "index": i}))
    ds = TimeSeriesDataset(trajs, cfg.rate, ["u1"], ["x1"])
    ds.provenance.append({"op": "simulate_linear", "args": {"n": n, **asdict(cfg)}})
    return ds


# --- CSV I/O ---------------------------------------------------------------


def load_csv(path, input_columns, output_columns, rate: float, delimiter: str = ",") -> TimeSeriesDataset:
    """One trajectory from a headed CSV; columns are selected by name."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in [*input_columns, *output_columns] if c not in header]
        if missing:
            raise DataError(f"{path}: missing column(s) {missing}")
        idx_u = [header.index(c) for c in input_columns]
        idx_x = [header.index(c) for c in output_columns]
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
            values = []
            for j, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"{path}: non-numeric cell at row {lineno}, column {header[j]!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"{path}: non-finite value at row {lineno}, column {header[j]!r}")
                values.append(v)
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.asarray(rows)
    tr = Trajectory(u=table[:, idx_u].reshape(len(table), -1), x=table[:, idx_x].reshape(len(table), -1),
                    meta={"file": path.name})
    ds = TimeSeriesDataset([tr], float(rate), list(input_columns), list(output_columns))
    ds.provenance.append({"op": "load_csv", "args": {"file": path.name}})
    return ds


def save_csv(tr: Trajectory, path, input_names, output_names, delimiter: str = ",") -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow([*input_names, *output_names])
        for urow, xrow in zip(tr.u, tr.x):
            w.writerow([repr(float(v)) for v in (*urow, *xrow)])


def write_dataset(ds: TimeSeriesDataset, directory, stem: str = "traj") -> Path:
    """Write one CSV per trajectory plus ``manifest.yaml``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    width = max(4, len(str(len(ds))))
    files = []
    for i, tr in enumerate(ds.trajectories):
        name = f"{stem}_{i:0{width}d}.csv"
        save_csv(tr, directory / name, ds.input_names, ds.output_names)
        files.append(name)
    manifest = {
        "format": MANIFEST_FORMAT,
        "sample_rate": float(ds.sample_rate),
        "input_columns": list(ds.input_names),
        "output_columns": list(ds.output_names),
        "files": files,
        "provenance": _plain(ds.provenance),
    }
    if ds.normalization is not None:
        manifest["normalization"] = ds.normalization.to_dict()
    path = directory / "manifest.yaml"
    path.write_text(yaml.safe_dump(manifest, sort_keys=False), encoding="utf-8")
    return path


def read_dataset(manifest_path) -> TimeSeriesDataset:
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.yaml"
    if not manifest_path.exists():
        raise FileNotFoundError(str(manifest_path))
    m = yaml.safe_load(manifest_path.read_text(encoding="utf-8"))
    if not isinstance(m, dict) or m.get("format") != MANIFEST_FORMAT:
        raise DataError(f"{manifest_path}: not a {MANIFEST_FORMAT} manifest")
    trajs = []
    for name in m["files"]:
        one = load_csv(manifest_path.parent / name, m["input_columns"], m["output_columns"], m["sample_rate"])
        trajs.extend(one.trajectories)
    ds = TimeSeriesDataset(trajs, float(m["sample_rate"]), list(m["input_columns"]), list(m["output_columns"]))
    if "normalization" in m:
        ds.normalization = Normalization.from_dict(m["normalization"])
    ds.provenance = list(m.get("provenance") or [])
    return ds


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items() if k != "states"}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


# --- preprocessing ---------------------------------------------------------


def _resample_array(a: np.ndarray, t_old: np.ndarray, t_new: np.ndarray) -> np.ndarray:
    return np.stack([np.interp(t_new, t_old, a[:, j]) for j in range(a.shape[1])], axis=1)


def resample(ds: TimeSeriesDataset, target_rate: float) -> TimeSeriesDataset:
    """Linear interpolation onto a uniform grid at ``target_rate`` Hz."""
    if target_rate <= 0:
        raise ContractError("target rate must be positive")
    out = []
    for i, tr in enumerate(ds.trajectories):
        if tr.length == 0:
            raise ContractError(f"trajectory {i} is empty")
        if target_rate == ds.sample_rate:
            out.append(Trajectory(tr.u.copy(), tr.x.copy(), dict(tr.meta)))
            continue
        duration = (tr.length - 1) / ds.sample_rate
        n_new = int(math.floor(duration * target_rate + 1e-9)) + 1
        t_old = np.arange(tr.length) / ds.sample_rate
        t_new = np.arange(n_new) / target_rate
        out.append(Trajectory(_resample_array(tr.u, t_old, t_new), _resample_array(tr.x, t_old, t_new), dict(tr.meta)))
    return ds.replace(out, op="resample", target_rate=float(target_rate), sample_rate=float(target_rate))


def butterworth_filter(ds: TimeSeriesDataset, kind: str, cutoff: float, order: int = 4,
                       channels: str = "both") -> TimeSeriesDataset:
    """Zero-phase (forward-backward) Butterworth filtering of every channel."""
    nyq = ds.sample_rate / 2.0
    if not 0 < cutoff < nyq:
        raise ContractError(f"cutoff {cutoff} Hz must lie in (0, {nyq}) Hz")
    btype = {"high-pass": "highpass", "highpass": "highpass", "low-pass": "lowpass", "lowpass": "lowpass"}.get(kind)
    if btype is None:
        raise ContractError(f"unknown filter kind {kind!r}")
    sos = signal.butter(order, cutoff, btype=btype, fs=ds.sample_rate, output="sos")

    def run(a):
        if a.shape[1] == 0:
            return a.copy()
        return signal.sosfiltfilt(sos, a, axis=0)

    out = []
    for tr in ds.trajectories:
        u = run(tr.u) if channels in ("both", "inputs") else tr.u.copy()
        x = run(tr.x) if channels in ("both", "outputs") else tr.x.copy()
        out.append(Trajectory(u, x, dict(tr.meta)))
    return ds.replace(out, op="butterworth_filter", kind=btype, cutoff=float(cutoff), order=int(order),
                      channels=channels)


def _channel_stats(blocks: list[np.ndarray], tol: float = 1e-12):
    cat = np.concatenate(blocks, axis=0)
    mean = cat.mean(axis=0)
    std = cat.std(axis=0)
    flagged = [int(j) for j in np.flatnonzero(std <= tol * np.maximum(1.0, np.abs(mean)))]
    for j in flagged:
        mean[j], std[j] = 0.0, 1.0
    return mean, std, flagged


def fit_normalization(ds: TimeSeriesDataset) -> Normalization:
    u_mean, u_std, u_flag = _channel_stats([tr.u for tr in ds.trajectories])
    x_mean, x_std, x_flag = _channel_stats([tr.x for tr in ds.trajectories])
    return Normalization(u_mean, u_std, x_mean, x_std, u_flag, x_flag)


def apply_normalization(ds: TimeSeriesDataset, norm: Normalization) -> TimeSeriesDataset:
    out = [
        Trajectory((tr.u - norm.u_mean) / norm.u_std, (tr.x - norm.x_mean) / norm.x_std, dict(tr.meta))
        for tr in ds.trajectories
    ]
    return ds.replace(out, op="standardize", normalization=norm)


def standardize(ds: TimeSeriesDataset, norm: Normalization | None = None):
    """Zero-mean, unit-variance channels; returns ``(dataset, record)``.

    Constant channels are flagged in the record and passed through unchanged.
    """
    norm = fit_normalization(ds) if norm is None else norm
    return apply_normalization(ds, norm), norm


def destandardize(x: np.ndarray, norm: Normalization, which: str = "x", variance: bool = False) -> np.ndarray:
    mean, std = (norm.x_mean, norm.x_std) if which == "x" else (norm.u_mean, norm.u_std)
    if variance:
        return np.asarray(x) * std**2
    return np.asarray(x) * std + mean


def window(ds: TimeSeriesDataset, length: int, stride: int) -> TimeSeriesDataset:
    """Fixed-length windows starting at 0, stride, 2*stride, ..."""
    if length < 1 or stride < 1:
        raise ContractError("length and stride must be >= 1")
    out = []
    for i, tr in enumerate(ds.trajectories):
        if length > tr.length:
            raise ContractError(f"window length {length} exceeds trajectory {i} (length {tr.length})")
        for start in range(0, tr.length - length + 1, stride):
            meta = {k: v for k, v in tr.meta.items() if k != "states"}
            meta.update({"parent": i, "start": start})
            out.append(Trajectory(tr.u[start:start + length].copy(), tr.x[start:start + length].copy(), meta))
    return ds.replace(out, op="window", length=int(length), stride=int(stride))
