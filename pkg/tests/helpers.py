import numpy as np

from neural_ekf.autodiff import Tape, Tensor


def numeric_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` over every entry of ``x``."""
    x = np.array(x, dtype=float)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + h
        fp = fn(x)
        x[idx] = old - h
        fm = fn(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
    return g


def tape_grad(build, *values):
    """Gradient of ``build(*tensors)`` (a 1x1 Tensor) w.r.t. each array in ``values``."""
    leaves = [Tensor(v, requires_grad=True) for v in values]
    with Tape() as tape:
        out = build(*leaves)
        tape.backward(out)
    return [leaf.grad for leaf in leaves]


def rel_err(a, b) -> float:
    a, b = np.asarray(a, float), np.asarray(b, float)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return float(np.max(np.abs(a - b)) / denom)


def random_spd(rng, d: int, cond: float = 10.0, batch=()) -> np.ndarray:
    q, _ = np.linalg.qr(rng.normal(size=(*batch, d, d)))
    eig = np.exp(rng.uniform(0, np.log(cond), size=(*batch, d)))
    return (q * eig[..., None, :]) @ np.swapaxes(q, -1, -2)


def random_stable(rng, d: int, radius: float = 0.9) -> np.ndarray:
    A = rng.normal(size=(d, d))
    r = max(abs(np.linalg.eigvals(A)))
    return A * (radius * rng.uniform(0.3, 1.0) / r)


def joint_gaussian_marginals(A, B, C, Q, R, m0, P0, x, u=None):
    """Filtered and smoothed latent marginals of a linear-Gaussian model by
    conditioning the joint density of (z_0..z_T, x_1..x_T) directly.

    Returns lists ``filtered`` (t = 1..T) and ``smoothed`` (t = 0..T) of (mean, cov).
    """
    x = np.asarray(x, float)
    T, dx = x.shape
    dz = A.shape[0]
    n_noise = dz * (T + 1) + dx * T
    # z_t = mz[t] + Lz[t] @ e, with e = (z0 - m0, w_1..w_T, v_1..v_T)
    mz, Lz = [np.asarray(m0, float).ravel()], [np.zeros((dz, n_noise))]
    Lz[0][:, :dz] = np.eye(dz)
    for t in range(1, T + 1):
        drive = np.zeros(dz) if u is None or t == 1 else B @ np.asarray(u, float)[t - 2]
        mz.append(A @ mz[-1] + drive)
        L = A @ Lz[-1]
        L[:, dz * t:dz * (t + 1)] += np.eye(dz)
        Lz.append(L)
    mx, Lx = [], []
    for t in range(1, T + 1):
        mx.append(C @ mz[t])
        L = C @ Lz[t]
        off = dz * (T + 1) + dx * (t - 1)
        L[:, off:off + dx] += np.eye(dx)
        Lx.append(L)
    noise = np.zeros((n_noise, n_noise))
    noise[:dz, :dz] = P0
    for t in range(1, T + 1):
        noise[dz * t:dz * (t + 1), dz * t:dz * (t + 1)] = Q
        off = dz * (T + 1) + dx * (t - 1)
        noise[off:off + dx, off:off + dx] = R

    def condition(t_z, n_obs):
        Lo = np.vstack(Lx[:n_obs])
        mo = np.concatenate(mx[:n_obs])
        Szz = Lz[t_z] @ noise @ Lz[t_z].T
        Szo = Lz[t_z] @ noise @ Lo.T
        Soo = Lo @ noise @ Lo.T
        gain = np.linalg.solve(Soo, Szo.T).T
        return mz[t_z] + gain @ (x[:n_obs].ravel() - mo), Szz - gain @ Szo.T

    filtered = [condition(t, t) for t in range(1, T + 1)]
    smoothed = [condition(t, T) for t in range(T + 1)]
    return filtered, smoothed


def model_gradient_check(model, loss_fn, h: float = 1e-6, floor: float = 1e-8):
    """Tape gradient vs central differences for every entry of every parameter.

    ``loss_fn()`` must rebuild the scalar loss from the model's current values.
    Returns ``{name: relative error}``, where each error is
    ``|analytic - numeric| / max(|analytic|, |numeric|)`` maximized over the
    entries whose analytic gradient exceeds ``floor`` in magnitude.
    """
    params = model.parameters()
    model.zero_grad()
    with Tape() as tape:
        tape.backward(loss_fn())
    analytic = {k: np.array(p.grad) for k, p in params.items()}
    errors = {}
    for name, p in params.items():
        worst = 0.0
        base = p.value.copy()
        for idx in np.ndindex(base.shape):
            if abs(analytic[name][idx]) < floor:
                continue
            vals = []
            for step in (h, -h):
                bumped = base.copy()
                bumped[idx] += step
                p.value = bumped
                vals.append(loss_fn().item())
            p.value = base
            fd = (vals[0] - vals[1]) / (2 * h)
            a = analytic[name][idx]
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd)))
        errors[name] = worst
    return errors
