"""Latent dynamics learned as an ODE right-hand side.

A dense network F(t, z; w) defines dz/dt; trajectories come from a fixed-step
fourth-order Runge-Kutta scheme or the adaptive Dormand-Prince 5(4) pair with
PI step control and dense output. Training differentiates the whole-trajectory
mean squared error either exactly through the stored RK4 stages (discrete
mode) or with the continuous adjoint system integrated backward in time with
gradient injections at each observation (adjoint mode).

Dormand & Prince (1980); Hairer, Norsett & Wanner, "Solving ODEs I" for the
step controller and the dense-output polynomial; Chen et al. (2018) for the
adjoint formulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import neuralnet as nn
from .errors import (
    CorruptHeaderError,
    DimensionMismatchError,
    InvalidSpecError,
    NonFiniteValuesError,
    SolverError,
    TrainingDivergedError,
)
from .pod import LatentTrajectory

_GRID_RTOL = 1e-9


@dataclass(frozen=True)
class SolverSpec:
    method: str = "rk4"  # rk4 | dopri5
    h: float | None = None  # rk4 step; None = query-grid spacing
    rtol: float = 1e-6
    atol: float = 1e-8
    h_init: float | None = None
    h_min: float = 1e-10
    max_steps: int = 100000

    def __post_init__(self):
        if self.method not in ("rk4", "dopri5"):
            raise InvalidSpecError(f"unknown solver method {self.method!r}")
        if self.h is not None and not self.h > 0:
            raise InvalidSpecError("rk4 step size must be positive")
        if not (self.rtol > 0 and self.atol > 0 and self.h_min > 0):
            raise InvalidSpecError("solver tolerances must be positive")

    def to_dict(self) -> dict:
        return {"method": self.method, "h": self.h, "rtol": self.rtol,
                "atol": self.atol, "h_init": self.h_init, "h_min": self.h_min,
                "max_steps": self.max_steps}

    @staticmethod
    def from_dict(d: dict) -> "SolverSpec":
        return SolverSpec(
            method=d.get("method", "rk4"),
            h=d.get("h"),
            rtol=float(d.get("rtol", 1e-6)),
            atol=float(d.get("atol", 1e-8)),
            h_init=d.get("h_init"),
            h_min=float(d.get("h_min", 1e-10)),
            max_steps=int(d.get("max_steps", 100000)),
        )


@dataclass(frozen=True)
class TimeNormalization:
    """Affine map from original time units onto the training interval [0,1]."""

    t_ref: float
    scale: float

    def apply(self, t):
        return (np.asarray(t, dtype=np.float64) - self.t_ref) / self.scale

    def invert(self, s):
        return self.t_ref + self.scale * np.asarray(s, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"t_ref": self.t_ref, "scale": self.scale}

    @staticmethod
    def from_dict(d: dict) -> "TimeNormalization":
        return TimeNormalization(float(d["t_ref"]), float(d["scale"]))


def normalize_times(times):
    """Map strictly increasing times affinely onto [0, 1]."""
    times = np.asarray(times, dtype=np.float64)
    if times.size < 2:
        raise InvalidSpecError("need at least 2 times to normalize")
    if not np.all(np.diff(times) > 0):
        raise InvalidSpecError("times must be strictly increasing")
    tmap = TimeNormalization(float(times[0]), float(times[-1] - times[0]))
    return tmap.apply(times), tmap


@dataclass
class NODEModel:
    net: nn.MLPNet
    latent_dim: int
    augment_dim: int = 0
    time_input: bool = False
    solver: SolverSpec = field(default_factory=SolverSpec)
    time_map: TimeNormalization | None = None
    history: list = field(default_factory=list)

    @property
    def state_dim(self) -> int:
        return self.latent_dim + self.augment_dim

    def __post_init__(self):
        want_in = self.state_dim + (1 if self.time_input else 0)
        if self.net.in_dim != want_in or self.net.out_dim != self.state_dim:
            raise DimensionMismatchError(
                f"dynamics net maps {self.net.in_dim}->{self.net.out_dim}, "
                f"model needs {want_in}->{self.state_dim}"
            )


def build_node(latent_dim: int, hidden=(256,), activation: str = "elu",
               augment_dim: int = 0, time_input: bool = False,
               solver: SolverSpec | None = None, seed: int = 0) -> NODEModel:
    """Seeded dynamics net: hidden layers with the given activation, linear output."""
    if latent_dim < 1 or augment_dim < 0:
        raise InvalidSpecError("latent_dim must be >= 1 and augment_dim >= 0")
    d = latent_dim + augment_dim
    dims = (d + (1 if time_input else 0), *hidden, d)
    layers = [
        nn.LayerSpec(dims[i], dims[i + 1],
                     activation if i < len(dims) - 2 else "linear")
        for i in range(len(dims) - 1)
    ]
    return NODEModel(nn.MLPNet(layers, seed=seed), latent_dim, augment_dim,
                     time_input, solver or SolverSpec())


def _net_input(model: NODEModel, t: float, y: np.ndarray) -> np.ndarray:
    if model.time_input:
        return np.concatenate([y, [t]])[:, None]
    return y[:, None]


def _rhs(model: NODEModel, t: float, y: np.ndarray) -> np.ndarray:
    try:
        out, _ = nn.forward(model.net, _net_input(model, t, y), "infer")
    except NonFiniteValuesError as exc:
        raise SolverError(f"non-finite dynamics output at t={t:g}") from exc
    return out[:, 0]


def _rhs_vjp(model: NODEModel, t: float, y: np.ndarray, a: np.ndarray):
    """Returns (F(t,y), a^T dF/dw, a^T dF/dy)."""
    try:
        out, cache = nn.forward(model.net, _net_input(model, t, y), "infer")
    except NonFiniteValuesError as exc:
        raise SolverError(f"non-finite dynamics output at t={t:g}") from exc
    gw, gx = nn.backward(model.net, cache, a[:, None])
    gy = gx[:, 0]
    if model.time_input:
        gy = gy[:-1]
    return out[:, 0], gw, gy


def _check_state(y: np.ndarray, t: float) -> None:
    if not np.isfinite(y).all():
        raise SolverError(f"non-finite state at t={t:g}")


def _rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + 0.5 * h, y + 0.5 * h * k1)
    k3 = f(t + 0.5 * h, y + 0.5 * h * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _rk4_solve(f, y0, times, spec: SolverSpec):
    """Fixed-step RK4 hitting the query grid.

    With ``spec.h`` unset, one step spans each query interval. With a fixed
    ``h``, query times must lie on the step grid, or be a uniform refinement
    of it (each step covering an integer number of query cells), in which
    case off-node queries are filled by linear interpolation.
    """
    times = np.asarray(times, dtype=np.float64)
    out = np.empty((y0.size, times.size))
    out[:, 0] = y0
    if times.size == 1:
        return out

    if spec.h is None:
        y = y0
        for k in range(times.size - 1):
            y = _rk4_step(f, times[k], y, times[k + 1] - times[k])
            _check_state(y, times[k + 1])
            out[:, k + 1] = y
        return out

    h = spec.h
    span = float(times[-1] - times[0])
    ratios = (times - times[0]) / h
    on_grid = np.abs(ratios - np.round(ratios)) < _GRID_RTOL * max(1.0, ratios[-1])
    if on_grid.all():
        n_steps = int(round(ratios[-1]))
        want = {int(round(r)): i for i, r in enumerate(ratios)}
        y = y0
        t = float(times[0])
        for step in range(1, n_steps + 1):
            y = _rk4_step(f, t, y, h)
            t = times[0] + step * h
            _check_state(y, t)
            if step in want:
                out[:, want[step]] = y
        return out

    gaps = np.diff(times)
    if not np.allclose(gaps, gaps[0], rtol=_GRID_RTOL, atol=_GRID_RTOL * abs(span)):
        raise SolverError("rk4 with fixed h requires query times on a uniform grid")
    per_step = h / gaps[0]
    if abs(per_step - round(per_step)) > 1e-6 or round(per_step) < 1:
        raise SolverError(
            f"fixed step {h:g} incompatible with query spacing {gaps[0]:g}"
        )
    per_step = int(round(per_step))
    # integrate on the h grid, interpolate the finer query grid linearly
    n_steps = int(np.ceil((times.size - 1) / per_step))
    nodes = np.empty((y0.size, n_steps + 1))
    nodes[:, 0] = y0
    y = y0
    for s in range(n_steps):
        y = _rk4_step(f, times[0] + s * h, y, h)
        _check_state(y, times[0] + (s + 1) * h)
        nodes[:, s + 1] = y
    for i in range(1, times.size):
        pos = i / per_step
        lo = min(int(np.floor(pos)), n_steps - 1)
        w = pos - lo
        out[:, i] = (1.0 - w) * nodes[:, lo] + w * nodes[:, lo + 1]
    return out


# Dormand-Prince 5(4) tableau
_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
                  -17253 / 339200, 22 / 525, -1 / 40])
_DP_D = np.array([
    -12715105075 / 11282082432, 0.0, 87487479700 / 32700410799,
    -10690763975 / 1880347072, 701980252875 / 199316789632,
    -1453857185 / 822651844, 69997945 / 29380423,
])


def _dopri5_solve(f, y0, times, spec: SolverSpec, collect_stats: bool = False):
    """Adaptive Dormand-Prince with PI control and 4th-order dense output.

    Integrates in either time direction; states at the query times come from
    the dense-output polynomial of the accepted step covering them.
    """
    times = np.asarray(times, dtype=np.float64)
    n = y0.size
    out = np.empty((n, times.size))
    out[:, 0] = y0
    stats = [] if collect_stats else None
    if times.size == 1:
        return out, stats

    t_end = float(times[-1])
    t = float(times[0])
    direction = 1.0 if t_end > t else -1.0
    span = abs(t_end - t)
    y = y0.copy()
    sc0 = spec.atol + spec.rtol * np.abs(y)
    f0 = f(t, y)

    if spec.h_init is not None:
        h = abs(spec.h_init)
    else:
        # standard starting-step heuristic
        d0 = np.sqrt(np.mean((y / sc0) ** 2))
        d1 = np.sqrt(np.mean((f0 / sc0) ** 2))
        h = 0.01 * d0 / d1 if d0 > 1e-5 and d1 > 1e-5 else 1e-6 * max(span, 1.0)
        y1 = y + direction * h * f0
        f1 = f(t + direction * h, y1)
        d2 = np.sqrt(np.mean(((f1 - f0) / sc0) ** 2)) / h
        dmax = max(d1, d2)
        h1 = (0.01 / dmax) ** 0.2 if dmax > 1e-15 else max(1e-6, h * 1e-3)
        h = min(100.0 * h, h1, span)
    h = direction * min(h, span)

    k = np.empty((7, n))
    k[0] = f0
    next_query = 1
    facold = 1e-4
    safety, facmin, facmax, beta = 0.9, 0.2, 10.0, 0.04
    expo1 = 0.2 - beta * 0.75
    n_steps = 0

    while next_query < times.size:
        if abs(h) < spec.h_min:
            raise SolverError(f"step size underflow at t={t:g}")
        n_steps += 1
        if n_steps > spec.max_steps:
            raise SolverError(f"exceeded {spec.max_steps} steps")
        last = direction * (t + h - t_end) >= 0.0
        if last:
            h = t_end - t

        for i in range(1, 7):
            yi = y + h * sum(aij * k[j] for j, aij in enumerate(_DP_A[i]))
            k[i] = f(t + _DP_C[i] * h, yi)
        y_new = y + h * (_DP_B @ k)
        _check_state(y_new, t + h)
        err_vec = h * (_DP_E @ k)
        sc = spec.atol + spec.rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = np.sqrt(np.mean((err_vec / sc) ** 2))

        fac11 = err ** expo1 if err > 0.0 else facmin
        if err <= 1.0:
            # dense output for queries inside the accepted step
            t_new = t_end if last else t + h
            lo, hi = (t, t_new) if direction > 0 else (t_new, t)
            ydiff = y_new - y
            bspl = h * k[0] - ydiff
            rcont4 = ydiff - h * k[6] - bspl
            rcont5 = h * (_DP_D @ k)
            while next_query < times.size:
                tq = times[next_query]
                inside = (lo - 1e-12 * max(1.0, abs(lo)) <= tq
                          <= hi + 1e-12 * max(1.0, abs(hi)))
                if not inside:
                    break
                theta = (tq - t) / h
                out[:, next_query] = y + theta * (
                    ydiff + (1.0 - theta) * (bspl + theta * (rcont4 + (1.0 - theta) * rcont5))
                )
                next_query += 1
            if collect_stats:
                stats.append((t, h, err))
            t = t_new
            y = y_new
            k[0] = k[6]  # FSAL
            fac = fac11 / facold ** beta
            fac = max(1.0 / facmax, min(1.0 / facmin, fac / safety))
            h = h / fac
            facold = max(err, 1e-4)
        else:
            h = h / min(1.0 / facmin, fac11 / safety)
    return out, stats


def ode_solve(model: NODEModel, z0, query_times,
              collect_stats: bool = False):
    """States of the dynamics net at the query times, starting from z0.

    ``z0`` has the latent dimension; augmentation zeros are appended
    internally and the returned trajectory carries all state rows.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    if z0.shape != (model.latent_dim,):
        raise DimensionMismatchError(
            f"z0 has shape {z0.shape}, expected ({model.latent_dim},)"
        )
    times = np.asarray(query_times, dtype=np.float64)
    if times.ndim != 1 or times.size < 1:
        raise InvalidSpecError("query times must be a non-empty 1-D array")
    if times.size > 1 and not np.all(np.diff(times) > 0):
        raise InvalidSpecError("query times must be strictly increasing")
    y0 = np.concatenate([z0, np.zeros(model.augment_dim)])

    def f(t, y):
        return _rhs(model, t, y)

    if model.solver.method == "rk4":
        states = _rk4_solve(f, y0, times, model.solver)
        stats = None
    else:
        states, stats = _dopri5_solve(f, y0, times, model.solver, collect_stats)
    traj = LatentTrajectory(states, times)
    if collect_stats:
        return traj, stats
    return traj


def trajectory_loss(model: NODEModel, latent: LatentTrajectory) -> float:
    """MSE between the solved trajectory and the data, all times and components."""
    if latent.dim != model.latent_dim:
        raise DimensionMismatchError(
            f"latent dim {latent.dim} does not match model {model.latent_dim}"
        )
    sol = ode_solve(model, latent.z[:, 0], latent.times)
    diff = sol.z[: model.latent_dim, :] - latent.z
    return float(np.mean(diff * diff))


def _interval_substeps(model: NODEModel, gap: float) -> int:
    if model.solver.h is None:
        return 1
    ratio = gap / model.solver.h
    if abs(ratio - round(ratio)) > 1e-6 or round(ratio) < 1:
        raise SolverError(
            f"fixed step {model.solver.h:g} does not divide grid spacing {gap:g}"
        )
    return int(round(ratio))


def _loss_and_grad_discrete(model: NODEModel, latent: LatentTrajectory):
    """Exact gradient of the RK4-discretized trajectory loss."""
    if model.solver.method != "rk4":
        raise SolverError("discrete gradient mode requires the rk4 solver")
    z = latent.z
    times = latent.times
    m = model.latent_dim
    d = model.state_dim
    M = times.size
    count = m * M

    y = np.concatenate([z[:, 0], np.zeros(model.augment_dim)])
    tape = []  # per interval: list of (t, h, x1..x4 stage inputs)
    states = np.empty((d, M))
    states[:, 0] = y
    for kdx in range(M - 1):
        gap = times[kdx + 1] - times[kdx]
        nsub = _interval_substeps(model, gap)
        h = gap / nsub
        steps = []
        t = float(times[kdx])
        for _ in range(nsub):
            x1 = y
            k1 = _rhs(model, t, x1)
            x2 = y + 0.5 * h * k1
            k2 = _rhs(model, t + 0.5 * h, x2)
            x3 = y + 0.5 * h * k2
            k3 = _rhs(model, t + 0.5 * h, x3)
            x4 = y + h * k3
            k4 = _rhs(model, t + h, x4)
            y = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            _check_state(y, t + h)
            steps.append((t, h, x1, x2, x3, x4))
            t += h
        tape.append(steps)
        states[:, kdx + 1] = y

    diff = states[:m, :] - z
    loss = float(np.mean(diff * diff))

    lam = np.zeros(d)
    gw = np.zeros(model.net.n_params)
    scale = 2.0 / count
    for kdx in range(M - 1, 0, -1):
        lam[:m] += scale * diff[:, kdx]
        for t, h, x1, x2, x3, x4 in reversed(tape[kdx - 1]):
            k1b = (h / 6.0) * lam
            k2b = (h / 3.0) * lam
            k3b = (h / 3.0) * lam
            k4b = (h / 6.0) * lam
            new_lam = lam.copy()
            _, pw, u = _rhs_vjp(model, t + h, x4, k4b)
            gw += pw
            new_lam += u
            k3b = k3b + h * u
            _, pw, u = _rhs_vjp(model, t + 0.5 * h, x3, k3b)
            gw += pw
            new_lam += u
            k2b = k2b + 0.5 * h * u
            _, pw, u = _rhs_vjp(model, t + 0.5 * h, x2, k2b)
            gw += pw
            new_lam += u
            k1b = k1b + 0.5 * h * u
            _, pw, u = _rhs_vjp(model, t, x1, k1b)
            gw += pw
            new_lam += u
            lam = new_lam
    # the k=0 observation hits the fixed initial condition only; no w-gradient
    return loss, gw


def _loss_and_grad_adjoint(model: NODEModel, latent: LatentTrajectory):
    """Continuous adjoint: backward integration with observation injections."""
    z = latent.z
    times = latent.times
    m = model.latent_dim
    d = model.state_dim
    M = times.size
    count = m * M
    n_par = model.net.n_params

    sol = ode_solve(model, z[:, 0], times)
    diff = sol.z[:m, :] - z
    loss = float(np.mean(diff * diff))

    def aug_rhs(t, s):
        y = s[:d]
        a = s[d:2 * d]
        fy, pw, gy = _rhs_vjp(model, t, y, a)
        return np.concatenate([fy, -gy, -pw])

    state = np.concatenate([sol.z[:, M - 1], np.zeros(d), np.zeros(n_par)])
    scale = 2.0 / count
    for kdx in range(M - 1, 0, -1):
        state[d:d + m] += scale * diff[:, kdx]
        seg = np.array([times[kdx], times[kdx - 1]])
        if model.solver.method == "rk4":
            gap = times[kdx] - times[kdx - 1]
            nsub = _interval_substeps(model, gap)
            h = -gap / nsub
            t = float(times[kdx])
            y = state
            for _ in range(nsub):
                y = _rk4_step(aug_rhs, t, y, h)
                t += h
            _check_state(y, times[kdx - 1])
            state = y
        else:
            states, _ = _dopri5_solve(aug_rhs, state, seg, model.solver)
            state = states[:, -1]
    return loss, state[2 * d:]


def gradient(model: NODEModel, latent: LatentTrajectory,
             mode: str = "discrete") -> np.ndarray:
    """Parameter gradient of the trajectory loss."""
    if mode == "discrete":
        return _loss_and_grad_discrete(model, latent)[1]
    if mode == "adjoint":
        return _loss_and_grad_adjoint(model, latent)[1]
    raise InvalidSpecError(f"unknown gradient mode {mode!r}")


@dataclass(frozen=True)
class NodeTrainConfig:
    epochs: int
    optimizer: str = "rmsprop"
    lr: float = 1e-3
    schedule: nn.Schedule = field(default_factory=lambda: nn.Schedule.staircase(5000, 0.5))
    grad_mode: str = "discrete"
    momentum: float = 0.9


def train_node(model: NODEModel, latent: LatentTrajectory,
               cfg: NodeTrainConfig) -> list:
    """Full-trajectory gradient descent; one optimizer step per epoch.

    Times in original units are normalized onto [0,1] and the map stored on
    the model for prediction-time queries. Deterministic for a fixed seed
    (all randomness lives in the net initialization).
    """
    if latent.dim != model.latent_dim:
        raise DimensionMismatchError(
            f"latent dim {latent.dim} does not match model {model.latent_dim}"
        )
    if latent.normalization == "unit_interval":
        data = latent
        if model.time_map is None:
            model.time_map = TimeNormalization(0.0, 1.0)
    else:
        norm, tmap = normalize_times(latent.times)
        model.time_map = tmap
        data = LatentTrajectory(latent.z, norm, "unit_interval")

    loss_and_grad = (_loss_and_grad_discrete if cfg.grad_mode == "discrete"
                     else _loss_and_grad_adjoint)
    if cfg.grad_mode not in ("discrete", "adjoint"):
        raise InvalidSpecError(f"unknown gradient mode {cfg.grad_mode!r}")
    opt = nn.Optimizer(cfg.optimizer, lr=cfg.lr, schedule=cfg.schedule,
                       momentum=cfg.momentum)
    start = len(model.history)
    added: list[nn.LossRecord] = []
    for e in range(start, start + cfg.epochs):
        try:
            loss, gw = loss_and_grad(model, data)
        except SolverError as exc:
            raise TrainingDivergedError(
                f"solver failed at epoch {e}: {exc}", history=model.history
            ) from exc
        if not np.isfinite(loss) or not np.isfinite(gw).all():
            raise TrainingDivergedError(
                f"non-finite loss or gradient at epoch {e}", history=model.history
            )
        lr = opt.step(model.net, gw, e, loss=loss)
        rec = nn.LossRecord(e, loss, lr)
        model.history.append(rec)
        added.append(rec)
    return added


def predict(model: NODEModel, z0, query_times) -> LatentTrajectory:
    """Solve at query times given in original units (extrapolation legal)."""
    tmap = model.time_map or TimeNormalization(0.0, 1.0)
    times = np.asarray(query_times, dtype=np.float64)
    sol = ode_solve(model, np.asarray(z0, dtype=np.float64), tmap.apply(times))
    return LatentTrajectory(sol.z[: model.latent_dim, :], times)


def save_node(model: NODEModel, path) -> None:
    header = {
        "kind": "node",
        "latent_dim": model.latent_dim,
        "augment_dim": model.augment_dim,
        "time_input": model.time_input,
        "solver": model.solver.to_dict(),
        "time_map": None if model.time_map is None else model.time_map.to_dict(),
        "net": nn.net_header(model.net),
    }
    nn.save_checkpoint(path, header, nn._net_state(model.net))


def load_node(path) -> NODEModel:
    header, arrays = nn.load_checkpoint(path)
    if header.get("kind") != "node":
        raise CorruptHeaderError(f"{path}: checkpoint kind is not 'node'")
    net = nn.net_from_header(header["net"])
    nn._restore_net_state(net, arrays)
    tmap = header.get("time_map")
    return NODEModel(
        net,
        int(header["latent_dim"]),
        int(header["augment_dim"]),
        bool(header["time_input"]),
        SolverSpec.from_dict(header["solver"]),
        None if tmap is None else TimeNormalization.from_dict(tmap),
    )
