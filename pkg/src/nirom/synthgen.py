"""Seeded synthetic snapshot generators with known structure.

Three kinds stand in for high-fidelity solver output:

* ``linear_system`` -- a low-dimensional linear map z_{k+1} = A z_k lifted to
  N dimensions by a seeded orthonormal matrix. A's spectrum is returned as
  metadata, giving an exact oracle for mode-decomposition fits.
* ``traveling_wave`` -- a Gaussian pulse translating at constant speed on a
  periodic grid; advection-dominated, so its singular values decay slowly.
* ``periodic_wake`` -- a steady component plus up to eight spatial patterns
  oscillating at fixed frequencies, mimicking periodic vortex shedding.

All random draws depend only on (seed, N, mode count), never on the time
grid, so the same spec evaluated on a finer or extended grid produces the
exact continuation of the same trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
import numpy as np

from .errors import InvalidSpecError
from .snapstore import FieldLayout, SnapshotSet

KINDS = ("linear_system", "traveling_wave", "periodic_wake")
MAX_WAKE_MODES = 8


@dataclass(frozen=True)
class GeneratorSpec:
    kind: str
    n_dof: int
    n_samples: int
    dt: float
    seed: int
    t0: float = 0.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidSpecError(f"unknown generator kind {self.kind!r}")
        if self.n_dof < 1:
            raise InvalidSpecError("n_dof must be >= 1")
        if self.n_samples < 2:
            raise InvalidSpecError("n_samples must be >= 2")
        if not self.dt > 0:
            raise InvalidSpecError("dt must be positive")


@dataclass(frozen=True)
class GeneratedData:
    snapshots: SnapshotSet
    metadata: dict


def spec_from_dict(d: dict) -> GeneratorSpec:
    return GeneratorSpec(
        kind=d["kind"],
        n_dof=int(d["n_dof"]),
        n_samples=int(d["n_samples"]),
        dt=float(d["dt"]),
        seed=int(d.get("seed", 0)),
        t0=float(d.get("t0", 0.0)),
        params=dict(d.get("params", {})),
    )


def spec_to_dict(spec: GeneratorSpec) -> dict:
    return {
        "kind": spec.kind,
        "n_dof": spec.n_dof,
        "n_samples": spec.n_samples,
        "dt": spec.dt,
        "seed": spec.seed,
        "t0": spec.t0,
        "params": spec.params,
    }


def spec_from_json(text: str) -> GeneratorSpec:
    return spec_from_dict(json.loads(text))


def _field_layout(spec: GeneratorSpec, default_names) -> tuple[FieldLayout, ...]:
    names = spec.params.get("fields", default_names)
    if not names:
        return (FieldLayout("u", 0, spec.n_dof),)
    if spec.n_dof % len(names) != 0:
        raise InvalidSpecError(
            f"n_dof={spec.n_dof} not divisible into {len(names)} fields"
        )
    size = spec.n_dof // len(names)
    return tuple(FieldLayout(str(nm), i * size, size) for i, nm in enumerate(names))


def _parse_eigenvalues(raw) -> list[complex]:
    """Reals stay 1x1 blocks; [re, im] pairs become 2x2 rotation blocks."""
    out: list[complex] = []
    for item in raw:
        if isinstance(item, (list, tuple)):
            re, im = float(item[0]), float(item[1])
            out.append(complex(re, abs(im)))
        else:
            out.append(complex(float(item), 0.0))
    if not out:
        raise InvalidSpecError("linear_system needs at least one eigenvalue")
    return out


def _linear_blocks(eigenvalues: list[complex]):
    """Real block-diagonal matrix realizing the requested spectrum."""
    dim = sum(1 if ev.imag == 0.0 else 2 for ev in eigenvalues)
    a = np.zeros((dim, dim))
    pos = 0
    for ev in eigenvalues:
        if ev.imag == 0.0:
            a[pos, pos] = ev.real
            pos += 1
        else:
            a[pos:pos + 2, pos:pos + 2] = [[ev.real, -ev.imag],
                                           [ev.imag, ev.real]]
            pos += 2
    return a, dim


def _linear_state_at(eigenvalues, z0, steps):
    """Closed-form z(s) = A^s z0 for (possibly fractional) step counts."""
    d = z0.size
    out = np.zeros((d, steps.size))
    integral = np.allclose(steps, np.round(steps), atol=1e-9)
    pos = 0
    for ev in eigenvalues:
        if ev.imag == 0.0:
            lam = ev.real
            if lam < 0.0 and not integral:
                raise InvalidSpecError(
                    "fractional steps undefined for negative real eigenvalues"
                )
            if integral:
                out[pos, :] = np.sign(lam) ** np.round(steps) * np.abs(lam) ** np.round(steps) * z0[pos] \
                    if lam < 0.0 else lam ** steps * z0[pos]
            else:
                out[pos, :] = lam ** steps * z0[pos]
            pos += 1
        else:
            rho = abs(ev)
            theta = np.angle(ev)
            gain = rho ** steps
            ang = theta * steps
            c, s = np.cos(ang), np.sin(ang)
            out[pos, :] = gain * (c * z0[pos] - s * z0[pos + 1])
            out[pos + 1, :] = gain * (s * z0[pos] + c * z0[pos + 1])
            pos += 2
    return out


def _gen_linear_system(spec: GeneratorSpec, times: np.ndarray):
    eigenvalues = _parse_eigenvalues(spec.params.get("eigenvalues", [0.9]))
    a, dim = _linear_blocks(eigenvalues)
    if dim > spec.n_dof:
        raise InvalidSpecError(
            f"latent dimension {dim} exceeds n_dof {spec.n_dof}"
        )
    z0 = np.asarray(spec.params.get("initial_state", np.ones(dim)), dtype=np.float64)
    if z0.shape != (dim,):
        raise InvalidSpecError(f"initial_state must have length {dim}")

    from .linalg import orthonormal_columns

    rng = np.random.default_rng(spec.seed)
    lift = orthonormal_columns(rng.standard_normal((spec.n_dof, dim)))
    steps = (times - spec.t0) / spec.dt
    z = _linear_state_at(eigenvalues, z0, steps)
    data = lift @ z
    meta = {
        "eigenvalues": eigenvalues,
        "matrix": a,
        "lift": lift,
        "initial_state": z0,
        "latent_dim": dim,
        "spectral_radius": max(abs(ev) for ev in eigenvalues),
    }
    return data, meta, _field_layout(spec, None)


def _gen_traveling_wave(spec: GeneratorSpec, times: np.ndarray):
    n = spec.n_dof
    speed = float(spec.params.get("speed", 1.0))
    width = float(spec.params.get("width", max(n / 32.0, 1.5)))
    center0 = float(spec.params.get("center", n / 4.0))
    if width <= 0:
        raise InvalidSpecError("pulse width must be positive")
    grid = np.arange(n, dtype=np.float64)
    centers = center0 + speed * (times - spec.t0)
    # periodic minimum-image distance keeps column norms translation-invariant
    delta = grid[:, None] - centers[None, :]
    delta = (delta + 0.5 * n) % n - 0.5 * n
    data = np.exp(-0.5 * (delta / width) ** 2)
    meta = {"speed": speed, "width": width, "center": center0}
    return data, meta, _field_layout(spec, None)


def _gen_periodic_wake(spec: GeneratorSpec, times: np.ndarray):
    n = spec.n_dof
    n_modes = int(spec.params.get("n_modes", 3))
    if not 1 <= n_modes <= MAX_WAKE_MODES:
        raise InvalidSpecError(f"n_modes must be in 1..{MAX_WAKE_MODES}")
    freqs = np.asarray(
        spec.params.get("frequencies",
                        [float(spec.params.get("base_frequency", 3.0)) * (j + 1)
                         for j in range(n_modes)]),
        dtype=np.float64,
    )
    if freqs.shape != (n_modes,):
        raise InvalidSpecError("frequencies must list one value per mode")
    amps = np.asarray(
        spec.params.get("amplitudes", [1.0 / (j + 1) ** 2 for j in range(n_modes)]),
        dtype=np.float64,
    )
    if amps.shape != (n_modes,):
        raise InvalidSpecError("amplitudes must list one value per mode")
    steady_scale = float(spec.params.get("steady_scale", 1.0))

    rng = np.random.default_rng(spec.seed)
    steady = rng.standard_normal(n) * steady_scale
    patterns = np.empty((n, n_modes))
    phases = np.empty((n, n_modes))
    for j in range(n_modes):
        patterns[:, j] = rng.standard_normal(n) * amps[j]
        phases[:, j] = rng.uniform(0.0, 2.0 * np.pi, n)

    data = np.repeat(steady[:, None], times.size, axis=1)
    for j in range(n_modes):
        data += patterns[:, j][:, None] * np.sin(
            2.0 * np.pi * freqs[j] * times[None, :] + phases[:, j][:, None]
        )
    meta = {
        "frequencies": freqs,
        "amplitudes": amps,
        "steady": steady,
        "patterns": patterns,
        "phases": phases,
        "rank_bound": 2 * n_modes + 1,
    }
    default_fields = ["p", "v_x", "v_y"] if n % 3 == 0 else None
    return data, meta, _field_layout(spec, default_fields)


_GENERATORS = {
    "linear_system": _gen_linear_system,
    "traveling_wave": _gen_traveling_wave,
    "periodic_wake": _gen_periodic_wake,
}


def generate_at(spec: GeneratorSpec, times) -> GeneratedData:
    """Evaluate the spec's trajectory on an arbitrary time grid."""
    times = np.asarray(times, dtype=np.float64)
    data, meta, fields = _GENERATORS[spec.kind](spec, times)
    snap = SnapshotSet(data, times, fields, mesh_id=f"synthetic:{spec.kind}:{spec.seed}")
    return GeneratedData(snap, meta)


def generate(spec: GeneratorSpec) -> GeneratedData:
    """Evaluate on the spec's own uniform grid: t0 + k*dt, k = 0..M-1."""
    times = spec.t0 + spec.dt * np.arange(spec.n_samples, dtype=np.float64)
    return generate_at(spec, times)
