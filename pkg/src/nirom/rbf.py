"""Kernel interpolation of one-step latent increments.

The model learns dz(z) = z^{k+1} - z^k as a radial-basis interpolant over the
training states and advances with explicit first-order stepping, optionally
subdividing each training step into s substeps with increments scaled by 1/s.
Error accumulates linearly with horizon by construction; that is the price of
the method's training cost (a single linear solve).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    CorruptHeaderError,
    DimensionMismatchError,
    InvalidSpecError,
    NonUniformTimesError,
    SingularSystemError,
    SolverError,
)
from .pod import LatentTrajectory
from .snapstore import FieldLayout, read_container, write_container

_SOLVE_RTOL = 1e-8


def kernel_value(kernel: str, r: np.ndarray, c: float) -> np.ndarray:
    if kernel == "gaussian":
        return np.exp(-((c * r) ** 2))
    if kernel == "multiquadric":
        return np.sqrt(1.0 + (c * r) ** 2)
    if kernel == "inverse_multiquadric":
        return 1.0 / np.sqrt(1.0 + (c * r) ** 2)
    raise InvalidSpecError(f"unknown kernel {kernel!r}")


@dataclass(frozen=True)
class RBFModel:
    centers: np.ndarray  # m x K training states z^0..z^{K-1}
    weights: np.ndarray  # m x K interpolation coefficients
    kernel: str
    shape_c: float
    lam: float
    dt_train: float
    t0_train: float

    def __post_init__(self):
        self.centers.setflags(write=False)
        self.weights.setflags(write=False)

    @property
    def dim(self) -> int:
        return self.centers.shape[0]

    @property
    def n_centers(self) -> int:
        return self.centers.shape[1]


def _pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Euclidean distances between columns of a and columns of b."""
    aa = np.sum(a * a, axis=0)
    bb = np.sum(b * b, axis=0)
    sq = aa[:, None] + bb[None, :] - 2.0 * (a.T @ b)
    return np.sqrt(np.maximum(sq, 0.0))


def fit(latent: LatentTrajectory, kernel: str = "gaussian", shape_c: float = 0.01,
        lam: float | None = None) -> RBFModel:
    """Interpolate one-step increments over the training states.

    Solves (Phi + lam*I) w = dZ^T with Phi_jk = phi(||z^j - z^k||; c) built
    from the first M-1 states. Cholesky first (Phi is symmetric and, for the
    gaussian and inverse-multiquadric kernels with distinct centers, positive
    definite); least squares on factorization breakdown. ``lam=None`` picks a
    trace-scaled default; pass 0 for exact interpolation.
    """
    if latent.n_samples < 3:
        raise InvalidSpecError("need at least 3 samples to fit increments")
    if not shape_c > 0:
        raise InvalidSpecError("shape factor must be positive")
    gaps = np.diff(latent.times)
    if not np.allclose(gaps, gaps[0], rtol=1e-9, atol=1e-12 * max(1.0, abs(latent.times[-1]))):
        raise NonUniformTimesError("rbf fit requires a uniform training time grid")

    centers = latent.z[:, :-1]
    dz = latent.z[:, 1:] - latent.z[:, :-1]
    K = centers.shape[1]
    phi = kernel_value(kernel, _pairwise_distances(centers, centers), shape_c)
    if lam is None:
        lam = 1e-10 * float(np.trace(phi)) / K
    if lam < 0:
        raise InvalidSpecError("regularization must be >= 0")

    system = phi + lam * np.eye(K)
    rhs = dz.T
    try:
        chol = np.linalg.cholesky(system)
        w = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        # iterative refinement recovers interpolation exactness when the
        # kernel matrix is poorly conditioned but numerically definite
        for _ in range(2):
            resid = rhs - system @ w
            w += np.linalg.solve(chol.T, np.linalg.solve(chol, resid))
    except np.linalg.LinAlgError:
        w, *_ = np.linalg.lstsq(system, rhs, rcond=None)

    if lam == 0.0:
        residual = np.linalg.norm(phi @ w - rhs)
        scale = np.linalg.norm(rhs)
        if scale > 0 and residual > _SOLVE_RTOL * scale:
            cond = np.linalg.cond(phi)
            raise SingularSystemError(
                f"kernel system solve residual {residual / scale:.2e} "
                f"(condition number {cond:.2e}); centers may coincide"
            )
    return RBFModel(centers.copy(), w.T.copy(), kernel, float(shape_c),
                    float(lam), float(gaps[0]), float(latent.times[0]))


def evaluate(model: RBFModel, z) -> np.ndarray:
    """Interpolated increment sum_k w_k phi(||z - z^k||; c)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.dim,):
        raise DimensionMismatchError(f"state has shape {z.shape}, expected ({model.dim},)")
    r = _pairwise_distances(z[:, None], model.centers)[0]
    return model.weights @ kernel_value(model.kernel, r, model.shape_c)


def predict(model: RBFModel, z0, n_steps: int, substeps: int = 1) -> LatentTrajectory:
    """Explicit stepping z <- z + (1/s) * dz(z), s*n_steps states past z0.

    Output spacing is dt_train / substeps; the initial state is included as
    the first column.
    """
    if substeps < 1 or int(substeps) != substeps:
        raise InvalidSpecError("substep ratio must be a positive integer")
    if n_steps < 0:
        raise InvalidSpecError("n_steps must be >= 0")
    z = np.asarray(z0, dtype=np.float64)
    if z.shape != (model.dim,):
        raise DimensionMismatchError(f"z0 has shape {z.shape}, expected ({model.dim},)")
    s = int(substeps)
    total = s * int(n_steps)
    out = np.empty((model.dim, total + 1))
    out[:, 0] = z
    # divergence is detected and raised; silence the transient overflows
    with np.errstate(over="ignore", invalid="ignore"):
        for j in range(total):
            z = z + evaluate(model, z) / s
            if not np.isfinite(z).all():
                raise SolverError(f"rbf prediction diverged after {j + 1} substeps")
            out[:, j + 1] = z
    dt = model.dt_train / s
    times = model.t0_train + dt * np.arange(total + 1)
    return LatentTrajectory(out, times)


def save(model: RBFModel, path) -> None:
    matrix = np.vstack([model.centers, model.weights])
    fields = (FieldLayout("centers", 0, model.dim),
              FieldLayout("weights", model.dim, model.dim))
    times = model.t0_train + model.dt_train * np.arange(model.n_centers)
    write_container(path, matrix, times, fields, kind="rbf_model", extra={
        "kernel": model.kernel,
        "shape_c": model.shape_c,
        "lambda": model.lam,
        "dt_train": model.dt_train,
        "t0_train": model.t0_train,
        "dim": model.dim,
    })


def load(path) -> RBFModel:
    matrix, _, _, manifest = read_container(path)
    if manifest.get("kind") != "rbf_model":
        raise CorruptHeaderError(f"{path}: container kind is not 'rbf_model'")
    dim = int(manifest["dim"])
    return RBFModel(matrix[:dim, :], matrix[dim:, :], manifest["kernel"],
                    float(manifest["shape_c"]), float(manifest["lambda"]),
                    float(manifest["dt_train"]), float(manifest["t0_train"]))
