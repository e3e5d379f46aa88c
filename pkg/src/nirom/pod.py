"""Truncated orthogonal bases from snapshot data via the method of snapshots.

The Gram matrix S^T S (M x M, with M far below the row count N in every
intended workload) is diagonalized by the cyclic Jacobi sweep in
:mod:`nirom.linalg`; basis vectors follow as S v / sigma. Basis signs are
normalized so repeated runs are bit-stable, and a final Gram-Schmidt pass
pins column orthonormality to machine precision even when the retained
spectrum spans many orders of magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from . import linalg
from .errors import (
    CorruptHeaderError,
    DegenerateDataError,
    DimensionMismatchError,
    InvalidSpecError,
    RankRangeError,
)
from .snapstore import (
    FieldLayout,
    SnapshotSet,
    read_container,
    write_container,
)

# modes whose energy falls below this fraction of the leading mode are
# numerical null space and are never retained
NULLSPACE_RTOL = 1e-14


@dataclass(frozen=True)
class TruncationRule:
    """Either keep enough modes for an energy fraction, or a fixed count."""

    kind: str  # "energy" | "fixed"
    tau: float | None = None
    m: int | None = None

    @staticmethod
    def energy(tau: float) -> "TruncationRule":
        if not 0.0 <= tau < 1.0:
            raise InvalidSpecError(f"energy tolerance must be in [0, 1), got {tau}")
        return TruncationRule("energy", tau=float(tau))

    @staticmethod
    def fixed(m: int) -> "TruncationRule":
        if m < 1:
            raise RankRangeError(f"mode count must be >= 1, got {m}")
        return TruncationRule("fixed", m=int(m))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tau": self.tau, "m": self.m}

    @staticmethod
    def from_dict(d: dict) -> "TruncationRule":
        return TruncationRule(d["kind"], d.get("tau"), d.get("m"))


@dataclass(frozen=True)
class LatentTrajectory:
    """m x M matrix of modal coefficients with its time stamps."""

    z: np.ndarray
    times: np.ndarray
    normalization: str = "none"  # none | unit_interval | unit_step

    def __post_init__(self):
        z = np.array(self.z, dtype=np.float64, copy=True)
        times = np.array(self.times, dtype=np.float64, copy=True)
        if z.ndim != 2:
            raise DimensionMismatchError("latent matrix must be 2-D")
        if times.shape != (z.shape[1],):
            raise DimensionMismatchError("times length must match latent columns")
        if times.size > 1 and not np.all(np.diff(times) > 0):
            raise InvalidSpecError("latent times must be strictly increasing")
        if not (np.isfinite(z).all() and np.isfinite(times).all()):
            raise InvalidSpecError("latent trajectory contains non-finite values")
        z.setflags(write=False)
        times.setflags(write=False)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "times", times)

    @property
    def dim(self) -> int:
        return self.z.shape[0]

    @property
    def n_samples(self) -> int:
        return self.z.shape[1]


@dataclass(frozen=True)
class PODBasis:
    """Orthonormal basis with the full singular-value spectrum.

    ``fields``/``mesh_id`` record the source layout so reconstructions are
    valid snapshot sets.
    """

    theta: np.ndarray
    sigma: np.ndarray
    m: int
    mean: np.ndarray | None
    rule: TruncationRule
    fields: tuple[FieldLayout, ...]
    mesh_id: str = ""

    def __post_init__(self):
        self.theta.setflags(write=False)
        self.sigma.setflags(write=False)
        if self.mean is not None:
            self.mean.setflags(write=False)

    @property
    def n_rows(self) -> int:
        return self.theta.shape[0]

    def energy_captured(self) -> float:
        total = float(np.sum(self.sigma**2))
        return float(np.sum(self.sigma[: self.m] ** 2)) / total if total > 0 else 1.0


def _centered(data: np.ndarray, center: bool):
    if center:
        mean = data.mean(axis=1)
        return data - mean[:, None], mean
    return data, None


def compute_basis(snap: SnapshotSet, rule: TruncationRule,
                  center: bool = False) -> PODBasis:
    """Basis of the whole row space (all fields jointly)."""
    theta, sigma, m, mean = _basis_arrays(snap.data, rule, center)
    return PODBasis(theta, sigma, m, mean, rule, snap.fields, snap.mesh_id)


def _basis_arrays(data: np.ndarray, rule: TruncationRule, center: bool):
    n, M = data.shape
    if M < 2:
        raise InvalidSpecError("need at least 2 snapshots for a basis")
    x, mean = _centered(np.asarray(data, dtype=np.float64), center)
    if not np.any(x):
        raise DegenerateDataError("all-zero snapshot matrix")

    gram = x.T @ x
    evals, evecs = linalg.jacobi_eigh(gram)
    evals = np.clip(evals, 0.0, None)
    sigma = np.sqrt(evals)[: min(n, M)]

    cutoff = NULLSPACE_RTOL * evals[0]
    m_max = int(np.sum(evals[: min(n, M)] > cutoff))
    if m_max == 0:
        raise DegenerateDataError("snapshot matrix has no energy above null space")

    if rule.kind == "fixed":
        if not 1 <= rule.m <= min(n, M):
            raise RankRangeError(
                f"fixed mode count {rule.m} outside 1..{min(n, M)}"
            )
        m = min(rule.m, m_max)
    else:
        total = float(np.sum(sigma**2))
        cum = np.cumsum(sigma**2)
        # smallest prefix holding at least (1 - tau) of the energy
        m = int(np.searchsorted(cum, (1.0 - rule.tau) * total - 1e-300) + 1)
        m = min(m, m_max)

    theta = x @ evecs[:, :m]
    theta /= sigma[:m][None, :]
    theta = linalg.orthonormal_columns(theta)
    return theta, sigma, m, mean


@dataclass(frozen=True)
class FieldBasisSet:
    """Independent bases per physical variable, stacked in latent space."""

    bases: tuple[tuple[str, PODBasis], ...]
    fields: tuple[FieldLayout, ...]
    mesh_id: str = ""

    @property
    def latent_dims(self) -> tuple[int, ...]:
        return tuple(b.m for _, b in self.bases)

    @property
    def total_dim(self) -> int:
        return sum(self.latent_dims)


def compute_field_bases(snap: SnapshotSet, rule: TruncationRule,
                        center: bool = False) -> FieldBasisSet:
    """Apply the truncation rule to each field segment independently."""
    bases = []
    for f in snap.fields:
        theta, sigma, m, mean = _basis_arrays(snap.data[f.rows(), :], rule, center)
        basis = PODBasis(theta, sigma, m, mean, rule,
                         (FieldLayout(f.name, 0, f.length),), snap.mesh_id)
        bases.append((f.name, basis))
    return FieldBasisSet(tuple(bases), snap.fields, snap.mesh_id)


def project(basis: PODBasis, snap: SnapshotSet) -> LatentTrajectory:
    """Modal coefficients z = Theta^T (S - mean)."""
    if snap.n_rows != basis.n_rows:
        raise DimensionMismatchError(
            f"snapshot has {snap.n_rows} rows, basis expects {basis.n_rows}"
        )
    x = snap.data
    if basis.mean is not None:
        x = x - basis.mean[:, None]
    return LatentTrajectory(basis.theta.T @ x, snap.times)


def reconstruct(basis: PODBasis, latent: LatentTrajectory) -> SnapshotSet:
    """Lift latent coefficients back to the full space."""
    if latent.dim != basis.m:
        raise DimensionMismatchError(
            f"latent has {latent.dim} rows, basis retains {basis.m} modes"
        )
    x = basis.theta @ latent.z
    if basis.mean is not None:
        x = x + basis.mean[:, None]
    return SnapshotSet(x, latent.times, basis.fields, basis.mesh_id)


def project_fields(bases: FieldBasisSet, snap: SnapshotSet) -> LatentTrajectory:
    """Stack per-field projections into one latent trajectory."""
    if snap.fields != bases.fields:
        raise DimensionMismatchError("snapshot fields do not match basis set")
    blocks = []
    for (name, basis), f in zip(bases.bases, snap.fields):
        x = snap.data[f.rows(), :]
        if basis.mean is not None:
            x = x - basis.mean[:, None]
        blocks.append(basis.theta.T @ x)
    return LatentTrajectory(np.vstack(blocks), snap.times)


def reconstruct_fields(bases: FieldBasisSet, latent: LatentTrajectory) -> SnapshotSet:
    if latent.dim != bases.total_dim:
        raise DimensionMismatchError(
            f"latent has {latent.dim} rows, basis set expects {bases.total_dim}"
        )
    n = sum(f.length for f in bases.fields)
    out = np.empty((n, latent.n_samples))
    row = 0
    for (name, basis), f in zip(bases.bases, bases.fields):
        block = latent.z[row:row + basis.m, :]
        x = basis.theta @ block
        if basis.mean is not None:
            x = x + basis.mean[:, None]
        out[f.rows(), :] = x
        row += basis.m
    return SnapshotSet(out, latent.times, bases.fields, bases.mesh_id)


def save_basis(basis: PODBasis, path) -> None:
    """Persist in the snapshot container with kind "basis"."""
    extra = {
        "m": basis.m,
        "sigma": basis.sigma.tolist(),
        "mean": None if basis.mean is None else basis.mean.tolist(),
        "rule": basis.rule.to_dict(),
        "mesh_id": basis.mesh_id,
    }
    # matrix = retained modes, vector slot = their singular values
    write_container(path, basis.theta, basis.sigma[: basis.m], basis.fields,
                    kind="basis", extra=extra)


def load_basis(path) -> PODBasis:
    matrix, vector, fields, manifest = read_container(path)
    if manifest.get("kind") != "basis":
        raise CorruptHeaderError(f"{path}: container kind is not 'basis'")
    sigma = np.asarray(manifest["sigma"], dtype=np.float64)
    mean = manifest.get("mean")
    mean_arr = None if mean is None else np.asarray(mean, dtype=np.float64)
    rule = TruncationRule.from_dict(manifest["rule"])
    return PODBasis(matrix, sigma, int(manifest["m"]), mean_arr, rule,
                    fields, str(manifest.get("mesh_id", "")))


def save_latent(latent: LatentTrajectory, path) -> None:
    fields = (FieldLayout("z", 0, latent.dim),)
    write_container(path, latent.z, latent.times, fields, kind="latent",
                    extra={"normalization": latent.normalization})


def load_latent(path) -> LatentTrajectory:
    matrix, vector, _, manifest = read_container(path)
    if manifest.get("kind") != "latent":
        raise CorruptHeaderError(f"{path}: container kind is not 'latent'")
    return LatentTrajectory(matrix, vector, manifest.get("normalization", "none"))
