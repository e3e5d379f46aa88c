"""Rank-truncated decomposition of snapshot pairs into linearly evolving
modes (Tu et al.'s exact-mode variant).

The best-fit one-step operator is reduced through the rank-r singular
subspace of the first snapshot block, computed by the method of snapshots;
the small reduced operator's spectrum comes from the in-house Hessenberg/QR
solver. Time stamps are normalized to a unit step, so discrete eigenvalues
are per-step gains and forecasts at fractional steps use the principal
branch of the logarithm (frequencies above Nyquist alias; they are not
corrected).
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import linalg
from .errors import (
    CorruptHeaderError,
    DegenerateDataError,
    InvalidSpecError,
    NonFiniteValuesError,
    NonUniformTimesError,
    RankRangeError,
)
from .snapstore import FieldLayout, SnapshotSet, read_container, write_container

_RANK_RTOL = 1e-12
_IMAG_RTOL = 1e-8


@dataclass(frozen=True)
class DMDModel:
    rank: int
    modes: np.ndarray       # N x r, complex
    eigenvalues: np.ndarray  # r, complex, per unit step
    amplitudes: np.ndarray   # r, complex
    dt: float                # seconds per unit step
    t0: float
    fields: tuple[FieldLayout, ...]
    mesh_id: str = ""

    def __post_init__(self):
        self.modes.setflags(write=False)
        self.eigenvalues.setflags(write=False)
        self.amplitudes.setflags(write=False)

    @property
    def exponents(self) -> np.ndarray:
        """Continuous per-unit-step exponents ln(lambda), principal branch."""
        return np.log(self.eigenvalues)


def fit(snap: SnapshotSet, rank: int) -> DMDModel:
    """Learn modes, per-step eigenvalues, and amplitudes from the snapshots."""
    data = snap.data
    n, m = data.shape
    if m < 2:
        raise InvalidSpecError("need at least 2 snapshots")
    if not 1 <= rank <= min(n, m - 1):
        raise RankRangeError(f"rank {rank} outside 1..{min(n, m - 1)}")
    gaps = np.diff(snap.times)
    if m > 2 and not np.allclose(gaps, gaps[0], rtol=1e-9,
                                 atol=1e-12 * max(1.0, abs(snap.times[-1]))):
        raise NonUniformTimesError("dmd fit requires a uniform time grid")

    x1 = data[:, :-1]
    x2 = data[:, 1:]
    gram = x1.T @ x1
    evals, evecs = linalg.jacobi_eigh(gram)
    evals = np.clip(evals, 0.0, None)
    if evals[0] == 0.0:
        raise DegenerateDataError("all-zero snapshot matrix")
    # Gram eigenvalues below the eps floor are numerical null space; zero
    # them so the sigma_r rank test sees true deficiency
    evals[evals < 1e-14 * evals[0]] = 0.0
    sigma = np.sqrt(evals)
    if sigma[rank - 1] < _RANK_RTOL * sigma[0]:
        raise RankRangeError(
            f"singular value {rank} is below {_RANK_RTOL:g} of the leading one; "
            "reduce the truncation level"
        )
    v = evecs[:, :rank]
    sig_inv = 1.0 / sigma[:rank]
    u = x1 @ (v * sig_inv[None, :])          # N x r, left singular vectors
    proj = x2 @ (v * sig_inv[None, :])       # N x r, X2 V Sigma^-1
    a_tilde = u.T @ proj                     # r x r reduced operator

    lam, w = linalg.eig(a_tilde)
    modes = proj.astype(complex) @ w
    amplitudes, *_ = np.linalg.lstsq(modes, data[:, 0].astype(complex), rcond=None)
    return DMDModel(rank, modes, lam, amplitudes, float(gaps[0]),
                    float(snap.times[0]), snap.fields, snap.mesh_id)


def predict(model: DMDModel, times) -> SnapshotSet:
    """Forecast x(t) = Phi diag(lambda^s) b with s = (t - t0)/dt.

    Works at fractional steps and beyond the training horizon. For real
    training data the imaginary residual must stay below 1e-8 of the real
    part; it is verified and discarded.
    """
    times = np.asarray(times, dtype=np.float64)
    steps = (times - model.t0) / model.dt
    with np.errstate(over="raise", invalid="raise"):
        try:
            gains = np.exp(np.outer(model.exponents, steps))
        except FloatingPointError as exc:
            raise NonFiniteValuesError(
                f"forecast overflow: |lambda|>1 at large horizon ({exc})"
            ) from exc
    states = model.modes @ (gains * model.amplitudes[:, None])
    if not np.isfinite(states).all():
        raise NonFiniteValuesError("forecast overflow: non-finite states")
    max_imag = float(np.abs(states.imag).max())
    max_real = float(np.abs(states.real).max())
    if max_imag > _IMAG_RTOL * max(max_real, 1e-300):
        raise NonFiniteValuesError(
            f"imaginary residual {max_imag:g} exceeds {_IMAG_RTOL:g} x real scale"
        )
    return SnapshotSet(states.real, times, model.fields, model.mesh_id)


def spectrum_csv(model: DMDModel, path=None) -> str:
    """Eigen-spectrum export: re/im of lambda, |lambda|, re/im of ln(lambda), |b|."""
    buf = io.StringIO()
    buf.write("re_lambda,im_lambda,abs_lambda,re_omega,im_omega,abs_amplitude\n")
    omega = model.exponents
    for j in range(model.rank):
        lam = complex(model.eigenvalues[j])
        om = complex(omega[j])
        amp = abs(complex(model.amplitudes[j]))
        buf.write(f"{lam.real!r},{lam.imag!r},{abs(lam)!r},"
                  f"{om.real!r},{om.imag!r},{amp!r}\n")
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    return text


def save(model: DMDModel, path) -> None:
    """Modes stored as stacked real/imag blocks in the snapshot container."""
    n = model.modes.shape[0]
    matrix = np.vstack([model.modes.real, model.modes.imag])
    fields = (FieldLayout("modes_re", 0, n), FieldLayout("modes_im", n, n))
    write_container(path, matrix, np.arange(model.rank, dtype=np.float64), fields,
                    kind="dmd_model", extra={
                        "rank": model.rank,
                        "eigenvalues": [[ev.real, ev.imag] for ev in model.eigenvalues],
                        "amplitudes": [[b.real, b.imag] for b in model.amplitudes],
                        "dt": model.dt,
                        "t0": model.t0,
                        "mesh_id": model.mesh_id,
                        "data_fields": [{"name": f.name, "offset": f.offset,
                                         "length": f.length} for f in model.fields],
                    })


def load(path) -> DMDModel:
    matrix, _, _, manifest = read_container(path)
    if manifest.get("kind") != "dmd_model":
        raise CorruptHeaderError(f"{path}: container kind is not 'dmd_model'")
    n = matrix.shape[0] // 2
    modes = matrix[:n, :] + 1j * matrix[n:, :]
    lam = np.array([complex(re, im) for re, im in manifest["eigenvalues"]])
    amp = np.array([complex(re, im) for re, im in manifest["amplitudes"]])
    fields = tuple(FieldLayout(f["name"], f["offset"], f["length"])
                   for f in manifest["data_fields"])
    return DMDModel(int(manifest["rank"]), modes, lam, amp,
                    float(manifest["dt"]), float(manifest["t0"]), fields,
                    str(manifest.get("mesh_id", "")))
