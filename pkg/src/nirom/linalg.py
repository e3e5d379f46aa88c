"""Dense eigensolvers and orthonormalization used by the compression and
mode-decomposition modules.

Symmetric problems (snapshot Gram matrices) go through a cyclic Jacobi
sweep; nonsymmetric ones (reduced propagation operators, at most a few
hundred rows) through Householder Hessenberg reduction and the Francis
double-shift QR iteration, with eigenvectors recovered by shifted inverse
iteration. References: Golub & Van Loan, "Matrix Computations", 4th ed.,
ch. 7-8.
"""

from __future__ import annotations

import numpy as np

from .errors import ConvergenceError, DimensionMismatchError


def orthonormal_columns(a: np.ndarray) -> np.ndarray:
    """Orthonormalize the columns of ``a`` by modified Gram-Schmidt.

    Two passes (re-orthogonalization) keep the result orthonormal to machine
    precision even for ill-conditioned input. Column signs are normalized so
    the largest-magnitude entry of each column is positive.
    """
    q = np.array(a, dtype=np.float64, copy=True)
    n, m = q.shape
    if m > n:
        raise DimensionMismatchError(f"cannot orthonormalize {m} columns in R^{n}")
    for _ in range(2):
        for j in range(m):
            for i in range(j):
                q[:, j] -= (q[:, i] @ q[:, j]) * q[:, i]
            nrm = np.linalg.norm(q[:, j])
            if nrm == 0.0:
                raise DimensionMismatchError("rank-deficient columns")
            q[:, j] /= nrm
    return fix_column_signs(q)


def fix_column_signs(q: np.ndarray) -> np.ndarray:
    """Flip columns so each one's largest-magnitude entry is positive."""
    idx = np.argmax(np.abs(q), axis=0)
    signs = np.sign(q[idx, np.arange(q.shape[1])])
    signs[signs == 0] = 1.0
    return q * signs[None, :]


def jacobi_eigh(a: np.ndarray, tol: float = 1e-14, max_sweeps: int = 60):
    """Eigendecomposition of a real symmetric matrix by cyclic Jacobi.

    Returns (eigenvalues, eigenvectors) with eigenvalues sorted descending
    and eigenvectors in the matching columns. Sweeps stop once the
    off-diagonal Frobenius norm falls below ``tol`` times the matrix norm.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionMismatchError("jacobi_eigh expects a square matrix")
    if n == 1:
        return a.diagonal().copy(), np.ones((1, 1))

    h = np.array(a, copy=True)
    v = np.eye(n)
    norm = np.linalg.norm(h)
    if norm == 0.0:
        return np.zeros(n), v

    # off-diagonal norm summed directly: the ||H||^2 - sum(diag^2) form
    # cancels catastrophically once the sweep is nearly converged
    off_mask = ~np.eye(n, dtype=bool)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(h[off_mask] ** 2))
        if off <= tol * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = h[p, q]
                if apq == 0.0:
                    continue
                app = h[p, p]
                aqq = h[q, q]
                tau = (aqq - app) / (2.0 * apq)
                t = np.sign(tau) / (abs(tau) + np.sqrt(1.0 + tau * tau))
                if tau == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                # rows p,q then columns p,q: H <- J^T H J
                hp = h[p, :].copy()
                hq = h[q, :].copy()
                h[p, :] = c * hp - s * hq
                h[q, :] = s * hp + c * hq
                hp = h[:, p].copy()
                hq = h[:, q].copy()
                h[:, p] = c * hp - s * hq
                h[:, q] = s * hp + c * hq
                h[p, q] = 0.0
                h[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        raise ConvergenceError("Jacobi sweep budget exhausted")

    evals = h.diagonal().copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], v[:, order]


def hessenberg(a: np.ndarray) -> np.ndarray:
    """Reduce a real square matrix to upper Hessenberg form (Householder)."""
    h = np.array(a, dtype=np.float64, copy=True)
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1:, k]
        nrm = np.linalg.norm(x)
        if nrm == 0.0:
            continue
        alpha = -np.sign(x[0]) * nrm if x[0] != 0.0 else -nrm
        u = x.copy()
        u[0] -= alpha
        unrm = np.linalg.norm(u)
        if unrm == 0.0:
            continue
        u /= unrm
        h[k + 1:, k:] -= 2.0 * np.outer(u, u @ h[k + 1:, k:])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ u, u)
        h[k + 1, k] = alpha
        h[k + 2:, k] = 0.0
    return h


def _eig2x2(a, b, c, d):
    """Eigenvalues of [[a, b], [c, d]] as a complex pair."""
    tr = a + d
    det = a * d - b * c
    disc = 0.25 * tr * tr - det
    if disc >= 0.0:
        root = np.sqrt(disc)
        return complex(0.5 * tr + root), complex(0.5 * tr - root)
    root = np.sqrt(-disc)
    return complex(0.5 * tr, root), complex(0.5 * tr, -root)


def _francis_step(h: np.ndarray, shift_trace: float, shift_det: float) -> None:
    """One implicit double-shift QR sweep on the active Hessenberg block."""
    n = h.shape[0]
    x = h[0, 0] * h[0, 0] + h[0, 1] * h[1, 0] - shift_trace * h[0, 0] + shift_det
    y = h[1, 0] * (h[0, 0] + h[1, 1] - shift_trace)
    z = h[2, 1] * h[1, 0]
    for k in range(n - 2):
        v = np.array([x, y, z])
        nrm = np.linalg.norm(v)
        if nrm > 0.0:
            alpha = -np.sign(v[0]) * nrm if v[0] != 0.0 else -nrm
            u = v.copy()
            u[0] -= alpha
            unrm = np.linalg.norm(u)
            if unrm > 0.0:
                u /= unrm
                r0 = max(0, k - 1)
                h[k:k + 3, r0:] -= 2.0 * np.outer(u, u @ h[k:k + 3, r0:])
                r1 = min(k + 4, n)
                h[:r1, k:k + 3] -= 2.0 * np.outer(h[:r1, k:k + 3] @ u, u)
        x = h[k + 1, k]
        y = h[k + 2, k]
        if k < n - 3:
            z = h[k + 3, k]
    # trailing 2-element reflection
    v = np.array([x, y])
    nrm = np.linalg.norm(v)
    if nrm > 0.0:
        alpha = -np.sign(v[0]) * nrm if v[0] != 0.0 else -nrm
        u = v.copy()
        u[0] -= alpha
        unrm = np.linalg.norm(u)
        if unrm > 0.0:
            u /= unrm
            r0 = max(0, n - 3)
            h[n - 2:, r0:] -= 2.0 * np.outer(u, u @ h[n - 2:, r0:])
            h[:, n - 2:] -= 2.0 * np.outer(h[:, n - 2:] @ u, u)


def eigvals(a: np.ndarray, max_iter_per_eig: int = 60) -> np.ndarray:
    """Eigenvalues of a real square matrix via Francis double-shift QR.

    Complex pairs come out of the quasi-triangular form's 2x2 blocks, so for
    real input the result is closed under conjugation.
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    if a.shape != (n, n):
        raise DimensionMismatchError("eigvals expects a square matrix")
    if n == 1:
        return a.astype(complex).reshape(1)
    if n == 2:
        return np.array(_eig2x2(a[0, 0], a[0, 1], a[1, 0], a[1, 1]))

    h = hessenberg(a)
    eps = np.finfo(np.float64).eps
    out: list[complex] = []
    hi = n - 1
    stuck = 0
    while hi >= 0:
        if hi == 0:
            out.append(complex(h[0, 0]))
            break
        # deflate negligible subdiagonals
        for k in range(1, hi + 1):
            if abs(h[k, k - 1]) <= eps * (abs(h[k, k]) + abs(h[k - 1, k - 1])):
                h[k, k - 1] = 0.0
        lo = hi
        while lo > 0 and h[lo, lo - 1] != 0.0:
            lo -= 1
        if lo == hi:
            out.append(complex(h[hi, hi]))
            hi -= 1
            stuck = 0
            continue
        if lo == hi - 1:
            out.extend(_eig2x2(h[lo, lo], h[lo, hi], h[hi, lo], h[hi, hi]))
            hi -= 2
            stuck = 0
            continue

        stuck += 1
        if stuck > max_iter_per_eig:
            raise ConvergenceError("QR iteration did not converge")
        block = h[lo:hi + 1, lo:hi + 1]
        if stuck % 12 == 0:
            # exceptional ad-hoc shift to break symmetric stalls
            s = abs(block[-1, -2]) + abs(block[-2, -3])
            shift_trace = 2.0 * s
            shift_det = s * s
        else:
            shift_trace = block[-2, -2] + block[-1, -1]
            shift_det = (block[-2, -2] * block[-1, -1]
                         - block[-2, -1] * block[-1, -2])
        _francis_step(block, shift_trace, shift_det)

    w = np.array(out, dtype=complex)
    order = np.lexsort((-w.imag, -w.real, -np.abs(w)))
    return w[order]


def eig(a: np.ndarray, seed: int = 0):
    """Eigenvalues and right eigenvectors of a real square matrix.

    Eigenvalues come from the QR iteration; each eigenvector is recovered by
    a few rounds of shifted inverse iteration from a seeded start. Vectors
    for conjugate eigenvalue pairs are exact conjugates. Clustered or
    defective spectra are out of scope (reduced operators here have well
    separated eigenvalues).
    """
    a = np.asarray(a, dtype=np.float64)
    n = a.shape[0]
    w = eigvals(a)
    v = np.zeros((n, n), dtype=complex)
    rng = np.random.default_rng(seed)
    start = rng.standard_normal(n) + 1j * rng.standard_normal(n)
    scale = max(np.max(np.abs(w)), 1e-30)
    done: dict[int, int] = {}
    for j in range(n):
        conj_src = done.get(j)
        if conj_src is not None:
            v[:, j] = np.conj(v[:, conj_src])
            continue
        lam = w[j]
        shift = lam + scale * 1e-9 * (1.0 + 1.0j)
        vec = start / np.linalg.norm(start)
        for _ in range(3):
            try:
                vec = np.linalg.solve(a - shift * np.eye(n), vec)
            except np.linalg.LinAlgError:
                shift = shift + scale * 1e-7
                continue
            vec = vec / np.linalg.norm(vec)
        # deterministic phase: largest-|.| entry made real positive
        k = int(np.argmax(np.abs(vec)))
        phase = vec[k] / abs(vec[k])
        vec = vec / phase
        v[:, j] = vec
        if lam.imag != 0.0:
            for jj in range(j + 1, n):
                if jj not in done and w[jj] == np.conj(lam):
                    done[jj] = j
                    break
    return w, v
