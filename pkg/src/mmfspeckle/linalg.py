"""Hermitian eigendecomposition and matrix exponential.

The eigensolver is a cyclic Jacobi method. Rotations are scheduled with the
round-robin (tournament) ordering, so each round zeroes ``n/2`` disjoint
pivots at once and can be applied with vectorized column/row updates.
"""

from __future__ import annotations

import numpy as np

JACOBI_TOL = 1e-12
HERMITIAN_TOL = 1e-12
MAX_SWEEPS = 60


class NotHermitianError(ValueError):
    pass


def _check_hermitian(h: np.ndarray) -> np.ndarray:
    h = np.asarray(h)
    if h.ndim != 2 or h.shape[0] != h.shape[1]:
        raise NotHermitianError(f"expected a square matrix, got shape {h.shape}")
    scale = max(1.0, float(np.linalg.norm(h)))
    if np.linalg.norm(h - h.conj().T) > HERMITIAN_TOL * scale:
        raise NotHermitianError("matrix is not Hermitian within tolerance")
    return h


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Pairings for the circle method; every index pair appears once per sweep."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for i in range(m // 2):
            a, b = players[i], players[m - 1 - i]
            if a < n and b < n:
                p.append(min(a, b))
                q.append(max(a, b))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _off_norm(a: np.ndarray) -> float:
    off = a[~np.eye(a.shape[0], dtype=bool)]
    return float(np.linalg.norm(off))


def jacobi_eigh(h: np.ndarray, tol: float = JACOBI_TOL) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition ``h = V diag(w) V^H`` of a Hermitian matrix.

    Returns eigenvalues in ascending order and the matching unitary ``V``.
    Iteration stops once the off-diagonal Frobenius norm falls below
    ``tol * max(1, ||h||_F)``.
    """
    h = _check_hermitian(h)
    n = h.shape[0]
    a = (h + h.conj().T).astype(np.complex128) / 2
    v = np.eye(n, dtype=np.complex128)
    if n == 1:
        return a.real.diagonal().copy(), v
    threshold = tol * max(1.0, float(np.linalg.norm(a)))
    rounds = _round_robin(n)

    for _ in range(MAX_SWEEPS):
        if _off_norm(a) <= threshold:
            break
        for p, q in rounds:
            apq = a[p, q]
            r = np.abs(apq)
            live = r > 0
            if not live.any():
                continue
            p, q, apq, r = p[live], q[live], apq[live], r[live]
            phase = np.where(r > 0, apq / np.where(r > 0, r, 1.0), 1.0)
            app = a[p, p].real
            aqq = a[q, q].real
            theta = 0.5 * np.arctan2(2.0 * r, aqq - app)
            c = np.cos(theta)
            s = np.sin(theta)
            # U restricted to (p, q): [[c, s], [-s e^{-i phi}, c e^{-i phi}]]
            ucp = -s * phase.conj()
            ucq = c * phase.conj()

            col_p = a[:, p]
            col_q = a[:, q]
            a[:, p] = col_p * c + col_q * ucp
            a[:, q] = col_p * s + col_q * ucq
            row_p = a[p, :]
            row_q = a[q, :]
            a[p, :] = c[:, None] * row_p + ucp.conj()[:, None] * row_q
            a[q, :] = s[:, None] * row_p + ucq.conj()[:, None] * row_q
            a[p, q] = 0.0
            a[q, p] = 0.0

            vp = v[:, p]
            vq = v[:, q]
            v[:, p] = vp * c + vq * ucp
            v[:, q] = vp * s + vq * ucq
    else:
        if _off_norm(a) > threshold:
            raise np.linalg.LinAlgError("Jacobi iteration did not converge")

    w = a.real.diagonal().copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def exp_from_eigh(w: np.ndarray, v: np.ndarray, scale: float) -> np.ndarray:
    """``V diag(exp(i*scale*w)) V^H`` for a precomputed decomposition."""
    return (v * np.exp(1j * scale * w)) @ v.conj().T


def hermitian_exp(h: np.ndarray, scale: float) -> np.ndarray:
    """Unitary ``exp(i * scale * h)`` of a Hermitian matrix."""
    w, v = jacobi_eigh(h)
    return exp_from_eigh(w, v, scale)
