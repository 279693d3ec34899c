"""Dense float64 kernel: products, Frobenius norms, and a Jacobi SVD.

Everything here is deterministic: fixed loop order, no stochastic pivoting,
and a fixed sign convention on singular vectors, so identical inputs produce
bit-identical outputs across calls and thread counts.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import NumericError, RankError, ShapeError

# Hard cap on Jacobi sweeps before giving up.
SWEEP_CAP = 100

# Off-diagonal convergence threshold. The working matrix is scaled to unit
# Frobenius norm, and each column pair additionally converges relative to its
# own column norms, which keeps singular vectors orthogonal even when the
# spectrum spans many orders of magnitude.
OFFDIAG_TOL = 1e-12


def ensure_matrix(a, name: str = "matrix", allow_empty: bool = False) -> np.ndarray:
    """Coerce to a 2-D float64 array and reject non-finite entries."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name}: expected a 2-D matrix, got shape {arr.shape}")
    if arr.size == 0 and not allow_empty:
        raise ShapeError(f"{name}: empty matrix")
    if arr.size and not np.isfinite(arr).all():
        raise ShapeError(f"{name}: non-finite entries")
    return arr


def frobenius(a) -> float:
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64)))


def matmul(a, b) -> np.ndarray:
    """Matrix product with shape validation; plain dense accumulation."""
    a = ensure_matrix(a, "a", allow_empty=True)
    b = ensure_matrix(b, "b", allow_empty=True)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ ({a.shape} x {b.shape})")
    return a @ b


@dataclass(frozen=True)
class SvdResult:
    """Full SVD: u is m x m orthogonal, sigma descending, vt is n x n."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    def reconstruct(self) -> np.ndarray:
        m = self.u.shape[0]
        n = self.vt.shape[0]
        k = self.sigma.size
        return (self.u[:, :k] * self.sigma) @ self.vt[:k, :] + np.zeros((m, n))


def _jacobi(work: np.ndarray):
    """One-sided Jacobi on a tall unit-norm matrix; mutates ``work`` in place.

    Returns the accumulated right-rotation matrix and ``None`` on
    convergence, or the worst relative off-diagonal if the sweep cap is hit.
    """
    cols = work.shape[1]
    v = np.eye(cols)
    for _ in range(SWEEP_CAP):
        rotated = False
        for i in range(cols - 1):
            for j in range(i + 1, cols):
                ci = work[:, i]
                cj = work[:, j]
                gamma = float(ci @ cj)
                alpha = float(ci @ ci)
                beta = float(cj @ cj)
                scale = math.sqrt(alpha * beta)
                if scale == 0.0 or abs(gamma) <= OFFDIAG_TOL * scale:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sign = 1.0 if zeta >= 0.0 else -1.0
                t = sign / (abs(zeta) + math.hypot(1.0, zeta))
                c = 1.0 / math.hypot(1.0, t)
                s = c * t
                new_i = c * ci - s * cj
                new_j = s * ci + c * cj
                work[:, i] = new_i
                work[:, j] = new_j
                vi = v[:, i].copy()
                vj = v[:, j].copy()
                v[:, i] = c * vi - s * vj
                v[:, j] = s * vi + c * vj
        if not rotated:
            return v, None
    g = work.T @ work
    d = np.sqrt(np.abs(np.diag(g)))
    denom = np.outer(d, d)
    off = np.abs(g) / np.where(denom == 0.0, 1.0, denom)
    np.fill_diagonal(off, 0.0)
    return v, float(off.max())


def _complete_basis(thin: np.ndarray, m: int) -> np.ndarray:
    """Extend orthonormal columns to an m x m orthogonal matrix.

    Candidates are standard basis vectors in index order with two rounds of
    Gram-Schmidt, so the completion is deterministic.
    """
    have = thin.shape[1]
    out = np.zeros((m, m))
    out[:, :have] = thin
    for idx in range(m):
        if have == m:
            break
        w = np.zeros(m)
        w[idx] = 1.0
        for _ in range(2):
            w = w - out[:, :have] @ (out[:, :have].T @ w)
        norm = float(np.linalg.norm(w))
        if norm > 1e-8:
            out[:, have] = w / norm
            have += 1
    if have != m:
        raise NumericError("orthonormal completion failed", residual=float(m - have))
    return out


def _fix_signs(u: np.ndarray, vt: np.ndarray) -> None:
    """Make the largest-magnitude entry of each left singular vector positive."""
    pairs = min(u.shape[0], vt.shape[0])
    for k in range(u.shape[1]):
        col = u[:, k]
        lead = int(np.argmax(np.abs(col)))
        if col[lead] < 0.0:
            u[:, k] = -col
            if k < pairs:
                vt[k, :] = -vt[k, :]


def svd(m) -> SvdResult:
    """Full singular value decomposition via one-sided Jacobi rotations.

    Raises NumericError with the final off-diagonal residual if the sweep
    cap is exhausted.
    """
    a = ensure_matrix(m, "m")
    rows, cols = a.shape
    transposed = rows < cols
    work = np.array(a.T if transposed else a, dtype=np.float64, order="C")
    wr, wc = work.shape
    fnorm = float(np.linalg.norm(work))
    if fnorm == 0.0:
        return SvdResult(u=np.eye(rows), sigma=np.zeros(min(rows, cols)), vt=np.eye(cols))
    work /= fnorm
    v, residual = _jacobi(work)
    if residual is not None:
        raise NumericError(
            f"svd did not converge within {SWEEP_CAP} sweeps", residual=residual
        )
    norms = np.linalg.norm(work, axis=0)
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order] * fnorm
    rank = int(np.count_nonzero(norms > 0.0))
    thin = np.empty((wr, rank))
    for k in range(rank):
        thin[:, k] = work[:, order[k]] / norms[order[k]]
    u_work = _complete_basis(thin, wr)
    vt_work = v[:, order].T

    if transposed:
        u, vt = vt_work.T.copy(), u_work.T.copy()
    else:
        u, vt = u_work, vt_work.copy()
    _fix_signs(u, vt)
    return SvdResult(u=u, sigma=sigma, vt=vt)


def truncated_factors(m, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Rank-r factors (a, b) with a = U[:, :r] and b = (Sigma Vt)[:r, :].

    The product a @ b is the best rank-r approximation in Frobenius norm;
    the squared error equals the sum of squared discarded singular values.
    """
    a = ensure_matrix(m, "m")
    max_rank = min(a.shape)
    r = int(r)
    if not 1 <= r <= max_rank:
        raise RankError(f"rank {r} outside [1, {max_rank}] for shape {a.shape}")
    res = svd(a)
    left = res.u[:, :r].copy()
    right = res.sigma[:r, None] * res.vt[:r, :]
    return left, right
