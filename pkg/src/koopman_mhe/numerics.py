"""Dense linear-algebra kernels used by identification, estimation and analysis.

Everything here works on plain ``numpy`` arrays and is pure: inputs are never
modified. The heavy lifting is written out explicitly (one-sided Jacobi SVD,
Hessenberg + Francis double-shift QR, Cholesky) rather than delegated to
LAPACK, so that failure modes are explicit and iteration caps are enforced.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Final

import numpy as np

EPS: Final = float(np.finfo(float).eps)

# Off-orthogonality at which a Jacobi column pair is left alone, scaled by
# the row count of the matrix being orthogonalized.
JACOBI_TOL: Final = EPS
JACOBI_SWEEPS_PER_COL: Final = 100
QR_SHIFTS_PER_DIM: Final = 50
SYMMETRY_TOL: Final = 1e-12
MAX_EIG_DIM: Final = 64


class NumericsError(RuntimeError):
    """Base class for numerical failures raised by this module."""


class ConvergenceError(NumericsError):
    def __init__(self, what: str, iterations: int):
        super().__init__(f"{what} did not converge after {iterations} iterations")
        self.iterations = iterations


class RankZeroError(NumericsError):
    pass


class NotPositiveDefiniteError(NumericsError):
    pass


@dataclass(frozen=True)
class SvdResult:
    """Thin SVD ``m = U @ diag(s) @ V.T`` with ``s`` sorted non-increasing."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.s) @ self.V.T


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    a = np.array(m, dtype=float)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} has non-finite entries")
    return a


# --------------------------------------------------------------------------
# SVD
# --------------------------------------------------------------------------

def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Rounds of disjoint column pairs covering every pair once (n even)."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        p = np.array(players[: n // 2])
        q = np.array(players[n // 2:][::-1])
        rounds.append((np.minimum(p, q), np.maximum(p, q)))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def householder_qr(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Thin QR of a tall matrix: ``a = Q @ R`` with Q (m, n), R (n, n)."""
    m, n = a.shape
    # column-major storage keeps the column slices below contiguous
    r = np.array(a, dtype=float, order="F")
    vs = []
    for j in range(n):
        x = r[j:, j]
        alpha = math.sqrt(float(x @ x))
        v = x.copy()
        v[0] += math.copysign(alpha, x[0]) if x[0] != 0 else alpha
        vn = math.sqrt(float(v @ v))
        if vn == 0.0:
            vs.append(None)
            continue
        v /= vn
        r[j:, j:] -= 2.0 * np.outer(v, v @ r[j:, j:])
        vs.append(v)
    q = np.zeros((m, n), order="F")
    q[:n, :n] = np.eye(n)
    for j in range(n - 1, -1, -1):
        v = vs[j]
        if v is not None:
            q[j:, :] -= 2.0 * np.outer(v, v @ q[j:, :])
    return q, np.triu(r[:n, :])


def _jacobi_tall(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, int]:
    """One-sided (Hestenes) Jacobi on the columns of a tall matrix.

    Returns the rotated matrix (mutually orthogonal columns), the accumulated
    right rotation V and the number of sweeps used.
    """
    rows, n = g.shape
    g = g.copy()
    if n % 2:
        g = np.hstack([g, np.zeros((rows, 1))])
    npad = g.shape[1]
    v = np.eye(npad)
    rounds = _round_robin(npad)
    tol = JACOBI_TOL * max(rows, npad)
    cap = JACOBI_SWEEPS_PER_COL * n
    # columns below this squared norm are numerically zero; rotating them
    # against each other only stirs rounding noise
    negligible = (EPS * float(np.linalg.norm(g))) ** 2
    for sweep in range(1, cap + 1):
        worst = 0.0
        for p, q in rounds:
            gp, gq = g[:, p], g[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            denom = np.sqrt(alpha * beta)
            with np.errstate(divide="ignore", invalid="ignore"):
                off = np.where(denom > 0, np.abs(gamma) / denom, 0.0)
            rot = (off > tol) & (alpha > negligible) & (beta > negligible)
            if not rot.any():
                continue
            worst = max(worst, float(off[rot].max()))
            p, q = p[rot], q[rot]
            alpha, beta, gamma = alpha[rot], beta[rot], gamma[rot]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = g[:, p], g[:, q]
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp, vq = v[:, p], v[:, q]
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if worst <= tol:
            return g[:, :n], v[:n, :n], sweep
    raise ConvergenceError("one-sided Jacobi SVD", cap)


def _complete_orthonormal(u: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace columns of ``u`` not flagged in ``keep`` by an orthonormal completion.

    Each new column is the coordinate vector with the largest component
    outside the current basis, orthogonalized twice. That component is at
    least ``sqrt((rows - k) / rows)`` for a basis of k columns.
    """
    rows, r = u.shape
    u = u.copy()
    basis = u[:, keep]
    for j in np.flatnonzero(~keep):
        cand = np.eye(rows)
        for _ in range(2):
            cand -= basis @ (basis.T @ cand)
        norms = np.linalg.norm(cand, axis=0)
        best = int(np.argmax(norms))
        u[:, j] = cand[:, best] / norms[best]
        basis = np.hstack([basis, u[:, j:j + 1]])
    return u


def svd(m) -> SvdResult:
    """Thin singular value decomposition.

    Short-fat inputs are handled through the transpose; tall inputs are first
    reduced with a Householder QR so the Jacobi sweeps only see an n x n
    triangle.
    """
    a = as_matrix(m)
    rows, cols = a.shape
    if rows < cols:
        res = svd(a.T)
        return SvdResult(U=res.V, s=res.s, V=res.U)

    if rows > cols:
        q, r = householder_qr(a)
    else:
        q, r = None, a
    g, v, _ = _jacobi_tall(r)
    s = np.sqrt(np.einsum("ij,ij->j", g, g))
    order = np.argsort(-s, kind="stable")
    s, g, v = s[order], g[:, order], v[:, order]
    smax = s[0] if s.size else 0.0
    keep = s > EPS * max(rows, cols) * smax if smax > 0 else np.zeros(s.size, bool)
    u = np.zeros_like(g)
    u[:, keep] = g[:, keep] / s[keep]
    u = _complete_orthonormal(u, keep)
    if q is not None:
        u = q @ u
    return SvdResult(U=u, s=s, V=v)


def pinv(m, sv_threshold: float = 0.0, return_rank: bool = False):
    """Moore-Penrose pseudo-inverse with relative singular-value truncation.

    Singular values at or below ``sv_threshold * s_max`` are treated as zero.
    """
    if not 0.0 <= sv_threshold < 1.0:
        raise ValueError("sv_threshold must lie in [0, 1)")
    res = svd(m)
    if res.s.size == 0 or res.s[0] == 0.0:
        raise RankZeroError("matrix is identically zero")
    keep = (res.s > sv_threshold * res.s[0]) & (res.s > 0.0)
    rank = int(keep.sum())
    if rank == 0:
        raise RankZeroError("all singular values were truncated")
    p = (res.V[:, keep] / res.s[keep]) @ res.U[:, keep].T
    return (p, rank) if return_rank else p


# --------------------------------------------------------------------------
# Nonsymmetric eigenvalues
# --------------------------------------------------------------------------

def _balance(a: np.ndarray) -> np.ndarray:
    a = a.copy()
    n = a.shape[0]
    radix, sqrdx = 2.0, 4.0
    done = False
    while not done:
        done = True
        for i in range(n):
            c = float(np.abs(a[:, i]).sum() - abs(a[i, i]))
            r = float(np.abs(a[i, :]).sum() - abs(a[i, i]))
            if c == 0.0 or r == 0.0:
                continue
            g, f, s = r / radix, 1.0, c + r
            while c < g:
                f *= radix
                c *= sqrdx
            g = r * radix
            while c > g:
                f /= radix
                c /= sqrdx
            if (c + r) / f < 0.95 * s:
                done = False
                a[i, :] /= f
                a[:, i] *= f
    return a


def hessenberg(a: np.ndarray) -> np.ndarray:
    """Upper Hessenberg form similar to ``a`` (Householder reflections)."""
    h = np.array(a, dtype=float)
    n = h.shape[0]
    for k in range(n - 2):
        x = h[k + 1:, k]
        alpha = math.sqrt(float(x @ x))
        if alpha == 0.0:
            continue
        v = x.copy()
        v[0] += math.copysign(alpha, x[0]) if x[0] != 0 else alpha
        v /= math.sqrt(float(v @ v))
        h[k + 1:, :] -= 2.0 * np.outer(v, v @ h[k + 1:, :])
        h[:, k + 1:] -= 2.0 * np.outer(h[:, k + 1:] @ v, v)
        h[k + 2:, k] = 0.0
    return h


def _hqr(h: np.ndarray) -> np.ndarray:
    """Francis double-shift QR on an upper Hessenberg matrix (eigenvalues only)."""
    a = h.tolist()
    n = len(a)
    wr = [0.0] * n
    wi = [0.0] * n
    anorm = float(np.abs(h).sum())
    cap = QR_SHIFTS_PER_DIM * n
    total = 0
    nn = n - 1
    t = 0.0
    while nn >= 0:
        its = 0
        while True:
            l = nn
            while l >= 1:
                s = abs(a[l - 1][l - 1]) + abs(a[l][l])
                if s == 0.0:
                    s = anorm
                if abs(a[l][l - 1]) <= EPS * s:
                    a[l][l - 1] = 0.0
                    break
                l -= 1
            x = a[nn][nn]
            if l == nn:
                wr[nn], wi[nn] = x + t, 0.0
                nn -= 1
                break
            y = a[nn - 1][nn - 1]
            w = a[nn][nn - 1] * a[nn - 1][nn]
            if l == nn - 1:
                p = 0.5 * (y - x)
                q = p * p + w
                z = math.sqrt(abs(q))
                x += t
                if q >= 0.0:
                    z = p + math.copysign(z, p)
                    wr[nn - 1] = wr[nn] = x + z
                    if z:
                        wr[nn] = x - w / z
                    wi[nn - 1] = wi[nn] = 0.0
                else:
                    wr[nn - 1] = wr[nn] = x + p
                    wi[nn - 1], wi[nn] = -z, z
                nn -= 2
                break

            if total >= cap:
                raise ConvergenceError("shifted QR eigenvalue iteration", total)
            if its in (10, 20):
                # exceptional shift
                t += x
                for i in range(nn + 1):
                    a[i][i] -= x
                s = abs(a[nn][nn - 1]) + abs(a[nn - 1][nn - 2])
                x = y = 0.75 * s
                w = -0.4375 * s * s
            its += 1
            total += 1

            m = nn - 2
            while m >= l:
                z = a[m][m]
                r = x - z
                s = y - z
                p = (r * s - w) / a[m + 1][m] + a[m][m + 1]
                q = a[m + 1][m + 1] - z - r - s
                r = a[m + 2][m + 1]
                s = abs(p) + abs(q) + abs(r)
                p, q, r = p / s, q / s, r / s
                if m == l:
                    break
                u = abs(a[m][m - 1]) * (abs(q) + abs(r))
                v = abs(p) * (abs(a[m - 1][m - 1]) + abs(z) + abs(a[m + 1][m + 1]))
                if u <= EPS * v:
                    break
                m -= 1
            for i in range(m + 2, nn + 1):
                a[i][i - 2] = 0.0
                if i != m + 2:
                    a[i][i - 3] = 0.0

            for k in range(m, nn):
                if k != m:
                    p = a[k][k - 1]
                    q = a[k + 1][k - 1]
                    r = a[k + 2][k - 1] if k != nn - 1 else 0.0
                    x = abs(p) + abs(q) + abs(r)
                    if x != 0.0:
                        p, q, r = p / x, q / x, r / x
                s = math.copysign(math.sqrt(p * p + q * q + r * r), p)
                if s == 0.0:
                    continue
                if k == m:
                    if l != m:
                        a[k][k - 1] = -a[k][k - 1]
                else:
                    a[k][k - 1] = -s * x
                p += s
                x, y, z = p / s, q / s, r / s
                q /= p
                r /= p
                ak, ak1 = a[k], a[k + 1]
                ak2 = a[k + 2] if k != nn - 1 else None
                for j in range(k, nn + 1):
                    p = ak[j] + q * ak1[j]
                    if ak2 is not None:
                        p += r * ak2[j]
                        ak2[j] -= p * z
                    ak1[j] -= p * y
                    ak[j] -= p * x
                mmin = min(nn, k + 3)
                for i in range(l, mmin + 1):
                    ai = a[i]
                    p = x * ai[k] + y * ai[k + 1]
                    if k != nn - 1:
                        p += z * ai[k + 2]
                        ai[k + 2] -= p * r
                    ai[k + 1] -= p * q
                    ai[k] -= p
    return np.array(wr) + 1j * np.array(wi)


def eigenvalues(m) -> np.ndarray:
    """All eigenvalues of a real square matrix, with multiplicity.

    Complex eigenvalues come out as exact conjugate pairs.
    """
    a = as_matrix(m)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError("eigenvalues() needs a square matrix")
    if n > MAX_EIG_DIM:
        raise ValueError(f"dimension {n} exceeds {MAX_EIG_DIM}")
    if n == 1:
        return np.array([complex(a[0, 0])])
    return _hqr(hessenberg(_balance(a)))


# --------------------------------------------------------------------------
# SPD systems
# --------------------------------------------------------------------------

def cholesky(a) -> np.ndarray:
    """Lower-triangular L with ``a = L @ L.T``."""
    a = as_matrix(a)
    n = a.shape[0]
    if a.shape[1] != n:
        raise ValueError("cholesky() needs a square matrix")
    scale = max(float(np.abs(a).max()), 1.0)
    if np.abs(a - a.T).max() > SYMMETRY_TOL * scale:
        raise ValueError("matrix is not symmetric")
    L = np.zeros_like(a)
    for j in range(n):
        row = L[j, :j]
        d = a[j, j] - float(row @ row)
        if not d > 0.0:
            raise NotPositiveDefiniteError(f"non-positive pivot {d:.3e} at column {j}")
        L[j, j] = math.sqrt(d)
        if j + 1 < n:
            L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ row) / L[j, j]
    return L


def forward_substitute(L: np.ndarray, b: np.ndarray) -> np.ndarray:
    y = np.array(b, dtype=float)
    for i in range(L.shape[0]):
        y[i] = (y[i] - L[i, :i] @ y[:i]) / L[i, i]
    return y


def back_substitute(U: np.ndarray, b: np.ndarray) -> np.ndarray:
    x = np.array(b, dtype=float)
    n = U.shape[0]
    for i in range(n - 1, -1, -1):
        x[i] = (x[i] - U[i, i + 1:] @ x[i + 1:]) / U[i, i]
    return x


def solve_spd(a, b) -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive-definite ``a`` (vector or matrix b)."""
    L = cholesky(a)
    b = np.asarray(b, dtype=float)
    if b.shape[0] != L.shape[0]:
        raise ValueError("right-hand side has the wrong number of rows")
    if not np.all(np.isfinite(b)):
        raise ValueError("right-hand side has non-finite entries")
    return back_substitute(L.T, forward_substitute(L, b))


def skew(v) -> np.ndarray:
    """Cross-product matrix: ``skew(v) @ w == np.cross(v, w)``."""
    x, y, z = (float(c) for c in v)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
