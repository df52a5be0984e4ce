"""Centroidal state estimators.

* Moving horizon estimation on the learned linear model, written as a
  convex QP over the window states and solved exactly through a
  block-tridiagonal Cholesky factorization (or by a projected Newton
  method when state bounds are configured).
* An extended Kalman filter on the nonlinear centroidal dynamics, used as
  the baseline.
* A textbook Kalman filter, used as a test oracle for the MHE.
"""

from __future__ import annotations

import csv
import time
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import numerics
from .centroidal_sim import STATE_LABELS, ContactSet, RobotParams, Trajectory, integrate_step
from .dmdc import KoopmanModel, encode_inputs, rmse_per_state
from .numerics import NumericsError, skew

NX = 9
KKT_TOL = 1e-8
QP_MAX_ITER = 200


class QpError(NumericsError):
    """QP solve failed; carries the last iterate and its projected gradient norm."""

    def __init__(self, msg: str, z=None, kkt: float | None = None, iterations: int = 0):
        super().__init__(msg)
        self.z = z
        self.kkt = kkt
        self.iterations = iterations


def _check_spd(name: str, m) -> np.ndarray:
    m = numerics.as_matrix(m, name)
    if m.shape != (NX, NX):
        raise ValueError(f"{name} must be {NX}x{NX}")
    try:
        numerics.cholesky(m)
    except (ValueError, NumericsError) as exc:
        raise ValueError(f"{name} must be symmetric positive definite: {exc}") from None
    return m


@dataclass(frozen=True)
class MheConfig:
    horizon: int
    P_x: np.ndarray
    P_w: np.ndarray
    P_v: np.ndarray
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def __post_init__(self):
        if int(self.horizon) < 1:
            raise ValueError("horizon must be at least 1")
        object.__setattr__(self, "horizon", int(self.horizon))
        for name in ("P_x", "P_w", "P_v"):
            object.__setattr__(self, name, _check_spd(name, getattr(self, name)))
        lo = None if self.lower is None else np.asarray(self.lower, dtype=float).reshape(NX)
        hi = None if self.upper is None else np.asarray(self.upper, dtype=float).reshape(NX)
        if lo is not None and hi is not None and np.any(lo > hi):
            raise ValueError("state bounds need lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def bounded(self) -> bool:
        return self.lower is not None or self.upper is not None

    def scaled(self, alpha: float) -> "MheConfig":
        return MheConfig(self.horizon, alpha * self.P_x, alpha * self.P_w, alpha * self.P_v,
                         self.lower, self.upper)


# --------------------------------------------------------------------------
# Block-tridiagonal SPD matrices
# --------------------------------------------------------------------------

class BlockTridiagonal:
    """Symmetric block-tridiagonal matrix.

    ``diag[k]`` is block (k, k) and ``lower[k]`` is block (k + 1, k).
    The Cholesky factor is computed once and cached.
    """

    def __init__(self, diag: np.ndarray, lower: np.ndarray, prefix=None):
        self.diag = np.asarray(diag, dtype=float)
        self.lower = np.asarray(lower, dtype=float)
        nb, d, _ = self.diag.shape
        if self.lower.shape != (nb - 1, d, d):
            raise ValueError("lower blocks do not match the diagonal")
        # (linv, llow) of a matrix whose leading blocks equal ours; the
        # caller guarantees diag[:p] and lower[:p] agree for p = len(linv)
        self._prefix = prefix

    @property
    def n_blocks(self) -> int:
        return self.diag.shape[0]

    @property
    def block_size(self) -> int:
        return self.diag.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        n = self.n_blocks * self.block_size
        return n, n

    def to_dense(self) -> np.ndarray:
        d = self.block_size
        out = np.zeros(self.shape)
        for k in range(self.n_blocks):
            out[k * d:(k + 1) * d, k * d:(k + 1) * d] = self.diag[k]
        for k in range(self.n_blocks - 1):
            out[(k + 1) * d:(k + 2) * d, k * d:(k + 1) * d] = self.lower[k]
            out[k * d:(k + 1) * d, (k + 1) * d:(k + 2) * d] = self.lower[k].T
        return out

    def matvec(self, z) -> np.ndarray:
        zb = np.asarray(z, dtype=float).reshape(self.n_blocks, self.block_size)
        out = np.einsum("kij,kj->ki", self.diag, zb)
        if self.n_blocks > 1:
            out[1:] += np.einsum("kij,kj->ki", self.lower, zb[:-1])
            out[:-1] += np.einsum("kji,kj->ki", self.lower, zb[1:])
        return out.reshape(-1)

    @cached_property
    def _factor(self) -> tuple[np.ndarray, np.ndarray]:
        """Inverses of the diagonal Cholesky blocks and the sub-diagonal blocks of L."""
        nb, d = self.n_blocks, self.block_size
        eye = np.eye(d)
        linv = np.empty((nb, d, d))
        llow = np.empty((max(nb - 1, 0), d, d))
        start = 0
        if self._prefix is not None:
            start = min(len(self._prefix[0]), nb - 1)
            linv[:start] = self._prefix[0][:start]
            llow[:start] = self._prefix[1][:start]
        schur = self.diag[0] if start == 0 else self.diag[start] - llow[start - 1] @ llow[start - 1].T
        for k in range(start, nb):
            L = numerics.cholesky(0.5 * (schur + schur.T))
            linv[k] = numerics.forward_substitute(L, eye)
            if k + 1 < nb:
                llow[k] = self.lower[k] @ linv[k].T
                schur = self.diag[k + 1] - llow[k] @ llow[k].T
        return linv, llow

    def solve(self, b) -> np.ndarray:
        linv, llow = self._factor
        nb, d = self.n_blocks, self.block_size
        bb = np.asarray(b, dtype=float).reshape(nb, d)
        y = np.empty((nb, d))
        y[0] = linv[0] @ bb[0]
        for k in range(1, nb):
            y[k] = linv[k] @ (bb[k] - llow[k - 1] @ y[k - 1])
        z = np.empty((nb, d))
        z[-1] = y[-1] @ linv[-1]
        for k in range(nb - 2, -1, -1):
            z[k] = (y[k] - z[k + 1] @ llow[k]) @ linv[k]
        return z.reshape(-1)


# --------------------------------------------------------------------------
# QP assembly and solution
# --------------------------------------------------------------------------

@dataclass
class MheWindow:
    """Sliding window of (measurement, input) pairs plus the arrival-cost prior."""

    model: KoopmanModel
    prior: np.ndarray
    buffer: deque = field(default_factory=deque)
    solution: np.ndarray | None = None
    last_kkt: float = 0.0
    _hessians: dict = field(default_factory=dict, repr=False)
    _hess_owner: object = field(default=None, repr=False)

    def __post_init__(self):
        self.prior = np.asarray(self.prior, dtype=float).reshape(NX).copy()
        if not np.all(np.isfinite(self.prior)):
            raise ValueError("prior must be finite")

    @property
    def n_transitions(self) -> int:
        return len(self.buffer) - 1

    def hessian(self, config: MheConfig) -> BlockTridiagonal:
        """QP Hessian for the current window length (depends on nothing else)."""
        if self._hess_owner is not config:
            self._hessians = {}
            self._hess_owner = config
        M = self.n_transitions
        H = self._hessians.get(M)
        if H is None:
            A = self.model.A
            diag = np.repeat(config.P_v[None], M + 1, axis=0)
            diag[0] += config.P_x
            if M > 0:
                diag[:-1] += A.T @ config.P_w @ A
                diag[1:] += config.P_w
            diag = 0.5 * (diag + diag.transpose(0, 2, 1))
            lower = np.repeat((-config.P_w @ A)[None], M, axis=0)
            # windows only grow during warm-up, so the shorter one is not needed
            # again; all but its last factor block carry over
            shorter = self._hessians.pop(M - 1, None)
            prefix = None
            if shorter is not None and M >= 2:
                linv, llow = shorter._factor
                prefix = (linv[:M - 1], llow[:M - 1])
            H = self._hessians[M] = BlockTridiagonal(diag, lower, prefix)
        return H


@dataclass(frozen=True)
class QuadraticProgram:
    """``min 1/2 z'Hz + g'z + const`` subject to ``lower <= z <= upper``."""

    H: BlockTridiagonal
    g: np.ndarray
    const: float
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None

    def objective(self, z) -> float:
        z = np.asarray(z, dtype=float)
        return float(0.5 * z @ self.H.matvec(z) + self.g @ z + self.const)


def build_qp(window: MheWindow, config: MheConfig) -> QuadraticProgram:
    if not window.buffer:
        raise ValueError("window is empty")
    M = window.n_transitions
    ys = np.array([p[0] for p in window.buffer], dtype=float)
    g = -(ys @ config.P_v)
    g[0] -= config.P_x @ window.prior
    const = 0.5 * float(window.prior @ config.P_x @ window.prior)
    const += 0.5 * float(np.einsum("ki,ij,kj->", ys, config.P_v, ys))
    if M > 0:
        us = np.array([p[1] for p in list(window.buffer)[:-1]], dtype=float)
        d = us @ window.model.B.T
        pw_d = d @ config.P_w
        g[1:] -= pw_d
        g[:-1] += pw_d @ window.model.A
        const += 0.5 * float(np.einsum("ki,ki->", d, pw_d))
    lo = hi = None
    if config.lower is not None:
        lo = np.tile(config.lower, M + 1)
    if config.upper is not None:
        hi = np.tile(config.upper, M + 1)
    return QuadraticProgram(window.hessian(config), g.reshape(-1), const, lo, hi)


def kkt_residual(H, g, z) -> float:
    """Scaled stationarity residual ``|Hz + g|_inf / (1 + |g|_inf)``."""
    hz = H.matvec(z) if isinstance(H, BlockTridiagonal) else np.asarray(H) @ z
    return float(np.abs(hz + g).max() / (1.0 + np.abs(g).max()))


def projected_gradient(H, g, z, lower=None, upper=None) -> np.ndarray:
    hz = H.matvec(z) if isinstance(H, BlockTridiagonal) else np.asarray(H) @ z
    grad = hz + g
    step = z - grad
    if lower is not None:
        step = np.maximum(step, lower)
    if upper is not None:
        step = np.minimum(step, upper)
    return z - step


def _solve_dense(H: np.ndarray, b: np.ndarray) -> np.ndarray:
    return numerics.solve_spd(H, b)


def solve_qp(H, g, lower=None, upper=None, tol: float = KKT_TOL,
             max_iter: int = QP_MAX_ITER) -> np.ndarray:
    """Minimize ``1/2 z'Hz + g'z`` for SPD ``H``, optionally within box bounds.

    Without bounds this is a single direct solve. With bounds a projected
    Newton iteration (free-variable Newton step, projection, Armijo
    backtracking) runs until the projected gradient falls below ``tol``.
    """
    g = np.asarray(g, dtype=float).reshape(-1)
    if lower is None and upper is None:
        if isinstance(H, BlockTridiagonal):
            return H.solve(-g)
        return _solve_dense(numerics.as_matrix(H, "H"), -g)

    Hd = H.to_dense() if isinstance(H, BlockTridiagonal) else numerics.as_matrix(H, "H")
    n = g.size
    lo = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float).reshape(n)
    hi = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float).reshape(n)
    if np.any(lo > hi):
        raise ValueError("infeasible bounds")

    def f(z):
        return 0.5 * z @ Hd @ z + g @ z

    scale = 1.0 + np.abs(g).max()
    z = np.clip(_solve_dense(Hd, -g), lo, hi)
    for it in range(1, max_iter + 1):
        grad = Hd @ z + g
        pg = z - np.clip(z - grad, lo, hi)
        pg_norm = float(np.linalg.norm(pg))
        if pg_norm <= tol * scale:
            return z
        at_lo = (z <= lo) & (grad > 0)
        at_hi = (z >= hi) & (grad < 0)
        free = ~(at_lo | at_hi)
        d = np.zeros(n)
        if free.any():
            d[free] = -_solve_dense(Hd[np.ix_(free, free)], grad[free])
        f0, alpha = f(z), 1.0
        while True:
            z_new = np.clip(z + alpha * d, lo, hi)
            if f(z_new) <= f0 + 1e-4 * grad @ (z_new - z) or alpha < 1e-12:
                break
            alpha *= 0.5
        if np.array_equal(z_new, z):
            # Newton direction stalled on the active face; fall back to a
            # projected gradient step with exact line length
            gg = float(grad @ grad)
            step = gg / float(grad @ Hd @ grad) if gg > 0 else 0.0
            z_new = np.clip(z - step * grad, lo, hi)
            if np.array_equal(z_new, z):
                raise QpError("projected Newton stalled", z, pg_norm, it)
        z = z_new
    grad = Hd @ z + g
    pg_norm = float(np.linalg.norm(z - np.clip(z - grad, lo, hi)))
    raise QpError(f"projected Newton hit {max_iter} iterations", z, pg_norm, max_iter)


def mhe_step(window: MheWindow, config: MheConfig, y_new, u_new) -> np.ndarray:
    """Push one (measurement, input) pair, re-solve the window, return the newest estimate."""
    y_new = np.asarray(y_new, dtype=float).reshape(NX)
    u_new = np.asarray(u_new, dtype=float).reshape(window.model.B.shape[1])
    window.buffer.append((y_new, u_new))
    if len(window.buffer) > config.horizon:
        _, u_old = window.buffer.popleft()
        sol = window.solution
        if sol.shape[0] > 1:
            window.prior = sol[1].copy()
        else:
            window.prior = window.model.A @ sol[0] + window.model.B @ u_old
    qp = build_qp(window, config)
    z = solve_qp(qp.H, qp.g, qp.lower, qp.upper)
    if qp.lower is None and qp.upper is None:
        window.last_kkt = kkt_residual(qp.H, qp.g, z)
        if not window.last_kkt <= KKT_TOL:
            raise QpError(f"KKT residual {window.last_kkt:.3e} exceeds {KKT_TOL:g}", z,
                          window.last_kkt)
    else:
        pg = projected_gradient(qp.H, qp.g, z, qp.lower, qp.upper)
        window.last_kkt = float(np.linalg.norm(pg) / (1.0 + np.abs(qp.g).max()))
    window.solution = z.reshape(-1, NX)
    return window.solution[-1].copy()


# --------------------------------------------------------------------------
# Extended Kalman filter
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class EkfState:
    x: np.ndarray
    P: np.ndarray
    Q: np.ndarray
    R: np.ndarray


@dataclass(frozen=True)
class EkfConfig:
    Q: np.ndarray
    R: np.ndarray
    P0: np.ndarray
    init: str = "measurement"   # or "truth"

    def __post_init__(self):
        if self.init not in ("measurement", "truth"):
            raise ValueError("init must be 'measurement' or 'truth'")


def dynamics_jacobian(x, contacts: ContactSet, params: RobotParams) -> np.ndarray:
    """Analytic Jacobian of the centroidal vector field with respect to the state."""
    J = np.zeros((NX, NX))
    J[0:3, 3:6] = np.eye(3) / params.mass
    for i in np.flatnonzero(contacts.b):
        J[6:9, 0:3] += skew(contacts.f[i])
    return J


def ekf_predict(s: EkfState, contacts: ContactSet, params: RobotParams, dt: float) -> EkfState:
    F = np.eye(NX) + dt * dynamics_jacobian(s.x, contacts, params)
    x = integrate_step(s.x, contacts, params, dt)
    P = F @ s.P @ F.T + s.Q
    return EkfState(x, 0.5 * (P + P.T), s.Q, s.R)


def ekf_update(s: EkfState, y) -> EkfState:
    """Measurement update with H = I in Joseph form."""
    y = np.asarray(y, dtype=float).reshape(NX)
    S = s.P + s.R
    K = numerics.solve_spd(0.5 * (S + S.T), s.P).T
    x = s.x + K @ (y - s.x)
    IK = np.eye(NX) - K
    P = IK @ s.P @ IK.T + K @ s.R @ K.T
    return EkfState(x, 0.5 * (P + P.T), s.Q, s.R)


def kalman_oracle(A, B, C, Q, R, P0, x0, ys, us) -> np.ndarray:
    """Filtered estimates of a linear time-invariant system.

    ``ys[k]`` is measured at step k; ``us[k]`` drives the transition k -> k + 1.
    The first step is an update of the prior ``(x0, P0)`` with ``ys[0]``.
    """
    A, B, C = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (A, B, C))
    Q, R, P0 = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (Q, R, P0))
    if not np.all(np.linalg.eigvalsh(0.5 * (R + R.T)) > 0):
        raise ValueError("measurement covariance R must be positive definite")
    ys = np.asarray(ys, dtype=float).reshape(len(ys), -1)
    us = np.asarray(us, dtype=float).reshape(len(us), -1)
    x = np.asarray(x0, dtype=float).reshape(-1)
    P = P0.copy()
    out = np.empty((ys.shape[0], x.size))
    for k in range(ys.shape[0]):
        if k > 0:
            x = A @ x + B @ us[k - 1]
            P = A @ P @ A.T + Q
        S = C @ P @ C.T + R
        K = np.linalg.solve(S, C @ P).T
        x = x + K @ (ys[k] - C @ x)
        P = (np.eye(x.size) - K @ C) @ P
        out[k] = x
    return out


# --------------------------------------------------------------------------
# Runs over trajectories
# --------------------------------------------------------------------------

@dataclass
class EstimatorRun:
    kind: str
    t: np.ndarray
    truth: np.ndarray
    estimates: np.ndarray
    rmse: np.ndarray
    solve_time_us: np.ndarray | None = None
    kkt_max: float = 0.0


def run_estimator(kind: str, traj: Trajectory, *, model: KoopmanModel | None = None,
                  mhe_config: MheConfig | None = None, ekf_config: EkfConfig | None = None,
                  params: RobotParams | None = None, timing: bool = False) -> EstimatorRun:
    meas = traj.channel("measured")
    truth = traj.truth.states
    n = len(meas)
    est = np.empty((n, NX))
    times = np.empty(n) if timing else None
    kkt_max = 0.0
    clock = time.perf_counter

    if kind == "mhe":
        if model is None or mhe_config is None:
            raise ValueError("MHE needs a model and an MheConfig")
        us = encode_inputs(meas)
        window = MheWindow(model, meas.states[0])
        for k in range(n):
            t0 = clock() if timing else 0.0
            est[k] = mhe_step(window, mhe_config, meas.states[k], us[k])
            if timing:
                times[k] = (clock() - t0) * 1e6
            kkt_max = max(kkt_max, window.last_kkt)
    elif kind == "ekf":
        if ekf_config is None:
            raise ValueError("EKF needs an EkfConfig")
        params = params or RobotParams()
        x0 = truth[0] if ekf_config.init == "truth" else meas.states[0]
        s = EkfState(x0.copy(), np.array(ekf_config.P0, dtype=float),
                     np.array(ekf_config.Q, dtype=float), np.array(ekf_config.R, dtype=float))
        for k in range(n):
            t0 = clock() if timing else 0.0
            if k > 0:
                s = ekf_predict(s, meas.contact(k - 1), params, traj.dt)
            if ekf_config.init != "truth" or k > 0:
                s = ekf_update(s, meas.states[k])
            est[k] = s.x
            if timing:
                times[k] = (clock() - t0) * 1e6
    else:
        raise ValueError(f"unknown estimator {kind!r}")

    return EstimatorRun(kind, traj.t, truth.copy(), est, rmse_per_state(est, truth), times, kkt_max)


def run_csv_header() -> list[str]:
    return (["t"] + [f"true_{s}" for s in STATE_LABELS] + [f"est_{s}" for s in STATE_LABELS]
            + ["solve_time_us"])


def write_run_csv(path, run: EstimatorRun) -> None:
    """One row per sample; ``solve_time_us`` is ``nan`` when timing was off."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(run_csv_header())
        for i in range(run.t.size):
            st = "nan" if run.solve_time_us is None else format(run.solve_time_us[i], ".3f")
            w.writerow([format(run.t[i], ".17g")]
                       + [format(v, ".17g") for v in run.truth[i]]
                       + [format(v, ".17g") for v in run.estimates[i]] + [st])
