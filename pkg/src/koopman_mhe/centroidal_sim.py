"""Centroidal dynamics of a point-foot quadruped under synthetic gaits.

State layout is the flat 9-vector ``[c, l, k]``: CoM position (m), linear
momentum (kg m/s) and angular momentum about the CoM (kg m^2/s). Feet are
always ordered FL, FR, HL, HR.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import skew

FEET = ("FL", "FR", "HL", "HR")
N_FEET = 4
STATE_LABELS = ("c_x", "c_y", "c_z", "l_x", "l_y", "l_z", "k_x", "k_y", "k_z")
GAITS = ("trot", "jump", "bound")

DIVERGENCE_BOUND = 1e6


class SimulationError(RuntimeError):
    pass


@dataclass(frozen=True)
class CentroidalState:
    c: np.ndarray
    l: np.ndarray
    k: np.ndarray

    def __post_init__(self):
        for name in ("c", "l", "k"):
            v = np.asarray(getattr(self, name), dtype=float).reshape(3)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")
            object.__setattr__(self, name, v)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.c, self.l, self.k])

    @classmethod
    def from_vector(cls, x) -> "CentroidalState":
        x = np.asarray(x, dtype=float).reshape(9)
        return cls(x[0:3], x[3:6], x[6:9])


@dataclass(frozen=True)
class ContactSet:
    """Per-foot contact flags ``b`` (4,), positions ``r`` (4, 3), forces ``f`` (4, 3)."""

    b: np.ndarray
    r: np.ndarray
    f: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.b).reshape(N_FEET)
        if not np.all((b == 0) | (b == 1)):
            raise ValueError("contact flags must be 0 or 1")
        r = np.asarray(self.r, dtype=float).reshape(N_FEET, 3)
        f = np.asarray(self.f, dtype=float).reshape(N_FEET, 3)
        if np.any(f[b == 0] != 0.0):
            raise ValueError("inactive feet must carry exactly zero force")
        object.__setattr__(self, "b", b.astype(int))
        object.__setattr__(self, "r", r)
        object.__setattr__(self, "f", f)

    @classmethod
    def airborne(cls, r=None) -> "ContactSet":
        r = np.zeros((N_FEET, 3)) if r is None else r
        return cls(np.zeros(N_FEET, int), r, np.zeros((N_FEET, 3)))


def _default_offsets() -> np.ndarray:
    # Go1-sized stance rectangle, feet on the ground below the hips
    return np.array([[0.19, 0.13, 0.0], [0.19, -0.13, 0.0],
                     [-0.19, 0.13, 0.0], [-0.19, -0.13, 0.0]])


@dataclass(frozen=True)
class RobotParams:
    mass: float = 12.0
    gravity: tuple = (0.0, 0.0, -9.81)
    foot_offsets: np.ndarray = field(default_factory=_default_offsets)
    nominal_height: float = 0.30

    def __post_init__(self):
        if not self.mass > 0:
            raise ValueError("mass must be positive")
        object.__setattr__(self, "foot_offsets",
                           np.asarray(self.foot_offsets, dtype=float).reshape(N_FEET, 3))

    @property
    def g(self) -> np.ndarray:
        return np.asarray(self.gravity, dtype=float)


@dataclass(frozen=True)
class ControllerGains:
    """Stand-in for a motion planner: momentum tracking and force limits."""

    k_l: float = 20.0      # 1/s, linear momentum tracking
    k_k: float = 10.0      # 1/s, angular momentum damping
    k_h: float = 5.0       # 1/s, CoM height regulation
    mu: float = 0.8
    f_max: float = 500.0
    boost_fraction: float = 0.3
    internal_force_std: float = 15.0   # N, squeezing forces between stance feet
    internal_force_tau: float = 0.1    # s, correlation time of those forces
    placement_std: float = 0.03        # m, touchdown scatter around the nominal foothold


@dataclass(frozen=True)
class GaitSchedule:
    gait: str
    period: float
    duty: np.ndarray
    phase: np.ndarray
    v_cmd: np.ndarray

    def phase_of(self, t: float) -> np.ndarray:
        """Fraction of the stance/swing cycle each foot is at, in [0, 1)."""
        frac = (t / self.period - self.phase) % 1.0
        # snap sample times that land on a switch boundary
        return np.round(frac, 9) % 1.0

    def contacts(self, t: float) -> np.ndarray:
        return (self.phase_of(t) < self.duty).astype(int)

    def stance_duration(self) -> np.ndarray:
        return self.duty * self.period


def build_gait_schedule(gait: str, period: float, duty: float, v_cmd=(0.0, 0.0)) -> GaitSchedule:
    if gait not in GAITS:
        raise ValueError(f"unknown gait {gait!r}; expected one of {GAITS}")
    if not period > 0:
        raise ValueError("period must be positive")
    if not 0.0 < duty <= 1.0:
        raise ValueError("duty must lie in (0, 1]")
    phase = {
        "trot": [0.0, 0.5, 0.5, 0.0],
        "jump": [0.0, 0.0, 0.0, 0.0],
        "bound": [0.0, 0.0, 0.5, 0.5],
    }[gait]
    v = np.asarray(v_cmd, dtype=float).reshape(2)
    return GaitSchedule(gait, float(period), np.full(N_FEET, float(duty)), np.array(phase), v)


@dataclass(frozen=True)
class NoiseConfig:
    sigma_state: tuple = (0.002, 0.02, 0.02)   # per group: c, l, k
    sigma_force: float = 5.0
    sigma_footpos: float = 0.002
    seed: int = 0

    def __post_init__(self):
        if len(self.sigma_state) != 3:
            raise ValueError("sigma_state needs one value per group (c, l, k)")
        if min(*self.sigma_state, self.sigma_force, self.sigma_footpos) < 0:
            raise ValueError("noise standard deviations must be non-negative")

    def state_sigmas(self) -> np.ndarray:
        return np.repeat(np.asarray(self.sigma_state, dtype=float), 3)


@dataclass(frozen=True)
class Channel:
    """Sampled states (n, 9) and contact data (n, 4) / (n, 4, 3)."""

    states: np.ndarray
    b: np.ndarray
    r: np.ndarray
    f: np.ndarray

    def __len__(self) -> int:
        return self.states.shape[0]

    def contact(self, i: int) -> ContactSet:
        return ContactSet(self.b[i], self.r[i], self.f[i])

    def state(self, i: int) -> CentroidalState:
        return CentroidalState.from_vector(self.states[i])

    def check(self) -> None:
        if np.any(self.f[self.b == 0] != 0.0):
            raise ValueError("inactive feet must carry exactly zero force")


@dataclass(frozen=True)
class Trajectory:
    dt: float
    truth: Channel
    measured: Channel | None = None
    gait: str = ""
    v_cmd: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.truth.check()
        if self.measured is not None:
            if len(self.measured) != len(self.truth):
                raise ValueError("truth and measured channels differ in length")
            if not np.array_equal(self.measured.b, self.truth.b):
                raise ValueError("truth and measured contact flags differ")
            self.measured.check()

    def __len__(self) -> int:
        return len(self.truth)

    @property
    def t(self) -> np.ndarray:
        return np.arange(len(self)) * self.dt

    def channel(self, name: str) -> Channel:
        if name not in ("truth", "measured"):
            raise ValueError(f"unknown channel {name!r}")
        ch = self.truth if name == "truth" else self.measured
        if ch is None:
            raise ValueError(f"trajectory has no {name} channel")
        return ch


# --------------------------------------------------------------------------
# Dynamics
# --------------------------------------------------------------------------

def _cross(a, b) -> np.ndarray:
    return np.array([a[1] * b[2] - a[2] * b[1],
                     a[2] * b[0] - a[0] * b[2],
                     a[0] * b[1] - a[1] * b[0]])


def _moment_sum(r, f) -> np.ndarray:
    """Sum over rows of r x f for (n, 3) arrays."""
    return np.array([(r[:, 1] * f[:, 2] - r[:, 2] * f[:, 1]).sum(),
                     (r[:, 2] * f[:, 0] - r[:, 0] * f[:, 2]).sum(),
                     (r[:, 0] * f[:, 1] - r[:, 1] * f[:, 0]).sum()])


def _wrench(contacts: ContactSet) -> tuple[np.ndarray, np.ndarray]:
    """Net force and net moment about the origin of the active feet."""
    bf = contacts.b[:, None] * contacts.f
    return bf.sum(axis=0), _moment_sum(contacts.r, bf)


def _derivative(x, force, moment0, params: RobotParams) -> np.ndarray:
    # sum (r - c) x f = sum r x f - c x sum f
    return np.concatenate([x[3:6] / params.mass, params.mass * params.g + force,
                           moment0 - _cross(x[0:3], force)])


def centroidal_derivative(x, contacts: ContactSet, params: RobotParams) -> np.ndarray:
    x = x.to_vector() if isinstance(x, CentroidalState) else np.asarray(x, dtype=float)
    c = x[0:3]
    bf = contacts.b[:, None] * contacts.f
    moments = np.cross(contacts.r - c, bf).sum(axis=0)
    return np.concatenate([x[3:6] / params.mass, params.mass * params.g + bf.sum(axis=0), moments])


def integrate_step(x, contacts: ContactSet, params: RobotParams, dt: float) -> np.ndarray:
    """One classical RK4 step with the contact set frozen over the step."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = x.to_vector() if isinstance(x, CentroidalState) else np.asarray(x, dtype=float)
    return _rk4(x, *_wrench(contacts), params, dt)


def _rk4(x, force, moment0, params: RobotParams, dt: float) -> np.ndarray:
    k1 = _derivative(x, force, moment0, params)
    k2 = _derivative(x + 0.5 * dt * k1, force, moment0, params)
    k3 = _derivative(x + 0.5 * dt * k2, force, moment0, params)
    k4 = _derivative(x + dt * k3, force, moment0, params)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def contact_map(c, r_active) -> np.ndarray:
    """6 x 3n map from stacked active-foot forces to [sum f; sum (r - c) x f]."""
    r_active = np.asarray(r_active, dtype=float).reshape(-1, 3)
    n = r_active.shape[0]
    g = np.zeros((6, 3 * n))
    for i in range(n):
        g[0:3, 3 * i:3 * i + 3] = np.eye(3)
        g[3:6, 3 * i:3 * i + 3] = skew(r_active[i] - c)
    return g


def distribute_forces(x, active, foot_positions, desired_rate, params: RobotParams) -> ContactSet:
    """Minimum-norm contact forces realizing a desired momentum rate.

    ``desired_rate`` is ``[ldot, kdot]``; gravity is compensated here. Inactive
    feet get exactly zero force; a rank-deficient map yields the least-norm
    least-squares solution.
    """
    x = x.to_vector() if isinstance(x, CentroidalState) else np.asarray(x, dtype=float)
    active = np.asarray(active).astype(int).reshape(N_FEET)
    r = np.asarray(foot_positions, dtype=float).reshape(N_FEET, 3)
    f = np.zeros((N_FEET, 3))
    idx = np.flatnonzero(active)
    if idx.size:
        rhs = np.asarray(desired_rate, dtype=float).reshape(6).copy()
        rhs[0:3] -= params.mass * params.g
        g = contact_map(x[0:3], r[idx])
        sol = np.linalg.lstsq(g, rhs, rcond=1e-12)[0]
        f[idx] = sol.reshape(-1, 3)
    return ContactSet(active, r, f)


def internal_forces(x, contacts: ContactSet, wish) -> np.ndarray:
    """Project per-foot force wishes onto forces with zero net wrench."""
    x = x.to_vector() if isinstance(x, CentroidalState) else np.asarray(x, dtype=float)
    out = np.zeros((N_FEET, 3))
    idx = np.flatnonzero(contacts.b)
    if idx.size > 1:
        g = contact_map(x[0:3], contacts.r[idx])
        w = np.asarray(wish, dtype=float)[idx].reshape(-1)
        w = w - np.linalg.pinv(g, rcond=1e-12) @ (g @ w)
        out[idx] = w.reshape(-1, 3)
    return out


def clip_to_friction_cone(contacts: ContactSet, mu: float, f_max: float) -> ContactSet:
    """Clamp normal force to [0, f_max], then scale tangential force into the cone."""
    return replace(contacts, f=_clip_forces(contacts.f, contacts.b, mu, f_max))


def _clip_forces(f, b, mu: float, f_max: float) -> np.ndarray:
    f = np.array(f, dtype=float)
    f[:, 2] = np.clip(f[:, 2], 0.0, f_max)
    fxy = np.hypot(f[:, 0], f[:, 1])
    limit = mu * f[:, 2]
    over = fxy > limit
    scale = np.where(over, limit / np.where(over, fxy, 1.0), 1.0)
    f[:, :2] *= scale[:, None]
    f[np.asarray(b) == 0] = 0.0
    return f


def simulate(schedule: GaitSchedule, params: RobotParams, duration: float, dt: float = 1e-3,
             gains: ControllerGains = ControllerGains(), seed: int = 0) -> Trajectory:
    """Ground-truth trajectory of ``duration`` seconds sampled every ``dt``.

    Contacts switch on sample boundaries and are held over each RK4 step. The
    contact set stored with sample k is the one applied from k to k + 1.
    ``seed`` drives the internal (zero net wrench) forces between stance feet,
    an Ornstein-Uhlenbeck process per foot and axis, and a horizontal scatter
    of each touchdown point. Both keep the per-foot inputs from being locked
    to the state by the gait's symmetry.
    """
    if duration < schedule.period - 1e-12:
        raise ValueError("duration must cover at least one gait period")
    n_steps = int(round(duration / dt))
    m, h0 = params.mass, params.nominal_height
    t_stance = schedule.stance_duration()
    v_cmd3 = np.array([schedule.v_cmd[0], schedule.v_cmd[1], 0.0])

    jump = schedule.gait == "jump"
    if jump:
        t_flight = (1.0 - schedule.duty[0]) * schedule.period
        v_takeoff = 0.5 * abs(params.g[2]) * t_flight
        t_boost = gains.boost_fraction * t_stance[0]

    states = np.zeros((n_steps + 1, 9))
    bs = np.zeros((n_steps + 1, N_FEET), int)
    rs = np.zeros((n_steps + 1, N_FEET, 3))
    fs = np.zeros((n_steps + 1, N_FEET, 3))

    x = np.zeros(9)
    x[2] = h0
    feet = params.foot_offsets.copy()
    feet[:, 2] = 0.0
    prev_b = schedule.contacts(0.0)
    rng = np.random.default_rng(seed)
    decay = np.exp(-dt / gains.internal_force_tau) if gains.internal_force_tau > 0 else 0.0
    kick = gains.internal_force_std * np.sqrt(1.0 - decay ** 2)
    wish = gains.internal_force_std * rng.standard_normal((N_FEET, 3))
    rng_place = np.random.default_rng([seed, 1])

    for step in range(n_steps + 1):
        t = step * dt
        b = schedule.contacts(t)
        touchdown = (b == 1) & (prev_b == 0)
        for i in np.flatnonzero(touchdown):
            feet[i, :2] = x[0:2] + params.foot_offsets[i, :2] + v_cmd3[:2] * t_stance[i] / 2.0
            feet[i, :2] += gains.placement_std * rng_place.standard_normal(2)
            feet[i, 2] = 0.0
        prev_b = b

        c, l, k = x[0:3], x[3:6], x[6:9]
        l_ref = m * v_cmd3
        l_ref[2] = m * gains.k_h * (h0 - c[2])
        ff = np.zeros(3)
        if jump and b.all():
            t_in = schedule.phase_of(t)[0] * schedule.period
            t_left = t_stance[0] - t_in
            if t_left <= t_boost + 1e-12:
                frac = (t_boost - t_left) / t_boost
                l_ref[2] = m * v_takeoff * frac
                ff[2] = m * v_takeoff / t_boost
        ldot = gains.k_l * (l_ref - l) + ff
        kdot = -gains.k_k * k
        f = np.zeros((N_FEET, 3))
        idx = np.flatnonzero(b)
        if idx.size:
            rhs = np.concatenate([ldot - m * params.g, kdot])
            g = contact_map(c, feet[idx])
            g_pinv = np.linalg.pinv(g, rcond=1e-12)
            sol = g_pinv @ rhs
            if gains.internal_force_std > 0 and idx.size > 1:
                w = wish[idx].reshape(-1)
                sol += w - g_pinv @ (g @ w)
            f[idx] = sol.reshape(-1, 3)
        if gains.internal_force_std > 0:
            wish = decay * wish + kick * rng.standard_normal((N_FEET, 3))
        f = _clip_forces(f, b, gains.mu, gains.f_max)

        states[step], bs[step], rs[step], fs[step] = x, b, feet, f
        if step < n_steps:
            x = _rk4(x, f.sum(axis=0), _moment_sum(feet, f), params, dt)
            if not np.all(np.isfinite(x)) or np.abs(x).max() > DIVERGENCE_BOUND:
                raise SimulationError(f"integration diverged at t = {(step + 1) * dt:.3f} s")

    truth = Channel(states, bs, rs, fs)
    return Trajectory(dt, truth, None, schedule.gait, tuple(float(v) for v in schedule.v_cmd))


def add_noise(traj: Trajectory, noise: NoiseConfig) -> Trajectory:
    """Attach a measured channel: truth plus white Gaussian noise."""
    rng = np.random.default_rng(noise.seed)
    tr = traj.truth
    n = len(tr)
    states = tr.states.copy()
    f = tr.f.copy()
    r = tr.r.copy()
    sig = noise.state_sigmas()
    # draw every stream regardless of sigma so a channel's noise does not
    # depend on whether another channel is switched off
    e_state = rng.standard_normal((n, 9))
    e_force = rng.standard_normal((n, N_FEET, 3))
    e_foot = rng.standard_normal((n, N_FEET, 3))
    if np.any(sig > 0):
        states += e_state * sig
    if noise.sigma_force > 0:
        f += noise.sigma_force * e_force * tr.b[:, :, None]
    if noise.sigma_footpos > 0:
        r += noise.sigma_footpos * e_foot
    return replace(traj, measured=Channel(states, tr.b.copy(), r, f))


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------

def csv_header() -> list[str]:
    cols = ["t", *STATE_LABELS]
    for foot in FEET:
        cols += [f"{foot}_b", f"{foot}_r_x", f"{foot}_r_y", f"{foot}_r_z",
                 f"{foot}_f_x", f"{foot}_f_y", f"{foot}_f_z"]
    return cols


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def write_channel_csv(path, traj: Trajectory, channel: str = "truth") -> None:
    ch = traj.channel(channel)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header())
        for i in range(len(ch)):
            row = [_fmt(i * traj.dt)] + [_fmt(v) for v in ch.states[i]]
            for j in range(N_FEET):
                row.append(str(int(ch.b[i, j])))
                row += [_fmt(v) for v in ch.r[i, j]]
                row += [_fmt(v) for v in ch.f[i, j]]
            w.writerow(row)


def read_channel_csv(path) -> tuple[float, Channel]:
    """Load one channel file; returns ``(dt, channel)``."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != csv_header():
        raise ValueError(f"{path}: unexpected header")
    data = np.array(rows[1:], dtype=float)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError(f"{path}: need at least two samples")
    dt = float(data[1, 0] - data[0, 0])
    feet = data[:, 10:].reshape(-1, N_FEET, 7)
    return dt, Channel(data[:, 1:10].copy(), feet[:, :, 0].astype(int),
                       feet[:, :, 1:4].copy(), feet[:, :, 4:7].copy())


def load_trajectory(truth_path, measured_path=None, gait: str = "", v_cmd=(0.0, 0.0)) -> Trajectory:
    dt, truth = read_channel_csv(truth_path)
    measured = None
    if measured_path is not None:
        _, measured = read_channel_csv(measured_path)
    return Trajectory(dt, truth, measured, gait, tuple(v_cmd))


def save_trajectory(traj: Trajectory, truth_path, measured_path=None) -> None:
    write_channel_csv(Path(truth_path), traj, "truth")
    if measured_path is not None:
        write_channel_csv(Path(measured_path), traj, "measured")
