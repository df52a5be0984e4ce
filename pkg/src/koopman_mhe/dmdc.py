"""DMD with control: snapshot matrices, least-squares fit of (A, B), rollout.

Inputs are 24-vectors, per foot ``[b*f, b*(r - c)]`` in the order FL, FR,
HL, HR, so swing-foot kinematics never reach the model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics
from .centroidal_sim import N_FEET, Channel, ContactSet, Trajectory

DIM_X = 9
DIM_U = 24
DEFAULT_SV_THRESHOLD = 1e-8


def encode_input(x, contacts: ContactSet) -> np.ndarray:
    c = np.asarray(x, dtype=float).reshape(-1)[0:3] if not hasattr(x, "c") else x.c
    b = contacts.b[:, None]
    return np.hstack([b * contacts.f, b * (contacts.r - c)]).reshape(DIM_U)


def decode_input(u, b, c) -> ContactSet:
    """Inverse layout of :func:`encode_input` for the active feet.

    Inactive feet come back with zero position, since the input carries none.
    """
    u = np.asarray(u, dtype=float).reshape(N_FEET, 6)
    b = np.asarray(b).astype(int).reshape(N_FEET)
    r = (u[:, 3:6] + np.asarray(c, dtype=float)) * b[:, None]
    return ContactSet(b, r, u[:, 0:3] * b[:, None])


def encode_inputs(ch: Channel) -> np.ndarray:
    """Vectorized :func:`encode_input` over a whole channel, shape (n, 24)."""
    b = ch.b[:, :, None].astype(float)
    rel = ch.r - ch.states[:, None, 0:3]
    return np.concatenate([b * ch.f, b * rel], axis=2).reshape(len(ch), DIM_U)


@dataclass(frozen=True)
class DataMatrices:
    """Snapshot matrices with trajectory bookkeeping.

    ``starts[i]`` is the first column contributed by trajectory ``i``.
    """

    X: np.ndarray
    Xp: np.ndarray
    U: np.ndarray
    starts: tuple = ()
    labels: tuple = ()

    @property
    def n_columns(self) -> int:
        return self.X.shape[1]

    @property
    def omega(self) -> np.ndarray:
        return np.vstack([self.X, self.U])

    def append(self, other: "DataMatrices") -> "DataMatrices":
        off = self.n_columns
        return DataMatrices(
            np.hstack([self.X, other.X]),
            np.hstack([self.Xp, other.Xp]),
            np.hstack([self.U, other.U]),
            self.starts + tuple(s + off for s in other.starts),
            self.labels + other.labels,
        )


def _empty_data() -> DataMatrices:
    return DataMatrices(np.zeros((DIM_X, 0)), np.zeros((DIM_X, 0)), np.zeros((DIM_U, 0)))


def assemble(trajs, channel: str = "truth") -> DataMatrices:
    data = _empty_data()
    for traj in trajs:
        ch = traj.channel(channel)
        if len(ch) < 2:
            raise ValueError("each trajectory needs at least two samples")
        u = encode_inputs(ch)
        data = data.append(DataMatrices(
            ch.states[:-1].T.copy(), ch.states[1:].T.copy(), u[:-1].T.copy(),
            (0,), (traj.gait,),
        ))
    return data


@dataclass(frozen=True)
class KoopmanModel:
    A: np.ndarray
    B: np.ndarray
    dt: float
    sv_threshold: float
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        B = np.asarray(self.B, dtype=float)
        if A.shape != (DIM_X, DIM_X) or B.shape != (DIM_X, DIM_U):
            raise ValueError(f"expected A {DIM_X}x{DIM_X} and B {DIM_X}x{DIM_U}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("model matrices must be finite")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def K(self) -> np.ndarray:
        return np.hstack([self.A, self.B])


@dataclass(frozen=True)
class FitReport:
    residual: float
    rank: int
    n_columns: int


def fit(data: DataMatrices, sv_threshold: float = DEFAULT_SV_THRESHOLD, dt: float = 1e-3,
        scale_rows: bool = False, metadata: dict | None = None) -> tuple[KoopmanModel, FitReport]:
    """Least-squares ``K = [A B] = X' pinv(Omega)`` with truncated pseudo-inverse.

    With ``scale_rows`` each row of Omega and X' is divided by its standard
    deviation before the solve and K is unscaled afterwards.
    """
    omega = data.omega
    n_rows = DIM_X + data.U.shape[0]
    if data.n_columns < n_rows:
        raise ValueError(f"need at least {n_rows} snapshot columns, got {data.n_columns}")
    xp = data.Xp
    if scale_rows:
        s_om = omega.std(axis=1)
        s_om[s_om == 0] = 1.0
        s_x = xp.std(axis=1)
        s_x[s_x == 0] = 1.0
        p, rank = numerics.pinv(omega / s_om[:, None], sv_threshold, return_rank=True)
        K = s_x[:, None] * ((xp / s_x[:, None]) @ p) / s_om[None, :]
    else:
        p, rank = numerics.pinv(omega, sv_threshold, return_rank=True)
        K = xp @ p
    residual = float(np.linalg.norm(xp - K @ omega))
    meta = {"gaits": sorted(set(data.labels)), "n_columns": data.n_columns,
            "n_trajectories": len(data.starts), "rank": rank, "residual": residual,
            "scale_rows": scale_rows}
    meta.update(metadata or {})
    model = KoopmanModel(K[:, :DIM_X], K[:, DIM_X:], dt, sv_threshold, meta)
    return model, FitReport(residual, rank, data.n_columns)


def rollout(model: KoopmanModel, x0, inputs, n: int) -> np.ndarray:
    """Open-loop ``x_{k+1} = A x_k + B u_k``; returns n + 1 states including x0."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, model.B.shape[1])
    if n < 0 or n > inputs.shape[0]:
        raise ValueError("n must lie in [0, len(inputs)]")
    out = np.empty((n + 1, model.A.shape[0]))
    out[0] = np.asarray(x0, dtype=float).reshape(-1)
    drive = inputs[:n] @ model.B.T
    At = model.A.T
    for k in range(n):
        out[k + 1] = out[k] @ At + drive[k]
    return out


def rmse_per_state(pred, truth) -> np.ndarray:
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    if pred.shape[0] < 1:
        raise ValueError("need at least one sample")
    return np.sqrt(np.mean((pred - truth) ** 2, axis=0))


@dataclass(frozen=True)
class Spectrum:
    eigenvalues: np.ndarray

    @property
    def magnitudes(self) -> np.ndarray:
        return np.abs(self.eigenvalues)

    @property
    def spectral_radius(self) -> float:
        return float(self.magnitudes.max())


def spectrum(model: KoopmanModel) -> Spectrum:
    return Spectrum(numerics.eigenvalues(model.A))


# --------------------------------------------------------------------------
# Model file
# --------------------------------------------------------------------------

def model_to_dict(model: KoopmanModel) -> dict:
    return {
        "dim_x": DIM_X,
        "dim_u": DIM_U,
        "dt": model.dt,
        "sv_threshold": model.sv_threshold,
        "A": [float(v) for v in model.A.ravel()],
        "B": [float(v) for v in model.B.ravel()],
        "metadata": model.metadata,
    }


def model_from_dict(d: dict) -> KoopmanModel:
    if d.get("dim_x") != DIM_X or d.get("dim_u") != DIM_U:
        raise ValueError(f"model file must have dim_x={DIM_X} and dim_u={DIM_U}")
    A, B = d.get("A"), d.get("B")
    if not isinstance(A, list) or len(A) != DIM_X * DIM_X:
        raise ValueError(f"A must hold {DIM_X * DIM_X} numbers")
    if not isinstance(B, list) or len(B) != DIM_X * DIM_U:
        raise ValueError(f"B must hold {DIM_X * DIM_U} numbers")
    return KoopmanModel(np.array(A, dtype=float).reshape(DIM_X, DIM_X),
                        np.array(B, dtype=float).reshape(DIM_X, DIM_U),
                        float(d["dt"]), float(d["sv_threshold"]), dict(d.get("metadata", {})))


def save_model(model: KoopmanModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_model(path) -> KoopmanModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
