"""Pipeline commands: generate, fit, open-loop evaluation, estimation, spectrum.

All artifacts live under one output directory::

    <out>/manifest.json
    <out>/trajectories/<gait>_<jj>_{truth,measured}.csv
    <out>/model.json, <out>/fit_report.json
    <out>/openloop_rmse.csv, <out>/openloop_report.json
    <out>/estimates/<gait>_<jj>_<estimator>.csv
    <out>/estimate_table.csv, <out>/estimate_summary.json

Paths inside JSON files are relative to ``<out>``, and nothing time- or
location-dependent is written unless timing is switched on, so reruns with
the same config and seed reproduce every file byte for byte.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import dmdc
from .centroidal_sim import (STATE_LABELS, Trajectory, add_noise, build_gait_schedule,
                             load_trajectory, save_trajectory, simulate)
from .config import ConfigError, ExperimentConfig
from .estimators import run_estimator, write_run_csv

MANIFEST = "manifest.json"
MODEL = "model.json"
MANIFEST_FORMAT = 1


class ArtifactError(OSError):
    """Missing, unreadable or inconsistent pipeline file."""


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_json(path: Path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: invalid JSON ({exc.msg})") from None


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactError(f"cannot create {path}: {exc.strerror}") from None
    return path


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def trajectory_seeds(seed: int, index: int) -> tuple[int, int]:
    """Independent (simulation, noise) seeds for trajectory ``index``."""
    a, b = np.random.SeedSequence([seed, index]).generate_state(2, dtype=np.uint64)
    return int(a), int(b)


def split_counts(n: int, train_fraction: float) -> int:
    """Training trajectories out of ``n``, keeping one for validation when n > 1."""
    if n == 1:
        return 1
    return min(n - 1, max(1, int(np.floor(train_fraction * n + 0.5))))


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Manifest:
    root: Path
    data: dict

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        data = _read_json(path)
        if data.get("format") != MANIFEST_FORMAT or "trajectories" not in data:
            raise ArtifactError(f"{path}: not a trajectory manifest")
        root = path.parent
        for e in data["trajectories"]:
            for key in ("truth", "measured"):
                if not (root / e[key]).is_file():
                    raise ArtifactError(f"manifest lists missing file {e[key]}")
        return cls(root, data)

    @property
    def dt(self) -> float:
        return float(self.data["dt"])

    def entries(self, split: str | None = None, gaits=None) -> list[dict]:
        out = []
        for e in self.data["trajectories"]:
            if split is not None and e["split"] != split:
                continue
            if gaits is not None and e["gait"] not in gaits:
                continue
            out.append(e)
        return out

    def load_trajectory(self, entry: dict) -> Trajectory:
        try:
            traj = load_trajectory(self.root / entry["truth"], self.root / entry["measured"],
                                   entry["gait"], entry["v_cmd"])
        except (OSError, ValueError) as exc:
            raise ArtifactError(f"trajectory {entry['id']}: {exc}") from None
        if len(traj) != entry["rows"]:
            raise ArtifactError(f"trajectory {entry['id']}: {len(traj)} rows, "
                                f"manifest says {entry['rows']}")
        return replace(traj, dt=self.dt)


def _load_model(path) -> dmdc.KoopmanModel:
    try:
        return dmdc.load_model(path)
    except OSError as exc:
        raise ArtifactError(f"cannot read model {path}: {exc.strerror}") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise ArtifactError(f"{path}: malformed model file ({exc})") from None


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig, gaits=None) -> Path:
    """Simulate every (gait, velocity) entry, add noise, write CSVs and the manifest."""
    out = _ensure_dir(cfg.out_dir)
    traj_dir = _ensure_dir(out / "trajectories")
    selected = [g for g in cfg.gaits if gaits is None or g.gait in gaits]
    if not selected:
        raise ConfigError("gait filter selects nothing from the config")
    n_rows = int(round(cfg.duration / cfg.dt)) + 1
    entries = []
    index = 0
    for spec in cfg.gaits:
        n_train = split_counts(len(spec.velocities), cfg.train_fraction)
        for j, v in enumerate(spec.velocities):
            sim_seed, noise_seed = trajectory_seeds(cfg.seed, index)
            index += 1
            if spec not in selected:
                continue
            name = f"{spec.gait}_{j:02d}"
            schedule = build_gait_schedule(spec.gait, spec.period, spec.duty, v)
            traj = simulate(schedule, cfg.robot, cfg.duration, cfg.dt, cfg.controller, sim_seed)
            traj = add_noise(traj, replace(cfg.noise, seed=noise_seed))
            truth, measured = f"trajectories/{name}_truth.csv", f"trajectories/{name}_measured.csv"
            try:
                save_trajectory(traj, out / truth, out / measured)
            except OSError as exc:
                raise ArtifactError(f"cannot write {name}: {exc.strerror}") from None
            entries.append({
                "id": name, "gait": spec.gait, "period": spec.period, "duty": spec.duty,
                "v_cmd": list(v), "sim_seed": sim_seed, "noise_seed": noise_seed,
                "truth": truth, "measured": measured, "rows": n_rows,
                "split": "train" if j < n_train else "validation",
            })
    manifest = {
        "format": MANIFEST_FORMAT, "seed": cfg.seed, "dt": cfg.dt, "duration": cfg.duration,
        "config_sha256": cfg.sha256(), "trajectories": entries,
    }
    _write_json(out / MANIFEST, manifest)
    return out / MANIFEST


def cmd_fit(manifest_path, out_dir, gaits, sv_threshold: float,
            scale_rows: bool = False) -> Path:
    """Fit (A, B) on the truth channel of the training split of ``gaits``."""
    man = Manifest.load(manifest_path)
    entries = man.entries("train", gaits)
    if not entries:
        raise ConfigError(f"no training trajectories for gaits {', '.join(gaits)}")
    trajs = [man.load_trajectory(e) for e in entries]
    data = dmdc.assemble(trajs, "truth")
    model, report = dmdc.fit(data, sv_threshold, man.dt, scale_rows,
                             {"trajectories": [e["id"] for e in entries]})
    spec = dmdc.spectrum(model)
    out = _ensure_dir(Path(out_dir))
    dmdc.save_model(model, out / MODEL)
    _write_json(out / "fit_report.json", {
        "gaits": model.metadata["gaits"],
        "trajectories": [e["id"] for e in entries],
        "n_columns": report.n_columns,
        "rank": report.rank,
        "residual": report.residual,
        "sv_threshold": sv_threshold,
        "scale_rows": scale_rows,
        "eigenvalues": [[float(z.real), float(z.imag)] for z in spec.eigenvalues],
        "magnitudes": [float(m) for m in spec.magnitudes],
        "spectral_radius": spec.spectral_radius,
    })
    return out / MODEL


def openloop_windows(n_samples: int, horizon: int) -> list[int]:
    """Start indices of non-overlapping windows of ``horizon`` steps."""
    if horizon < 1:
        raise ConfigError("horizon must be at least 1")
    if horizon > n_samples - 1:
        raise ConfigError(f"horizon {horizon} exceeds trajectory length of {n_samples - 1} steps")
    return list(range(0, n_samples - horizon, horizon))


def openloop_errors(model: dmdc.KoopmanModel, traj: Trajectory, horizon: int):
    """Squared rollout errors over all windows of one trajectory, plus the window count."""
    ch = traj.truth
    u = dmdc.encode_inputs(ch)
    starts = openloop_windows(len(ch), horizon)
    sq = np.zeros((len(starts) * horizon, dmdc.DIM_X))
    for w, s in enumerate(starts):
        pred = dmdc.rollout(model, ch.states[s], u[s:s + horizon], horizon)
        sq[w * horizon:(w + 1) * horizon] = (pred[1:] - ch.states[s + 1:s + horizon + 1]) ** 2
    return sq, len(starts)


def cmd_eval_openloop(model_path, manifest_path, horizon: int, out_dir) -> dict:
    """Per-gait open-loop RMSE over the validation split."""
    model = _load_model(model_path)
    man = Manifest.load(manifest_path)
    entries = man.entries("validation")
    if not entries:
        raise ConfigError("manifest has no validation trajectories")
    per_gait: dict[str, list] = {}
    for e in entries:
        sq, n_win = openloop_errors(model, man.load_trajectory(e), horizon)
        per_gait.setdefault(e["gait"], []).append((sq, n_win))
    rows = []
    for gait, parts in per_gait.items():
        sq = np.vstack([p[0] for p in parts])
        rmse = np.sqrt(sq.mean(axis=0))
        rows.append({"gait": gait, "windows": sum(p[1] for p in parts),
                     "rmse": dict(zip(STATE_LABELS, map(float, rmse)))})
    out = _ensure_dir(Path(out_dir))
    with open(out / "openloop_rmse.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gait", "windows", *STATE_LABELS])
        for r in rows:
            w.writerow([r["gait"], r["windows"]] + [format(r["rmse"][s], ".17g") for s in STATE_LABELS])
    report = {"horizon": horizon, "model_sha256": file_sha256(model_path),
              "trajectories": [e["id"] for e in entries], "rows": rows}
    _write_json(out / "openloop_report.json", report)
    return report


def cmd_estimate(model_path, manifest_path, cfg: ExperimentConfig, estimators=None,
                 gaits=None, out_dir=None) -> dict:
    """Run the estimators over the measured channel of the validation split."""
    estimators = tuple(estimators or cfg.estimators)
    gaits = gaits or cfg.estimate_gaits
    model = _load_model(model_path) if "mhe" in estimators else None
    man = Manifest.load(manifest_path)
    entries = man.entries("validation", gaits)
    if not entries:
        raise ConfigError("no validation trajectories match the gait selection")
    out = _ensure_dir(Path(out_dir or cfg.out_dir))
    run_dir = _ensure_dir(out / "estimates")
    sq: dict[tuple, list] = {}
    kkt: dict[tuple, float] = {}
    times: dict[tuple, list] = {}
    for e in entries:
        traj = man.load_trajectory(e)
        for kind in estimators:
            run = run_estimator(kind, traj, model=model, mhe_config=cfg.mhe,
                                ekf_config=cfg.ekf, params=cfg.robot, timing=cfg.timing)
            try:
                write_run_csv(run_dir / f"{e['id']}_{kind}.csv", run)
            except OSError as exc:
                raise ArtifactError(f"cannot write run {e['id']}: {exc.strerror}") from None
            key = (e["gait"], kind)
            sq.setdefault(key, []).append((run.estimates - run.truth) ** 2)
            kkt[key] = max(kkt.get(key, 0.0), run.kkt_max)
            if run.solve_time_us is not None:
                times.setdefault(key, []).append(run.solve_time_us)
    rows = []
    for (gait, kind), parts in sq.items():
        rmse = np.sqrt(np.vstack(parts).mean(axis=0))
        row = {"gait": gait, "estimator": kind, "samples": int(sum(len(p) for p in parts)),
               "rmse": dict(zip(STATE_LABELS, map(float, rmse)))}
        if kind == "mhe":
            row["kkt_max"] = kkt[(gait, kind)]
        if (gait, kind) in times:
            row["mean_solve_time_us"] = float(np.mean(np.concatenate(times[(gait, kind)])))
        rows.append(row)
    with open(out / "estimate_table.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gait", "estimator", *STATE_LABELS])
        for r in rows:
            w.writerow([r["gait"], r["estimator"]] + [format(r["rmse"][s], ".17g") for s in STATE_LABELS])
    summary = {
        "rows": rows,
        "trajectories": [e["id"] for e in entries],
        "model_sha256": file_sha256(model_path) if model is not None else None,
        "model_gaits": model.metadata.get("gaits") if model is not None else None,
        "config": cfg.echo(),
    }
    _write_json(out / "estimate_summary.json", summary)
    return summary


def cmd_spectrum(model_path) -> dmdc.Spectrum:
    return dmdc.spectrum(_load_model(model_path))


def format_spectrum(spec: dmdc.Spectrum) -> list[str]:
    """CSV lines ``index,re,im,magnitude,unit_circle_distance`` then the spectral radius."""
    lines = ["index,re,im,magnitude,unit_circle_distance"]
    for i, (z, mag) in enumerate(zip(spec.eigenvalues, spec.magnitudes)):
        lines.append(",".join([str(i), format(z.real, ".17g"), format(z.imag, ".17g"),
                               format(mag, ".17g"), format(1.0 - mag, ".17g")]))
    lines.append(f"spectral_radius,{spec.spectral_radius:.17g}")
    return lines


def run_pipeline(cfg: ExperimentConfig) -> dict:
    """generate, fit, eval and estimate with the config's settings."""
    manifest = cmd_generate(cfg)
    model = cmd_fit(manifest, cfg.out_dir, cfg.train_gaits, cfg.sv_threshold, cfg.scale_rows)
    openloop = cmd_eval_openloop(model, manifest, cfg.eval_horizon, cfg.out_dir)
    estimate = cmd_estimate(model, manifest, cfg)
    return {"manifest": manifest, "model": model, "openloop": openloop, "estimate": estimate}
