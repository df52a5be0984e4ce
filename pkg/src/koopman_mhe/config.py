"""Experiment configuration: one JSON document validated against a schema.

Optional sections missing from a document are filled field by field from the
packaged ``configs/default.json``; the gait list is never merged.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .centroidal_sim import GAITS, ControllerGains, NoiseConfig, RobotParams
from .estimators import EkfConfig, MheConfig

_OPTIONAL_SECTIONS = ("robot", "controller", "noise", "split", "dmdc", "eval", "mhe", "ekf",
                      "estimate")


class ConfigError(ValueError):
    pass


def _config_file(name: str):
    return resources.files("koopman_mhe").joinpath("configs", name)


def load_schema() -> dict:
    return json.loads(_config_file("config.schema.json").read_text(encoding="utf-8"))


def default_document() -> dict:
    return json.loads(_config_file("default.json").read_text(encoding="utf-8"))


def validate_document(doc) -> None:
    try:
        jsonschema.validate(doc, load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config {where}: {exc.message}") from None


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _weight(value) -> np.ndarray:
    a = np.asarray(value, dtype=float)
    return np.diag(a) if a.ndim == 1 else a


@dataclass(frozen=True)
class GaitSpec:
    gait: str
    period: float
    duty: float
    velocities: tuple


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    out_dir: Path
    dt: float
    duration: float
    robot: RobotParams
    controller: ControllerGains
    gaits: tuple
    noise: NoiseConfig
    train_fraction: float
    sv_threshold: float
    scale_rows: bool
    train_gaits: tuple
    eval_horizon: int
    mhe: MheConfig
    ekf: EkfConfig
    estimators: tuple
    estimate_gaits: tuple | None
    timing: bool
    document: dict

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        validate_document(doc)
        merged = copy.deepcopy(doc)
        defaults = default_document()
        for section in _OPTIONAL_SECTIONS:
            merged[section] = {**defaults[section], **doc.get(section, {})}
        try:
            return cls._build(merged)
        except (ValueError, np.linalg.LinAlgError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from None

    @classmethod
    def _build(cls, d: dict) -> "ExperimentConfig":
        names = [g["gait"] for g in d["gaits"]]
        if len(set(names)) != len(names):
            raise ConfigError("each gait may appear only once in 'gaits'")
        for g in d["gaits"]:
            if d["duration"] < g["period"]:
                raise ConfigError(f"duration must cover one {g['gait']} period")
        if d["duration"] < 2 * d["dt"]:
            raise ConfigError("duration must span at least two samples")
        out_dir = Path(d["out_dir"]).expanduser().resolve()
        if out_dir.exists() and not out_dir.is_dir():
            raise ConfigError(f"out_dir {out_dir} exists and is not a directory")
        mhe, ekf, est = d["mhe"], d["ekf"], d["estimate"]
        gaits = tuple(GaitSpec(g["gait"], float(g["period"]), float(g["duty"]),
                               tuple((float(v[0]), float(v[1])) for v in g["velocities"]))
                      for g in d["gaits"])
        return cls(
            seed=int(d["seed"]),
            out_dir=out_dir,
            dt=float(d["dt"]),
            duration=float(d["duration"]),
            robot=RobotParams(float(d["robot"]["mass"]), tuple(d["robot"]["gravity"]),
                              np.array(d["robot"]["foot_offsets"], dtype=float),
                              float(d["robot"]["nominal_height"])),
            controller=ControllerGains(**{k: float(v) for k, v in d["controller"].items()}),
            gaits=gaits,
            noise=NoiseConfig(tuple(d["noise"]["sigma_state"]), float(d["noise"]["sigma_force"]),
                              float(d["noise"]["sigma_footpos"])),
            train_fraction=float(d["split"]["train_fraction"]),
            sv_threshold=float(d["dmdc"]["sv_threshold"]),
            scale_rows=bool(d["dmdc"]["scale_rows"]),
            train_gaits=tuple(d["dmdc"]["train_gaits"]),
            eval_horizon=int(d["eval"]["horizon"]),
            mhe=MheConfig(int(mhe["horizon"]), _weight(mhe["P_x"]), _weight(mhe["P_w"]),
                          _weight(mhe["P_v"]), mhe.get("lower"), mhe.get("upper")),
            ekf=EkfConfig(_weight(ekf["Q"]), _weight(ekf["R"]), _weight(ekf["P0"]), ekf["init"]),
            estimators=tuple(est["estimators"]),
            estimate_gaits=None if est["gaits"] is None else tuple(est["gaits"]),
            timing=bool(est["timing"]),
            document=d,
        )

    def replace(self, **changes) -> "ExperimentConfig":
        """Rebuild from the merged document with top-level or dotted-key overrides.

        ``replace(seed=3, **{"mhe.horizon": 20})``
        """
        doc = copy.deepcopy(self.document)
        for key, value in changes.items():
            if "." in key:
                section, field = key.split(".", 1)
                doc[section][field] = value
            else:
                doc[key] = value
        return ExperimentConfig.from_dict(doc)

    def echo(self) -> dict:
        """Merged document without ``out_dir``, so artifacts do not depend on where they live."""
        return {k: v for k, v in copy.deepcopy(self.document).items() if k != "out_dir"}

    def sha256(self) -> str:
        return hashlib.sha256(canonical_json(self.echo()).encode("utf-8")).hexdigest()

    def gait_names(self) -> tuple:
        return tuple(g.gait for g in self.gaits)


def load_config(path=None) -> ExperimentConfig:
    """Parse a config file, or the packaged default when ``path`` is None."""
    if path is None:
        return ExperimentConfig.from_dict(default_document())
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return ExperimentConfig.from_dict(doc)


def parse_gait_list(text: str) -> tuple:
    names = tuple(s.strip() for s in text.split(",") if s.strip())
    if not names:
        raise ConfigError("gait list is empty")
    bad = [n for n in names if n not in GAITS]
    if bad:
        raise ConfigError(f"unknown gait(s) {', '.join(bad)}; expected from {', '.join(GAITS)}")
    return names
