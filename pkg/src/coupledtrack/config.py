"""TOML configuration for the pipeline and for simulated scenarios."""
from __future__ import annotations

import dataclasses
import math
import sys
from importlib import resources
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .geometry import CameraIntrinsics, EgoPose
from .kalman import CouplingWeights, NoiseConfig
from .observations import Category, FusionWeights, SizeStats
from .pipeline import PipelineConfig
from .simulator import (KITTI_INTRINSICS, DetectionNoise, EgoSpec, ObjectSpec,
                        ProposalNoise, ScenarioSpec)
from .tracker import TrackerConfig


class ConfigError(ValueError):
    """Invalid or unknown configuration entry; the message names the field."""


BUILTIN_PREFIX = "builtin:"


def resolve_path(path) -> Path:
    """Filesystem path, where ``builtin:NAME`` names a bundled ``data/NAME.toml``."""
    text = str(path)
    if text.startswith(BUILTIN_PREFIX):
        name = text[len(BUILTIN_PREFIX):]
        target = resources.files("coupledtrack") / "data" / f"{name}.toml"
        if not target.is_file():
            raise ConfigError(f"no bundled config named {name!r}")
        return Path(str(target))
    return Path(text)


def _load(path) -> dict:
    path = resolve_path(path)
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _check_type(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be a boolean")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        value = float(value)
    return value


def build_dataclass(cls, table: dict, section: str):
    """Instantiate ``cls`` from a TOML table, rejecting unknown keys."""
    if not isinstance(table, dict):
        raise ConfigError(f"{section} must be a table")
    fields = {f.name: f for f in dataclasses.fields(cls) if not f.name.startswith("_")}
    kwargs = {}
    for key, value in table.items():
        if key not in fields:
            raise ConfigError(f"unknown key {section}.{key}")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        kwargs[key] = _check_type(f"{section}.{key}", value, default)
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        if section not in msg:
            msg = f"{section}: {msg}"
        raise ConfigError(msg) from exc


def _size_stats(table: dict) -> SizeStats:
    stats = SizeStats.default()
    mean, var = dict(stats.mean), dict(stats.var)
    for name, entry in table.items():
        try:
            cat = Category.parse(name)
        except ValueError:
            raise ConfigError(f"unknown key size_stats.{name}") from None
        if not isinstance(entry, dict):
            raise ConfigError(f"size_stats.{name} must be a table")
        for key, value in entry.items():
            if key not in ("mean", "var"):
                raise ConfigError(f"unknown key size_stats.{name}.{key}")
            arr = np.asarray(value, dtype=float)
            if arr.shape != (3,) or not np.all(np.isfinite(arr)) or np.any(arr <= 0):
                raise ConfigError(f"size_stats.{name}.{key} must be 3 positive numbers")
            (mean if key == "mean" else var)[cat] = arr
    return SizeStats(mean, var)


PIPELINE_SECTIONS = ("fusion", "coupling", "noise", "tracker", "size_stats", "metrics")


def pipeline_config_from_dict(data: dict) -> PipelineConfig:
    for key in data:
        if key not in PIPELINE_SECTIONS:
            raise ConfigError(f"unknown key {key}")
    metrics = data.get("metrics", {})
    for key in metrics:
        if key != "iou_threshold":
            raise ConfigError(f"unknown key metrics.{key}")
    iou = _check_type("metrics.iou_threshold", metrics.get("iou_threshold", 0.5), 0.5)
    if not 0 < iou < 1:
        raise ConfigError("metrics.iou_threshold must lie in (0, 1)")
    tracker = data.get("tracker", {})
    if "confusion" in tracker:
        conf = np.asarray(tracker["confusion"], dtype=float)
        if conf.shape != (3, 3):
            raise ConfigError("tracker.confusion must be a 3x3 matrix")
        tracker = dict(tracker, confusion=tuple(map(tuple, conf)))
    tcfg = build_dataclass(TrackerConfig, {k: v for k, v in tracker.items() if k != "confusion"},
                           "tracker")
    if "confusion" in tracker:
        try:
            tcfg = dataclasses.replace(tcfg, confusion=tracker["confusion"])
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return PipelineConfig(
        fusion=build_dataclass(FusionWeights, data.get("fusion", {}), "fusion"),
        coupling=build_dataclass(CouplingWeights, data.get("coupling", {}), "coupling"),
        noise=build_dataclass(NoiseConfig, data.get("noise", {}), "noise"),
        tracker=tcfg,
        size_stats=_size_stats(data.get("size_stats", {})),
        iou_threshold=iou,
    )


def load_pipeline_config(path=None) -> PipelineConfig:
    """Pipeline configuration from a TOML file; defaults when ``path`` is None."""
    if path is None:
        return PipelineConfig()
    return pipeline_config_from_dict(_load(path))


# -- scenarios ---------------------------------------------------------------

SCENARIO_KEYS = ("duration", "frame_rate", "seed", "camera_height", "appearance_dim",
                 "occlusion", "intrinsics", "ego", "detection_noise", "proposal_noise",
                 "objects")


def _pair(name, value):
    arr = np.asarray(value, dtype=float)
    if arr.shape != (2,) or not np.all(np.isfinite(arr)):
        raise ConfigError(f"{name} must be two finite numbers")
    return tuple(float(v) for v in arr)


def scenario_from_dict(data: dict) -> ScenarioSpec:
    for key in data:
        if key not in SCENARIO_KEYS:
            raise ConfigError(f"unknown key {key}")
    kwargs = {}
    for key, default in (("duration", 100), ("frame_rate", 10.0), ("seed", 0),
                         ("camera_height", 1.65), ("appearance_dim", 16), ("occlusion", False)):
        if key in data:
            kwargs[key] = _check_type(key, data[key], default)
    if "intrinsics" in data:
        base = dataclasses.asdict(KITTI_INTRINSICS)
        kwargs["intrinsics"] = build_dataclass(CameraIntrinsics, {**base, **data["intrinsics"]},
                                               "intrinsics")
    if "ego" in data:
        ego = dict(data["ego"])
        poses = ego.pop("poses", None)
        spec = build_dataclass(EgoSpec, ego, "ego")
        if poses is not None:
            try:
                spec.poses = [EgoPose.from_camera_to_world(np.reshape(p, (3, 4))) for p in poses]
            except ValueError as exc:
                raise ConfigError(f"ego.poses: {exc}") from exc
        kwargs["ego"] = spec
    if "detection_noise" in data:
        dn = dict(data["detection_noise"])
        if "fp_score" in dn:
            dn["fp_score"] = _pair("detection_noise.fp_score", dn["fp_score"])
        fp_score = dn.pop("fp_score", None)
        noise = build_dataclass(DetectionNoise, dn, "detection_noise")
        if fp_score is not None:
            noise.fp_score = fp_score
        kwargs["detection_noise"] = noise
    if "proposal_noise" in data:
        pn = dict(data["proposal_noise"])
        if "z_max" in pn and isinstance(pn["z_max"], str):
            if pn["z_max"].lower() != "inf":
                raise ConfigError("proposal_noise.z_max must be a number or \"inf\"")
            pn["z_max"] = math.inf
        kwargs["proposal_noise"] = build_dataclass(ProposalNoise, pn, "proposal_noise")
    objects = []
    for k, entry in enumerate(data.get("objects", [])):
        section = f"objects[{k}]"
        if not isinstance(entry, dict):
            raise ConfigError(f"{section} must be a table")
        allowed = {"category", "position", "velocity", "profile", "yaw_rate", "size3d",
                   "appearance"}
        for key in entry:
            if key not in allowed:
                raise ConfigError(f"unknown key {section}.{key}")
        try:
            obj = ObjectSpec(
                category=Category.parse(str(entry["category"])),
                position=_pair(f"{section}.position", entry["position"]),
                velocity=_pair(f"{section}.velocity", entry.get("velocity", (0.0, 0.0))),
                profile=entry.get("profile", "constant"),
                yaw_rate=float(entry.get("yaw_rate", 0.0)),
                size3d=tuple(entry["size3d"]) if "size3d" in entry else None,
                appearance=tuple(entry["appearance"]) if "appearance" in entry else None,
            )
        except KeyError as exc:
            raise ConfigError(f"{section}.{exc.args[0]} is required") from None
        except ValueError as exc:
            raise ConfigError(f"{section}: {exc}") from exc
        if obj.size3d is not None and (len(obj.size3d) != 3 or min(obj.size3d) <= 0):
            raise ConfigError(f"{section}.size3d must be 3 positive numbers")
        objects.append(obj)
    kwargs["objects"] = objects
    try:
        return ScenarioSpec(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_scenario(path) -> ScenarioSpec:
    return scenario_from_dict(_load(Path(path)))
