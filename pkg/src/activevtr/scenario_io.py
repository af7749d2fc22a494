"""Scenario file loading.

A scenario file is a YAML mapping with the world layout (walls, taught_path,
rng_seed, texture_density, ...) plus optional planner / observation /
controller / kinematics / mapping / repeat blocks that fill a SimConfig.
Angles in files are degrees (key names say so); the dataclasses underneath
use radians.  Bad files raise ConfigError carrying the file and the dotted
key path so the CLI can print a usable diagnostic and exit with code 2.
"""

from __future__ import annotations

import importlib.resources
import math
import os
from typing import Optional, Tuple

import yaml

from .geometry import DEFAULT_PTU
from .observation import ObservationConfig
from .planners import PLANNERS, PanTiltGrid
from .vtr import (
    ControllerGains,
    KinematicsConfig,
    MappingConfig,
    RepeatConfig,
    SimConfig,
)
from .world import InvalidScenarioError, Scenario, Wall

__all__ = ["ConfigError", "load_scenario", "preset_names", "preset_text"]


class ConfigError(Exception):
    """A scenario file that does not parse or does not validate."""

    def __init__(self, message: str, source: str = "", key: str = ""):
        self.source = source
        self.key = key
        prefix = source
        if key:
            prefix = f"{prefix}: {key}" if prefix else key
        super().__init__(f"{prefix}: {message}" if prefix else message)


_SCENARIO_KEYS = {
    "name", "walls", "taught_path", "rng_seed", "sim_rate_hz",
    "plan_every_steps", "texture_density", "sampling_mode", "camera_height",
    "planner", "observation", "controller", "kinematics", "mapping", "repeat",
}
_WALL_KEYS = {"a", "b", "density", "height"}
_PLANNER_KEYS = {"kind", "pan_min_deg", "pan_max_deg", "tilt_min_deg",
                 "tilt_max_deg", "step_deg", "d_cap", "slew_rate_deg_s",
                 "workers"}
_OBSERVATION_KEYS = {"theta_track", "theta_reloc", "pixel_noise_sigma",
                     "identifiability_mode", "alpha2_max_deg",
                     "detection_range"}
_CONTROLLER_KEYS = {"kp_lin", "kd_lin", "kp_head", "kd_head", "kp_lat"}
_KINEMATICS_KEYS = {"v_max", "omega_max", "v_teach"}
_MAPPING_KEYS = {"keyframe_trans", "keyframe_rot_deg", "tracked_frac",
                 "d_range_ratio"}
_REPEAT_KEYS = {"start_offset_lat", "start_offset_heading_deg",
                "lost_timeout_steps", "deviation_limit"}


def preset_names() -> Tuple[str, ...]:
    root = importlib.resources.files("activevtr") / "scenarios"
    return tuple(sorted(p.name[:-5] for p in root.iterdir()
                        if p.name.endswith(".yaml")))


def preset_text(name: str) -> str:
    res = importlib.resources.files("activevtr") / "scenarios" / f"{name}.yaml"
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; "
                          f"available: {', '.join(preset_names())}",
                          source=name)
    return res.read_text()


def _check_keys(mapping: dict, allowed: set, source: str, ctx: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(
            f"unknown key(s) {', '.join(map(repr, unknown))}; "
            f"allowed: {', '.join(sorted(allowed))}",
            source=source, key=ctx)


def _section(doc: dict, key: str, source: str) -> dict:
    block = doc.get(key, {})
    if block is None:
        return {}
    if not isinstance(block, dict):
        raise ConfigError("expected a mapping", source=source, key=key)
    return block


def _number(block: dict, key: str, source: str, ctx: str, default=None):
    if key not in block:
        return default
    val = block[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"expected a number, got {val!r}",
                          source=source, key=f"{ctx}.{key}" if ctx else key)
    return val


def _walls(doc: dict, source: str):
    raw = doc.get("walls")
    if not isinstance(raw, list) or not raw:
        raise ConfigError("required key must be a non-empty list",
                          source=source, key="walls")
    walls = []
    for i, entry in enumerate(raw):
        ctx = f"walls[{i}]"
        if not isinstance(entry, dict):
            raise ConfigError("each wall is a mapping with keys a, b"
                              " and optional density, height",
                              source=source, key=ctx)
        _check_keys(entry, _WALL_KEYS, source, ctx)
        ends = {}
        for end in ("a", "b"):
            pt = entry.get(end)
            if (not isinstance(pt, list) or len(pt) != 2
                    or not all(isinstance(c, (int, float))
                               and not isinstance(c, bool) for c in pt)):
                raise ConfigError("endpoint must be [x, y]",
                                  source=source, key=f"{ctx}.{end}")
            ends[end] = (float(pt[0]), float(pt[1]))
        kw = {}
        density = _number(entry, "density", source, ctx)
        if density is not None:
            kw["density"] = float(density)
        height = _number(entry, "height", source, ctx)
        if height is not None:
            kw["height"] = float(height)
        try:
            walls.append(Wall(ends["a"], ends["b"], **kw))
        except (ValueError, InvalidScenarioError) as exc:
            raise ConfigError(str(exc), source=source, key=ctx) from exc
    return walls


def _taught_path(doc: dict, source: str):
    raw = doc.get("taught_path")
    if not isinstance(raw, list) or len(raw) < 2:
        raise ConfigError("required key must be a list of at least two"
                          " [x, y, heading_deg] rows",
                          source=source, key="taught_path")
    path = []
    for i, row in enumerate(raw):
        if (not isinstance(row, list) or len(row) != 3
                or not all(isinstance(c, (int, float))
                           and not isinstance(c, bool) for c in row)):
            raise ConfigError("row must be [x, y, heading_deg]",
                              source=source, key=f"taught_path[{i}]")
        path.append((float(row[0]), float(row[1]),
                     math.radians(float(row[2]))))
    return path


def _grid_from(block: dict, source: str) -> PanTiltGrid:
    defaults = PanTiltGrid()

    def deg(key, fallback):
        val = _number(block, key, source, "planner")
        return math.radians(val) if val is not None else fallback

    try:
        return PanTiltGrid(
            pan_min=deg("pan_min_deg", defaults.pan_min),
            pan_max=deg("pan_max_deg", defaults.pan_max),
            tilt_min=deg("tilt_min_deg", defaults.tilt_min),
            tilt_max=deg("tilt_max_deg", defaults.tilt_max),
            step=deg("step_deg", defaults.step))
    except ValueError as exc:
        raise ConfigError(str(exc), source=source, key="planner") from exc


def load_scenario(path_or_preset: str, *, planner: Optional[str] = None,
                  fidelity: str = "ideal", seed: int = 0,
                  workers: int = 1) -> Tuple[Scenario, SimConfig]:
    """Parse a scenario file (or a shipped preset name) into the world
    description and the run configuration.

    planner/fidelity/seed/workers are run choices, not scenario properties,
    so they come from the caller; a planner block in the file supplies the
    default planner kind and grid.
    """
    if os.path.exists(path_or_preset):
        source = path_or_preset
        with open(path_or_preset) as fh:
            text = fh.read()
    else:
        source = path_or_preset
        text = preset_text(path_or_preset)

    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"invalid YAML: {exc}", source=where) from exc
    if not isinstance(doc, dict):
        raise ConfigError("scenario file must be a YAML mapping",
                          source=source)
    _check_keys(doc, _SCENARIO_KEYS, source, "")

    for req in ("walls", "taught_path", "rng_seed"):
        if req not in doc:
            raise ConfigError("required key missing", source=source, key=req)
    rng_seed = doc["rng_seed"]
    if isinstance(rng_seed, bool) or not isinstance(rng_seed, int):
        raise ConfigError(f"expected an integer, got {rng_seed!r}",
                          source=source, key="rng_seed")

    name = doc.get("name", os.path.splitext(os.path.basename(source))[0])
    scn_kwargs = dict(
        name=str(name),
        walls=_walls(doc, source),
        taught_path=_taught_path(doc, source),
        rng_seed=rng_seed,
    )
    for key in ("sim_rate_hz", "plan_every_steps", "texture_density",
                "camera_height"):
        val = _number(doc, key, source, "")
        if val is not None:
            scn_kwargs[key] = val
    if "sampling_mode" in doc:
        scn_kwargs["sampling_mode"] = doc["sampling_mode"]
    try:
        scenario = Scenario(**scn_kwargs)
    except InvalidScenarioError as exc:
        raise ConfigError(str(exc), source=source) from exc

    planner_block = _section(doc, "planner", source)
    _check_keys(planner_block, _PLANNER_KEYS, source, "planner")
    kind = planner if planner is not None else planner_block.get("kind", "flaf")
    if kind not in PLANNERS:
        raise ConfigError(f"unknown planner {kind!r}; "
                          f"expected one of {sorted(PLANNERS)}",
                          source=source, key="planner.kind")
    grid = _grid_from(planner_block, source)
    d_cap = float(_number(planner_block, "d_cap", source, "planner",
                          default=10.0))
    slew_deg = _number(planner_block, "slew_rate_deg_s", source, "planner")
    slew_rate = math.radians(slew_deg) if slew_deg is not None else None
    file_workers = _number(planner_block, "workers", source, "planner")
    if file_workers is not None:
        workers = int(file_workers)

    obs_block = _section(doc, "observation", source)
    _check_keys(obs_block, _OBSERVATION_KEYS, source, "observation")
    obs_kwargs = {}
    for key in ("theta_track", "theta_reloc"):
        val = _number(obs_block, key, source, "observation")
        if val is not None:
            obs_kwargs[key] = int(val)
    val = _number(obs_block, "pixel_noise_sigma", source, "observation")
    if val is not None:
        obs_kwargs["pixel_noise_sigma"] = float(val)
    val = _number(obs_block, "alpha2_max_deg", source, "observation")
    if val is not None:
        obs_kwargs["alpha2_max"] = math.radians(float(val))
    val = _number(obs_block, "detection_range", source, "observation")
    if val is not None:
        obs_kwargs["detection_range"] = float(val)
    if "identifiability_mode" in obs_block:
        obs_kwargs["identifiability_mode"] = obs_block["identifiability_mode"]
    try:
        observation = ObservationConfig(**obs_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc), source=source, key="observation") from exc

    ctrl_block = _section(doc, "controller", source)
    _check_keys(ctrl_block, _CONTROLLER_KEYS, source, "controller")
    try:
        gains = ControllerGains(**{
            k: float(_number(ctrl_block, k, source, "controller",
                             default=getattr(ControllerGains, k)))
            for k in _CONTROLLER_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc), source=source, key="controller") from exc

    kin_block = _section(doc, "kinematics", source)
    _check_keys(kin_block, _KINEMATICS_KEYS, source, "kinematics")
    kinematics = KinematicsConfig(**{
        k: float(_number(kin_block, k, source, "kinematics",
                         default=getattr(KinematicsConfig, k)))
        for k in _KINEMATICS_KEYS})

    map_block = _section(doc, "mapping", source)
    _check_keys(map_block, _MAPPING_KEYS, source, "mapping")
    map_kwargs = {}
    for key in ("keyframe_trans", "tracked_frac", "d_range_ratio"):
        val = _number(map_block, key, source, "mapping")
        if val is not None:
            map_kwargs[key] = float(val)
    val = _number(map_block, "keyframe_rot_deg", source, "mapping")
    if val is not None:
        map_kwargs["keyframe_rot"] = math.radians(float(val))
    mapping = MappingConfig(**map_kwargs)

    rep_block = _section(doc, "repeat", source)
    _check_keys(rep_block, _REPEAT_KEYS, source, "repeat")
    rep_kwargs = {}
    for key in ("start_offset_lat", "deviation_limit"):
        val = _number(rep_block, key, source, "repeat")
        if val is not None:
            rep_kwargs[key] = float(val)
    val = _number(rep_block, "start_offset_heading_deg", source, "repeat")
    if val is not None:
        rep_kwargs["start_offset_heading"] = math.radians(float(val))
    val = _number(rep_block, "lost_timeout_steps", source, "repeat")
    if val is not None:
        rep_kwargs["lost_timeout_steps"] = int(val)
    repeat_cfg = RepeatConfig(**rep_kwargs)

    try:
        cfg = SimConfig(planner=kind, observation=observation,
                        mapping=mapping, gains=gains, kinematics=kinematics,
                        repeat=repeat_cfg, grid=grid, ptu=DEFAULT_PTU,
                        d_cap=d_cap, slew_rate=slew_rate, workers=workers,
                        fidelity=fidelity, seed=seed)
    except ValueError as exc:
        raise ConfigError(str(exc), source=source) from exc
    return scenario, cfg
