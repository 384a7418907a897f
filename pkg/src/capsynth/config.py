"""Pipeline configuration: one YAML document with a section per stage.

Values resolve as command-line override > file > built-in default.
"""

from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .sim import DEFAULT_TUBES
from .synthesis import AugmentConfig, SynthConfig
from .viewplan import ViewPlanConfig

OUTPUT_ENV = "CAPSYNTH_OUTPUT"

DEFAULTS = {
    "seed": 0,
    "output_root": None,
    "scene": None,
    "viewplan": {
        "theta_max": 30.0,
        "omega": 60.0,
        "icosphere_level": 4,
        "workspace_min": [-0.1, -0.1, 0.25],
        "workspace_max": [0.1, 0.1, 0.25],
        "granularity": 0.1,
        "surface_normal": [0.0, 0.0, 1.0],
        "workers": 1,
    },
    "capture": {
        "tubes": [t.name for t in DEFAULT_TUBES],
        "observations_per_tube": 400,
        "mask_views": 16,
        "mask_position": [0.0, 0.0, 0.3],
        "racks": 15,
        "dropout": 0.0,
    },
    "segment": {
        "trim_fraction": 0.01,
        # per face (-x, +x, -y, +y, -z, +z); nothing toward the fingers
        "manual_offset": [0.0005, 0.0005, 0.0005, 0.0005, 0.0, 0.0005],
        "max_radius": 0.05,
        "finger_top_height": None,
        "table_height": 0.0,
        "rack_band": 0.12,
        "min_cap_pixels": 20,
    },
    "augment": {
        "scale_range": [0.9, 1.1],
        "scale_p": 0.5,
        "blur_kernel": 3,
        "blur_p": 0.5,
        "brightness_range": [0.9, 1.1],
        "brightness_p": 0.5,
        "contrast_range": [0.9, 1.1],
        "contrast_p": 0.5,
    },
    "synth": {
        "count": 1600,
        "T": 30,
        "t_per_class": {0: 0.4},
        "t_default": 0.15,
        "max_attempts_per_paste": 100,
        "background_swap_p": 0.5,
        "canvas": [1376, 1376],
        "backgrounds": None,
        "procedural_backgrounds": 8,
        "workers": 1,
    },
    "split": {"ratio": [4, 1]},
    "eval": {"iou_threshold": 0.5, "detections": None, "ground_truth": None},
}


class ConfigError(Exception):
    pass


def deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply ``section.key=value``; the value is parsed as YAML."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} is not key=value")
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {assignment!r}: {p} is not a section")
    node[parts[-1]] = yaml.safe_load(raw)


def load_config(path, overrides=()) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    cfg = deep_merge(DEFAULTS, doc)
    for o in overrides:
        apply_override(cfg, o)
    if cfg.get("scene"):
        scene = Path(cfg["scene"])
        if not scene.is_absolute():
            cfg["scene"] = str((path.parent / scene).resolve())
    for section, key in (("synth", "backgrounds"), ("eval", "detections"), ("eval", "ground_truth")):
        val = cfg[section].get(key)
        if val and not Path(val).is_absolute():
            cfg[section][key] = str((path.parent / val).resolve())
    if cfg.get("seed") is None:
        raise ConfigError("config needs a master seed")
    return cfg


def output_root(cfg: dict) -> Path:
    return Path(cfg.get("output_root") or os.environ.get(OUTPUT_ENV) or "runs")


def viewplan_config(cfg: dict) -> ViewPlanConfig:
    v = cfg["viewplan"]
    return ViewPlanConfig(
        theta_max=float(v["theta_max"]),
        omega=float(v["omega"]),
        icosphere_level=int(v["icosphere_level"]),
        workspace_min=tuple(v["workspace_min"]),
        workspace_max=tuple(v["workspace_max"]),
        granularity=float(v["granularity"]),
        surface_normal=tuple(v["surface_normal"]),
    )


def augment_config(cfg: dict) -> AugmentConfig:
    a = cfg["augment"]
    return AugmentConfig(
        scale_range=tuple(a["scale_range"]),
        scale_p=float(a["scale_p"]),
        blur_kernel=int(a["blur_kernel"]),
        blur_p=float(a["blur_p"]),
        brightness_range=tuple(a["brightness_range"]),
        brightness_p=float(a["brightness_p"]),
        contrast_range=tuple(a["contrast_range"]),
        contrast_p=float(a["contrast_p"]),
    )


def synth_config(cfg: dict) -> SynthConfig:
    s = cfg["synth"]
    return SynthConfig(
        T=int(s["T"]),
        t_per_class={int(k): float(v) for k, v in (s["t_per_class"] or {}).items()},
        t_default=float(s["t_default"]),
        max_attempts_per_paste=int(s["max_attempts_per_paste"]),
        background_swap_p=float(s["background_swap_p"]),
        canvas=tuple(int(v) for v in s["canvas"]),
    )


def dump_config(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
