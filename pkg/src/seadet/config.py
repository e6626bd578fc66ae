"""Experiment configuration: schema, defaults, strict YAML loading.

A config is a single YAML file with sections (dataset, detector, training,
dg, eval). Unknown keys are rejected with their dotted path; every run
writes its resolved config beside its outputs so experiments are
self-describing.
"""

from __future__ import annotations

import copy

import yaml

from .datapipe import SceneSpec
from .watermodel import DomainSpec, WaterParams

CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; message carries the dotted field path."""


# 6 source water types + 1 held-out target. The target (id 7) sits outside
# the source convex hull: deep, strongly red-attenuating, dark green water.
DEFAULT_DOMAINS = [
    {"domain_id": 1, "background": [0.05, 0.25, 0.35], "nrer": [0.82, 0.95, 0.97], "depth": 1.5, "gain": [1.0, 1.0, 1.0], "bias": [0.0, 0.0, 0.0]},
    {"domain_id": 2, "background": [0.02, 0.35, 0.30], "nrer": [0.85, 0.97, 0.94], "depth": 2.5, "gain": [1.0, 1.0, 1.0], "bias": [0.0, 0.0, 0.0]},
    {"domain_id": 3, "background": [0.10, 0.30, 0.45], "nrer": [0.88, 0.96, 0.98], "depth": 1.0, "gain": [1.05, 1.0, 0.95], "bias": [0.0, 0.0, 0.0]},
    {"domain_id": 4, "background": [0.05, 0.40, 0.25], "nrer": [0.80, 0.96, 0.92], "depth": 2.0, "gain": [1.0, 1.05, 0.9], "bias": [0.0, 0.02, 0.0]},
    {"domain_id": 5, "background": [0.12, 0.28, 0.30], "nrer": [0.90, 0.97, 0.95], "depth": 0.8, "gain": [0.95, 1.0, 1.05], "bias": [0.02, 0.0, 0.0]},
    {"domain_id": 6, "background": [0.03, 0.22, 0.40], "nrer": [0.84, 0.94, 0.98], "depth": 3.0, "gain": [1.0, 0.95, 1.05], "bias": [0.0, 0.0, 0.02]},
    {"domain_id": 7, "background": [0.01, 0.32, 0.08], "nrer": [0.60, 0.93, 0.80], "depth": 9.0, "gain": [0.85, 1.0, 0.8], "bias": [0.0, 0.04, 0.0]},
]

DEFAULTS: dict = {
    "version": CONFIG_VERSION,
    "dataset": {
        "canvas_size": 64,
        "min_objects": 1,
        "max_objects": 3,
        "min_size": 12,
        "max_size": 24,
        "occlusion_probability": 0.2,
        "contrast_range": [0.7, 1.0],
        "images_per_domain": 200,
        "val_fraction": 0.2,
        "seed": 0,
        "domains": DEFAULT_DOMAINS,
    },
    "detector": {
        "num_classes": 4,
        "fpn_strides": [8, 16],
        "anchor_base_scale": 2.0,
        "fpn_channels": 64,
        "head_depth": 4,
        "gn_groups": 32,
        "focal_alpha": 0.25,
        "focal_gamma": 2.0,
        "prior_pi": 0.01,
        "rpn_regression": "fiou",
        "fiou_eta": 0.5,
        "assign_threshold": 0.5,
        "proposal_nms_threshold": 0.7,
        "max_proposals": 128,
        "roi_batch": 64,
        "roi_positive_fraction": 0.25,
        "score_threshold": 0.05,
        "detection_nms_threshold": 0.5,
        "max_detections": 50,
    },
    "training": {
        "steps": 2000,
        "batch_size": 4,
        "lr": 0.01,
        "momentum": 0.9,
        "weight_decay": 0.0001,
        "grad_clip": 10.0,
        "seed": 0,
        "log_every": 50,
        "checkpoint_every": 500,
    },
    "dg": {
        "br_gamma": 1.0,
        "dmx": False,
        "dmx_alpha": 0.4,
        "dmx_layers": [1, 2, 3],
        "dmx_detach_branch": False,
        "ssmc": False,
        "ssmc_k_fraction": 0.0625,
        "ssmc_delta": 0.001,
        "grl": False,
        "grl_lambda": 1.0,
        "irm": False,
        "irm_lambda": 1.0,
    },
    "eval": {
        "iou_threshold": 0.5,
        "corruptions": ["gaussian_noise", "brightness", "contrast",
                        "defocus_blur", "motion_blur", "pixelate", "jpeg"],
        "corruption_severity": 3,
    },
}

_DOMAIN_KEYS = {"domain_id", "background", "nrer", "depth", "gain", "bias"}


def _merge(defaults: dict, overrides: dict, path: str) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in overrides.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {dotted}")
        if key == "domains":
            out[key] = _validate_domains(value, dotted)
        elif isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{dotted} must be a mapping")
            out[key] = _merge(defaults[key], value, dotted)
        else:
            expected = type(defaults[key])
            if expected in (int, float) and isinstance(value, (int, float)) \
                    and not isinstance(value, bool):
                out[key] = expected(value)
            elif expected is bool and isinstance(value, bool):
                out[key] = value
            elif isinstance(value, bool) and expected is not bool:
                raise ConfigError(
                    f"{dotted}: expected {expected.__name__}, got bool")
            elif isinstance(value, expected):
                out[key] = value
            else:
                raise ConfigError(
                    f"{dotted}: expected {expected.__name__}, "
                    f"got {type(value).__name__}")
    return out


def _validate_domains(value, dotted: str) -> list:
    if not isinstance(value, list) or len(value) != 7:
        raise ConfigError(f"{dotted}: exactly 7 domain specs required")
    out = []
    for i, d in enumerate(value):
        if not isinstance(d, dict):
            raise ConfigError(f"{dotted}[{i}] must be a mapping")
        unknown = set(d) - _DOMAIN_KEYS
        if unknown:
            raise ConfigError(
                f"{dotted}[{i}]: unknown keys {sorted(unknown)}")
        missing = _DOMAIN_KEYS - set(d)
        if missing:
            raise ConfigError(
                f"{dotted}[{i}]: missing keys {sorted(missing)}")
        out.append(copy.deepcopy(d))
    if len({d["domain_id"] for d in out}) != 7:
        raise ConfigError(f"{dotted}: domain ids must be unique")
    return out


def resolve(overrides: dict | None = None) -> dict:
    """Merge user overrides into the defaults, rejecting unknown keys."""
    if overrides is None:
        overrides = {}
    if not isinstance(overrides, dict):
        raise ConfigError("config root must be a mapping")
    return _merge(DEFAULTS, overrides, "")


def load(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = yaml.safe_load(fh) or {}
    return resolve(raw)


def save(path: str, cfg: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg, fh, sort_keys=True)


def apply_dotted_overrides(cfg_raw: dict, pairs: list) -> dict:
    """Apply CLI `section.key=value` overrides onto a raw config mapping."""
    out = copy.deepcopy(cfg_raw)
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must be key=value: {pair}")
        dotted, raw_value = pair.split("=", 1)
        value = yaml.safe_load(raw_value)
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override through scalar at {part}")
        node[parts[-1]] = value
    return out


def scene_spec_from(cfg: dict) -> SceneSpec:
    d = cfg["dataset"]
    return SceneSpec(
        canvas_size=d["canvas_size"],
        min_objects=d["min_objects"],
        max_objects=d["max_objects"],
        min_size=d["min_size"],
        max_size=d["max_size"],
        occlusion_probability=d["occlusion_probability"],
        contrast_range=tuple(d["contrast_range"]),
        seed=d["seed"],
    )


def domain_specs_from(cfg: dict) -> list:
    specs = []
    for d in cfg["dataset"]["domains"]:
        specs.append(DomainSpec(
            domain_id=int(d["domain_id"]),
            water=WaterParams(
                background=tuple(d["background"]),
                nrer=tuple(d["nrer"]),
                depth=float(d["depth"]),
            ),
            gain=tuple(d["gain"]),
            bias=tuple(d["bias"]),
        ))
    return specs
