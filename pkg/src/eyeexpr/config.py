"""Canonical run configuration: one JSON document, every field flag-overridable.

Unknown keys are rejected; the effective post-override config is echoed into
every output directory as config.resolved.json.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .errors import ConfigError, InputError
from .labels import get_label_set
from .preprocess import AugmentConfig
from .synthgen import GenConfig
from .training import TrainConfig

DEFAULTS = {
    "seed": 0,
    "gen": {
        "participants": 23,
        "sessions": 2,
        "frames_per_expression": 100,
        "frame_rate": 10.0,
        "hmd": 1,
        "eye_size": None,  # [H, W] per eye; None uses the HMD default
        "label_set": "au10",
        "skip_fraction": 0.15,
        "blink_rate": 0.0,
        "appearance_field_scale": 1.0,
    },
    "train": {
        "lr": 0.045,
        "lr_decay": 0.94,
        "l2": 0.0004,
        "batch": 32,
        "epochs": 30,
        "personalize": "off",
        "input_size": [64, 128],
        "frame_rate": 10.0,
        "blink_threshold": None,
    },
    "augment": {
        "rotation_deg": 3.6,
        "scale": 0.02,
        "brightness": 0.02,
        "enabled": True,
    },
    "eval": {
        "k": 5,
        "seeds": 1,
        "aggregate": "triplet",
    },
    "stream": {
        "alpha": 0.3,
    },
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge_checked(base: dict, override: dict, path: str = "") -> None:
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and not isinstance(value, dict) and value is not None:
            raise ConfigError(f"config key {where!r} must be a section")
        if isinstance(base[key], dict) and isinstance(value, dict):
            _merge_checked(base[key], value, where)
        else:
            base[key] = value


def load_config_file(path) -> dict:
    cfg = default_config()
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config root must be an object")
    _merge_checked(cfg, data)
    return cfg


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    """Apply {'section.key': value} flag overrides in place; None values skipped."""
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = cfg
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {dotted!r}")
        node[parts[-1]] = value
    return cfg


def canonical_json(cfg: dict) -> str:
    return json.dumps(cfg, sort_keys=True, indent=2) + "\n"


def write_resolved(cfg: dict, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    path.write_text(canonical_json(cfg), encoding="utf-8")
    return path


def parse_size(text: str) -> tuple[int, int]:
    """'64x128' -> (64, 128)."""
    try:
        h, w = text.lower().split("x")
        return (int(h), int(w))
    except ValueError:
        raise InputError(f"expected HxW, got {text!r}") from None


def gen_config(cfg: dict) -> GenConfig:
    g = cfg["gen"]
    eye = tuple(g["eye_size"]) if g["eye_size"] is not None else None
    return GenConfig(
        num_participants=g["participants"],
        sessions_per_participant=g["sessions"],
        frames_per_expression=g["frames_per_expression"],
        frame_rate=g["frame_rate"],
        hmd_id=g["hmd"],
        eye_size=eye,
        label_set=get_label_set(g["label_set"]),
        global_seed=cfg["seed"],
        skip_fraction=g["skip_fraction"],
        blink_rate=g["blink_rate"],
        appearance_field_scale=g["appearance_field_scale"],
    )


def augment_config(cfg: dict) -> AugmentConfig:
    a = cfg["augment"]
    return AugmentConfig(
        rotation_bound_deg=a["rotation_deg"],
        scale_bound=a["scale"],
        brightness_bound=a["brightness"],
    )


def train_config(cfg: dict, personalization: bool | None = None) -> TrainConfig:
    t = cfg["train"]
    if personalization is None:
        if t["personalize"] not in ("on", "off"):
            raise ConfigError("train.personalize must be 'on' or 'off' here; "
                              "'both' is only valid for crossval")
        personalization = t["personalize"] == "on"
    return TrainConfig(
        initial_lr=t["lr"],
        lr_decay_per_epoch=t["lr_decay"],
        l2_lambda=t["l2"],
        batch_size=t["batch"],
        epochs=t["epochs"],
        seed=cfg["seed"],
        personalization=personalization,
        label_set=get_label_set(cfg["gen"]["label_set"]),
        input_size=tuple(t["input_size"]),
        frame_rate=t["frame_rate"],
        augment=augment_config(cfg),
        augment_enabled=cfg["augment"]["enabled"],
    )
