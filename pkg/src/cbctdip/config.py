"""INI-style run configuration with a strict schema.

One section per module, key = value entries. Unknown sections or keys are
hard errors so hyperparameter typos cannot silently skew an ablation.
Every key has a default; a config file only overrides what it names.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from typing import Any

from .generator import UNet3DConfig, UNETRConfig
from .geometry import ScanGeometry, VolumeGrid, make_circular_geometry
from .optimizer import LossConfig, OptimizerConfig


class ConfigError(ValueError):
    """Unknown key/section or malformed value in a config file."""


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_tuple(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.replace(" ", "").split(",") if p)


# section -> key -> (parser, default)
SCHEMA: dict[str, dict[str, tuple[Any, Any]]] = {
    "geometry": {
        "sod": (float, 150.0),
        "sdd": (float, 300.0),
        "det_rows": (int, 72),
        "det_cols": (int, 72),
        "det_pitch": (float, 1.5),
        "n_views": (int, 180),
        "arc": (float, 360.0),
    },
    "grid": {
        "nx": (int, 48),
        "ny": (int, 48),
        "nz": (int, 48),
        "voxel_size": (float, 1.0),
    },
    "generator": {
        "arch": (str, "unetr"),
        "patch": (int, 8),
        "embed_dim": (int, 96),
        "n_heads": (int, 4),
        "n_blocks": (int, 4),
        "mlp_dim": (int, 192),
        "decoder_channels": (_parse_int_tuple, (32, 16, 8)),
        "in_channels": (int, 16),
        "unet_base_channels": (int, 24),
    },
    "loss": {
        "alpha": (float, 1.0),
        "extractor_seed": (int, 0),
        "extractor_weights": (str, ""),
        "standardize": (_parse_bool, True),
    },
    "optimizer": {
        "lr": (float, 1e-3),
        "decay": (float, 1e-5),
        "n_iters": (int, 2000),
        "backend": (str, "adam"),
        "mode": (str, "reweight"),
        "log_every": (int, 10),
        "grad_clip": (_parse_bool, False),
        "grad_clip_norm": (float, 1.0),
    },
}


@dataclass
class Config:
    values: dict[str, dict[str, Any]] = field(default_factory=dict)

    def __getitem__(self, section: str) -> dict[str, Any]:
        return self.values[section]

    def geometry(self) -> ScanGeometry:
        g = self.values["geometry"]
        return make_circular_geometry(g["sod"], g["sdd"], g["det_rows"],
                                      g["det_cols"], g["det_pitch"],
                                      g["n_views"], g["arc"])

    def grid(self) -> VolumeGrid:
        g = self.values["grid"]
        return VolumeGrid(g["nx"], g["ny"], g["nz"], g["voxel_size"])

    def generator_config(self) -> UNETRConfig | UNet3DConfig:
        g = self.values["generator"]
        if g["arch"] == "unetr":
            return UNETRConfig(patch=g["patch"], embed_dim=g["embed_dim"],
                               n_heads=g["n_heads"], n_blocks=g["n_blocks"],
                               mlp_dim=g["mlp_dim"],
                               decoder_channels=tuple(g["decoder_channels"]),
                               in_channels=g["in_channels"])
        if g["arch"] == "unet3d":
            return UNet3DConfig(patch=g["patch"], in_channels=g["in_channels"],
                                base_channels=g["unet_base_channels"])
        raise ConfigError(f"generator.arch must be unetr or unet3d, got {g['arch']!r}")

    def loss_config(self) -> LossConfig:
        l = self.values["loss"]
        return LossConfig(alpha=l["alpha"], extractor_seed=l["extractor_seed"],
                          extractor_weights=l["extractor_weights"] or None,
                          standardize=l["standardize"])

    def optimizer_config(self, seed: int = 0, **overrides) -> OptimizerConfig:
        o = dict(self.values["optimizer"])
        o.update({k: v for k, v in overrides.items() if v is not None})
        return OptimizerConfig(lr=o["lr"], decay=o["decay"], n_iters=o["n_iters"],
                               backend=o["backend"], mode=o["mode"],
                               log_every=o["log_every"], seed=seed,
                               grad_clip=o["grad_clip"],
                               grad_clip_norm=o["grad_clip_norm"])


def default_config() -> Config:
    return Config({sec: {k: d for k, (_, d) in keys.items()}
                   for sec, keys in SCHEMA.items()})


def load_config(path: str | None) -> Config:
    """Defaults overridden by the file at `path` (if any), strictly checked."""
    cfg = default_config()
    if path is None:
        return cfg
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"cannot parse {path}: {e}") from e
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}] in {path}")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}] of {path}")
            parse, _ = SCHEMA[section][key]
            try:
                cfg.values[section][key] = parse(raw)
            except (TypeError, ValueError) as e:
                raise ConfigError(
                    f"bad value for {section}.{key} = {raw!r} in {path}: {e}"
                ) from e
    return cfg
