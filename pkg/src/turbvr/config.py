"""Flat key-value configuration shared by the config file and CLI flags.

The schema is the single source of truth: every key has a type, a default
and a help string; unknown keys are rejected up front, and the effective
(defaults-applied) mapping is echoed into the run log by the CLI. The
same keys convert into the typed config objects used by the library.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .losses import LossConfig
from .network import ModelConfig
from .synth import TurbulenceParams


class ConfigError(ValueError):
    """Unknown key, bad type or invalid value in a configuration."""


@dataclass(frozen=True)
class ConfigKey:
    name: str
    type: type
    default: Any
    help: str


INT_LIST = "int_list"  # sentinel type tag for comma-separated int lists

SCHEMA: list[ConfigKey] = [
    # architecture
    ConfigKey("channels_per_scale", INT_LIST, [40, 80, 160], "feature widths at scales L1,L2,L3"),
    ConfigKey("attention_heads", int, 4, "attention heads; must divide every width"),
    ConfigKey("ffn_expansion", float, 2.66, "feed-forward hidden expansion factor"),
    ConfigKey("norm_epsilon", float, 1e-5, "layer-norm stabilizer"),
    ConfigKey("num_encoder_blocks_per_scale", int, 2, "transformer blocks per scale"),
    ConfigKey("num_refinement_blocks", int, 2, "refinement blocks before the head"),
    ConfigKey("decoder_warp", bool, True, "align previous-frame features in the decoder"),
    ConfigKey("multiscale_warp", bool, True, "align at all scales (False: coarsest only)"),
    # losses
    ConfigKey("epsilon", float, 1e-3, "Charbonnier stabilizer"),
    ConfigKey("lambda_dwt", float, 0.1, "wavelet loss weight"),
    ConfigKey("lambda_flow_max", float, 0.2, "temporal-consistency weight after ramp"),
    ConfigKey("lambda_det_max", float, 0.05, "detection loss weight after ramp"),
    ConfigKey("ramp_epochs", int, 50, "epochs to ramp temporal/detection weights"),
    ConfigKey("wavelet_family", str, "haar", "wavelet family for the sub-band loss"),
    ConfigKey("wavelet_levels", int, 1, "wavelet decomposition depth"),
    ConfigKey("history_k", int, 4, "past outputs kept for the temporal loss"),
    ConfigKey("wavelet", bool, True, "enable the wavelet loss term"),
    ConfigKey("detection", bool, True, "enable the detection loss term"),
    ConfigKey("flow", bool, True, "enable the temporal-consistency loss term"),
    # training
    ConfigKey("epochs", int, 100, "training epochs"),
    ConfigKey("batch_size", int, 1, "clips per optimizer step (gradient accumulation)"),
    ConfigKey("patch_size", int, 256, "training crop size; divisible by 4"),
    ConfigKey("lr_initial", float, 1e-4, "initial Adam learning rate"),
    ConfigKey("lr_step_epochs", int, 5, "epochs between learning-rate halvings"),
    ConfigKey("lr_gamma", float, 0.5, "learning-rate decay factor"),
    ConfigKey("seed", int, 0, "global RNG seed"),
    ConfigKey("clip_length", int, 12, "frames per training clip"),
    ConfigKey("bptt_window", int, 1, "steps of backpropagation through the recurrence"),
    ConfigKey("grad_clip", float, 1.0, "global gradient-norm clip (0 disables)"),
    ConfigKey("recurrent", bool, True, "feed previous output (False: previous degraded frame)"),
    ConfigKey("detector", str, "blob", "detector registry name or module:attr path"),
    # synthetic degradation
    ConfigKey("tilt_strength", float, 1.5, "per-frame RMS tilt displacement, px"),
    ConfigKey("spatial_corr", float, 12.0, "tilt-field smoothing sigma, px"),
    ConfigKey("temporal_corr", float, 0.85, "AR(1) coefficient of the tilt process"),
    ConfigKey("blur_sigma_min", float, 0.5, "minimum per-frame blur sigma, px"),
    ConfigKey("blur_sigma_max", float, 1.2, "maximum per-frame blur sigma, px"),
]

SCHEMA_BY_NAME = {key.name: key for key in SCHEMA}


def defaults() -> dict[str, Any]:
    return {key.name: key.default for key in SCHEMA}


def _coerce(key: ConfigKey, value: Any) -> Any:
    if key.type is INT_LIST:
        if isinstance(value, str):
            value = [part.strip() for part in value.split(",") if part.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"key {key.name!r} expects a list of ints, got {value!r}")
        try:
            return [int(v) for v in value]
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"key {key.name!r} expects a list of ints: {exc}") from exc
    if key.type is bool:
        if isinstance(value, bool):
            return value
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ("true", "yes", "1", "on"):
                return True
            if lowered in ("false", "no", "0", "off"):
                return False
        raise ConfigError(f"key {key.name!r} expects a boolean, got {value!r}")
    if key.type is int:
        if isinstance(value, bool) or (not isinstance(value, int) and not _intlike(value)):
            raise ConfigError(f"key {key.name!r} expects an integer, got {value!r}")
        return int(value)
    if key.type is float:
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"key {key.name!r} expects a number, got {value!r}") from exc
    if key.type is str:
        if not isinstance(value, str):
            raise ConfigError(f"key {key.name!r} expects a string, got {value!r}")
        return value
    raise ConfigError(f"unhandled schema type for key {key.name!r}")


def _intlike(value: Any) -> bool:
    if isinstance(value, str):
        try:
            int(value)
            return True
        except ValueError:
            return False
    return isinstance(value, float) and value.is_integer()


def validate(values: dict[str, Any]) -> dict[str, Any]:
    """Coerce and fill defaults; unknown keys raise with the key named."""
    for name in values:
        if name not in SCHEMA_BY_NAME:
            raise ConfigError(f"unknown config key {name!r}")
    effective = defaults()
    for name, value in values.items():
        effective[name] = _coerce(SCHEMA_BY_NAME[name], value)
    return effective


def load_config_file(path: str | Path) -> dict[str, Any]:
    """Parse a flat YAML/key-value config file (no validation here)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config file {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must be a flat key-value mapping")
    for name, value in data.items():
        if isinstance(value, dict):
            raise ConfigError(f"config file must be flat; key {name!r} holds a nested mapping")
    return data


def config_hash(effective: dict[str, Any]) -> str:
    text = json.dumps(effective, sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def model_config_from(effective: dict[str, Any]) -> ModelConfig:
    try:
        return ModelConfig(
            channels_per_scale=list(effective["channels_per_scale"]),
            attention_heads=effective["attention_heads"],
            ffn_expansion=effective["ffn_expansion"],
            norm_epsilon=effective["norm_epsilon"],
            num_encoder_blocks_per_scale=effective["num_encoder_blocks_per_scale"],
            num_refinement_blocks=effective["num_refinement_blocks"],
            decoder_warp=effective["decoder_warp"],
            multiscale_warp=effective["multiscale_warp"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def loss_config_from(effective: dict[str, Any]) -> LossConfig:
    try:
        return LossConfig(
            epsilon=effective["epsilon"],
            lambda_dwt=effective["lambda_dwt"],
            lambda_flow_max=effective["lambda_flow_max"],
            lambda_det_max=effective["lambda_det_max"],
            ramp_epochs=effective["ramp_epochs"],
            wavelet_family=effective["wavelet_family"],
            wavelet_levels=effective["wavelet_levels"],
            history_k=effective["history_k"],
            wavelet=effective["wavelet"],
            detection=effective["detection"],
            flow=effective["flow"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def turbulence_params_from(effective: dict[str, Any], seed: int | None = None) -> TurbulenceParams:
    try:
        return TurbulenceParams(
            tilt_strength=effective["tilt_strength"],
            spatial_corr=effective["spatial_corr"],
            temporal_corr=effective["temporal_corr"],
            blur_sigma_range=(effective["blur_sigma_min"], effective["blur_sigma_max"]),
            seed=effective["seed"] if seed is None else seed,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
