"""Flat `key = value` run configuration.

Comments start with `#`, lists are comma-separated, booleans accept
on/off/true/false.  Unknown keys are errors, not warnings, so typos cannot
silently fall back to defaults.
"""

from __future__ import annotations

import os

from .errors import ConfigError
from .optics import OpticalConfig, SensorRegion

__all__ = ["DEFAULTS", "parse_config", "load_config", "optical_from_config",
           "format_config"]


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("on", "true", "1", "yes"):
        return True
    if t in ("off", "false", "0", "no"):
        return False
    raise ConfigError(f"expected on/off boolean, got {text!r}")


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


# key -> (parser, default)
DEFAULTS: dict[str, tuple] = {
    # optics geometry
    "grid_n": (int, 256),
    "pitch_m": (float, 8e-6),
    "wavelengths_nm": (_float_list, [532.0]),
    "d1_m": (float, 4e-2),
    "d2_m": (float, 4e-2),
    "d3_m": (float, 4e-2),
    "sensor_n": (int, 64),
    "band_limit": (_bool, True),
    "seed_replication": (int, 0),  # 0 = auto
    # model
    "noise_dim": (int, 100),
    "embed_dim": (int, 16),
    "hidden1": (int, 400),
    "hidden2": (int, 400),
    "seed_n": (int, 64),
    "decoder_layers": (int, 1),
    "timestep_embed": (int, 32),
    "encoder_free": (_bool, False),
    "eta_target": (float, 0.0),
    "eta_weight": (float, 0.0),
    "phase_bits": (int, 0),
    "class_count": (int, 10),
    "image_n": (int, 28),
    # training
    "batch_size": (int, 32),
    "epochs": (int, 4),
    "steps": (int, 0),  # 0 = epochs * dataset size
    "lr": (float, 1e-3),
    "weight_decay": (float, 1e-4),
    "warmup_steps": (int, 200),
    "misalign_sigma": (float, 0.0),
    "rng_seed": (int, 0),
    "precision": (str, "f64"),
    "checkpoint_every": (int, 1),
    # diffusion
    "timesteps": (int, 1000),
    "beta_start": (float, 1e-4),
    "beta_end": (float, 0.02),
    "pair_noise": (str, "projected"),
    "sample_ladder": (_int_list, [1000, 800, 600, 400, 200, 100, 50, 20, 1]),
    "teacher_hidden": (int, 512),
    "teacher_layers": (int, 3),
    "teacher_epochs": (int, 30),
    # baseline
    "baseline_layers": (int, 9),
    "baseline_hidden": (int, 900),
    # data / eval
    "data_dir": (str, ""),
    "pair_count": (int, 20000),
    "eval_batch": (int, 1000),
    "eval_repeats": (int, 10),
    "eval_seed_range": (int, 10000),
}

_VALID_PRECISIONS = ("f32", "f64")
_VALID_PAIR_NOISE = ("projected", "fresh")


def parse_config(text: str, origin: str = "<config>") -> dict:
    """Parse overrides from config text onto the defaults."""
    values = {k: default for k, (_, default) in DEFAULTS.items()}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        parser, _ = DEFAULTS[key]
        try:
            values[key] = parser(val.strip())
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"{origin}:{lineno}: bad value for {key!r}: {exc}") from exc
    if values["precision"] not in _VALID_PRECISIONS:
        raise ConfigError(f"precision must be one of {_VALID_PRECISIONS}")
    if values["pair_noise"] not in _VALID_PAIR_NOISE:
        raise ConfigError(f"pair_noise must be one of {_VALID_PAIR_NOISE}")
    return values


def load_config(path: str | None) -> dict:
    if path is None:
        return parse_config("")
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as f:
        return parse_config(f.read(), origin=path)


def optical_from_config(cfg: dict) -> OpticalConfig:
    return OpticalConfig(
        grid_n=cfg["grid_n"],
        pitch=cfg["pitch_m"],
        wavelengths=tuple(w * 1e-9 for w in cfg["wavelengths_nm"]),
        d_seed_to_decoder=cfg["d1_m"],
        d_between_decoders=cfg["d2_m"],
        d_decoder_to_sensor=cfg["d3_m"],
        sensor_region=SensorRegion.centered(cfg["grid_n"], cfg["sensor_n"]),
        band_limit=cfg["band_limit"],
    )


def format_config(cfg: dict) -> str:
    """Serialize a resolved config back to the flat text form."""
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if isinstance(v, bool):
            v = "on" if v else "off"
        elif isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"
