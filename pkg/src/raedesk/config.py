"""Flat dotted-key configuration with canonical serialization and hashing.

Format: one `key = value` per line, UTF-8, keys sorted lexicographically.
The config hash is the sha256 of the canonical serialization, so it
changes iff a semantic field changes.
"""

from __future__ import annotations

import hashlib
from pathlib import Path

_DEFAULTS: dict[str, object] = {
    "seed": 0,
    "schedule.base_dim": 4096,
    "schedule.shift_enabled": True,
    "schedule.steps": 50,
    "denoiser.hidden": 96,
    "denoiser.depth": 2,
    "denoiser.heads": 4,
    "denoiser.ddt_head_width": 0,       # 0 = no head
    "denoiser.ddt_head_depth": 2,
    "denoiser.cond_dim": 32,
    "latent.num_tokens": 8,
    "latent.token_dim": 16,
    "optim.lr": 1e-3,
    "optim.beta1": 0.9,
    "optim.beta2": 0.95,
    "optim.weight_decay": 0.0,
    "optim.warmup_ratio": 0.0134,
    "optim.cosine_decay": True,
    "optim.ema_decay": 0.99,    # 0 = evaluate raw weights
    "train.batch_size": 64,
    "train.steps": 3000,
    "train.eval_interval": 500,
    "train.eval_samples": 2048,
    "data.num_conditions": 4,
    "data.components": 2,
    "data.std": 0.3,
    "data.prior_seed": 7001,
    "data.mix.smooth": 1 / 3,
    "data.mix.texture": 1 / 3,
    "data.mix.glyph": 1 / 3,
    "decoder.hidden": 128,
    "decoder.depth": 1,
    "decoder.lr": 5e-4,
    "decoder.batch_size": 32,
    "decoder.adv_start_epoch": 0,
    "noise_aug.tau": 0.2,
    "noise_aug.enabled": True,
    "loss.omega_l": 1.0,
    "loss.omega_g": 100.0,
    "loss.omega_a": 10.0,
    "rae.patch": 8,
    "rae.token_dim": 64,
    "rae.encoder_seed": 4242,
}


class ExperimentConfig:
    """Validated flat key/value config; unknown keys are rejected."""

    def __init__(self, overrides: dict[str, object] | None = None):
        self._values = dict(_DEFAULTS)
        if overrides:
            for k, v in overrides.items():
                if k not in self._values:
                    raise KeyError(f"unknown config key: {k}")
                self._values[k] = _coerce(self._values[k], v, k)
        self.validate()

    def __getitem__(self, key: str):
        return self._values[key]

    def with_overrides(self, **kw) -> "ExperimentConfig":
        merged = dict(self._values)
        merged.update({k.replace("__", "."): v for k, v in kw.items()})
        return ExperimentConfig(merged)

    def validate(self):
        v = self._values
        if v["schedule.base_dim"] <= 0:
            raise ValueError("config error at schedule.base_dim: must be positive")
        if v["schedule.steps"] < 1:
            raise ValueError("config error at schedule.steps: must be >= 1")
        if v["denoiser.hidden"] % v["denoiser.heads"] != 0:
            raise ValueError("config error at denoiser.hidden: not divisible by heads")
        if not 0.0 <= v["optim.ema_decay"] < 1.0:
            raise ValueError("config error at optim.ema_decay: must be in [0, 1)")
        if v["noise_aug.tau"] < 0:
            raise ValueError("config error at noise_aug.tau: must be >= 0")
        for key in ("loss.omega_l", "loss.omega_g", "loss.omega_a"):
            if v[key] < 0:
                raise ValueError(f"config error at {key}: must be >= 0")
        mix = [v["data.mix.smooth"], v["data.mix.texture"], v["data.mix.glyph"]]
        if any(m < 0 for m in mix):
            raise ValueError("config error at data.mix: ratios must be >= 0")

    # ------------------------------------------------------------------

    def canonical(self) -> str:
        lines = []
        for key in sorted(self._values):
            lines.append(f"{key} = {_format_value(self._values[key])}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()[:16]

    def save(self, path):
        Path(path).write_text(self.canonical(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        overrides = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            key, _, raw = line.partition("=")
            overrides[key.strip()] = raw.strip()
        return cls(overrides)


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(default, value, key: str):
    if isinstance(value, str):
        if isinstance(default, bool):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"config error at {key}: bad bool {value!r}")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return value
    if isinstance(default, bool) and not isinstance(value, bool):
        raise ValueError(f"config error at {key}: expected bool")
    if isinstance(default, float) and isinstance(value, int):
        return float(value)
    if not isinstance(value, type(default)):
        raise ValueError(f"config error at {key}: expected {type(default).__name__}")
    return value
