"""Flat `section.key = value` configuration with typed defaults.

Every tunable in the library appears in DEFAULTS; unknown keys are
rejected so typos fail loudly. Values coerce to the type of their
default. Files use the same `key = value` text format as dataset
manifests, and command lines may override any key with --set.
"""
from __future__ import annotations

from .io import read_kv
from .synthdata import DatasetConfig, NightConfig, SceneConfig

DEFAULTS = {
    "data.height": 64,
    "data.width": 64,
    "data.num_source": 200,
    "data.num_target": 200,
    "data.num_test": 50,
    "data.seed": 0,
    "data.dynamic_prob": 0.75,
    "data.long_tailed_prob": 0.05,
    "data.misalign_max": 6,
    "data.exposure_min": 0.45,
    "data.exposure_max": 1.0,
    "data.tint_min": 0.6,
    "data.shadow_prob": 0.6,
    "night.gamma": 2.2,
    "night.scale_r": 0.5,
    "night.scale_g": 0.55,
    "night.scale_b": 0.8,
    "night.noise_sigma": 0.03,
    "night.glow_max": 3,
    "model.channels": 16,
    "model.feature_dim": 16,
    "pseudo.theta_day": 0.9,
    "pseudo.theta_night": 0.5,
    "dsr.enable": True,
    "dsr.bank_enable": True,
    "dsr.bank_capacity": 16,
    "dsr.bank_min_pixels": 32,
    "dsr.bank_prob": 0.5,
    "dsr.random_class_fraction": 0.5,
    "dsr.forced_classes": "all",
    "fpa.enable": True,
    "fpa.tau": 0.25,
    "fpa.stop_grad_protos": False,
    "fpa.enable_reweight": True,
    "trainer.alpha": 1.0,
    "trainer.beta": 0.1,
    "trainer.base_lr": 6e-4,
    "trainer.weight_decay": 1e-2,
    "trainer.warmup_ratio": 1e-6,
    "trainer.warmup_frac": 0.05,
    "trainer.poly_power": 0.9,
    "trainer.batch_size": 2,
    "trainer.total_iters": 2000,
    "trainer.ema_lambda": 0.999,
    "trainer.seed": 0,
    "trainer.eval_every": 500,
    "trainer.checkpoint_every": 0,
}


class ConfigError(ValueError):
    pass


def _coerce(key, raw, default):
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    text = str(raw).strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected an integer, got {raw!r}") from exc
    if isinstance(default, float):
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"{key}: expected a number, got {raw!r}") from exc
    return text


class Config:
    def __init__(self, values=None):
        self._values = dict(DEFAULTS)
        for key, value in (values or {}).items():
            self.set(key, value)

    @classmethod
    def from_file(cls, path, overrides=()):
        cfg = cls(read_kv(path))
        cfg.apply_overrides(overrides)
        return cfg

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = _coerce(key, value, DEFAULTS[key])

    def apply_overrides(self, overrides):
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, value = item.split("=", 1)
            self.set(key.strip(), value.strip())

    def get(self, key):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __getitem__(self, key):
        return self.get(key)

    def items(self):
        return self._values.items()

    def dump_lines(self):
        return [f"{k} = {v}" for k, v in sorted(self._values.items())]

    def copy(self):
        return Config(dict(self._values))

    # typed views over the flat namespace

    def scene_config(self):
        return SceneConfig(
            height=self["data.height"],
            width=self["data.width"],
            dynamic_prob=self["data.dynamic_prob"],
            long_tailed_prob=self["data.long_tailed_prob"],
            misalign_max=self["data.misalign_max"],
            exposure_min=self["data.exposure_min"],
            exposure_max=self["data.exposure_max"],
            tint_min=self["data.tint_min"],
            shadow_prob=self["data.shadow_prob"],
            night=NightConfig(
                gamma=self["night.gamma"],
                scale_r=self["night.scale_r"],
                scale_g=self["night.scale_g"],
                scale_b=self["night.scale_b"],
                noise_sigma=self["night.noise_sigma"],
                glow_max=self["night.glow_max"],
            ),
        )

    def dataset_config(self):
        return DatasetConfig(
            scene=self.scene_config(),
            num_source=self["data.num_source"],
            num_target=self["data.num_target"],
            num_test=self["data.num_test"],
            master_seed=self["data.seed"],
        )
