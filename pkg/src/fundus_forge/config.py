"""Run configuration: flat ``section.key = value`` documents.

Every key has a default; a document only lists what it overrides. Unknown
keys are rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Union

Value = Union[bool, int, float, str]

DEFAULTS: Dict[str, Value] = {
    "model.arch": "unet",
    "model.base_channels": 64,
    "model.depth": 4,
    "model.enet_width": 16,
    "train.batch_size": 4,
    "train.image_size": 128,
    "train.seed": 0,
    "train.augment_pretrain": True,
    "train.augment_finetune": True,
    "train.max_epochs": 0,
    "adam.alpha": 1e-4,
    "adam.beta1": 0.9,
    "adam.beta2": 0.999,
    "adam.eps": 1e-8,
    "schedule.lr_patience": 25,
    "schedule.lr_factor": 10.0,
    "schedule.pretrain_stop_epochs": 100,
    "schedule.finetune_stop_images": 3900,
    "augment.rotation": 15.0,
    "augment.scale_min": 0.9,
    "augment.scale_max": 1.1,
    "augment.translation": 0.05,
    "augment.hflip": True,
    "augment.vflip": True,
    "augment.flip_prob": 0.5,
    "augment.brightness": 0.1,
    "augment.contrast": 0.1,
    "augment.hue": 0.02,
    "ssim.sigma": 1.5,
    "ssim.radius": 5,
    "ssim.dynamic_range": 1.0,
    "ssim.k1": 0.01,
    "ssim.k2": 0.03,
    "ssim.erosion_radius": 5,
    "data.pretrain_count": 59,
    "data.pretrain_val": 15,
    "data.seg_count": 20,
    "data.split_seed": 0,
    "sweep.archs": "unet,enet",
    "sweep.modes": "MP,FS",
    "sweep.sizes": "1,5,10,15",
    "sweep.seeds": "0,1,2",
}

# Desk-scale preset: small images and networks, patience scaled to the
# few optimizer steps a 1-15 image training set yields per epoch.
PROFILES: Dict[str, Dict[str, Value]] = {
    "paper": {},
    "tiny": {
        "model.base_channels": 8,
        "model.depth": 2,
        "model.enet_width": 8,
        "train.image_size": 64,
        "train.max_epochs": 400,
        "adam.alpha": 1e-3,
        "schedule.lr_patience": 10,
        "schedule.pretrain_stop_epochs": 20,
        "schedule.finetune_stop_images": 300,
    },
}


class ConfigError(ValueError):
    pass


def _parse_value(key: str, text: str) -> Value:
    default = DEFAULTS[key]
    t = text.strip()
    try:
        if isinstance(default, bool):
            low = t.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(t)
        if isinstance(default, float):
            return float(t)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {t!r} as {type(default).__name__}") from None
    return t


def _format(v: Value) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


class RunConfig:
    """Resolved configuration; behaves like a read-only mapping of flat keys."""

    def __init__(self, overrides: Mapping[str, Value] = (), profile: str = "paper"):
        if profile not in PROFILES:
            raise ConfigError(f"unknown profile {profile!r}; choose from {', '.join(PROFILES)}")
        self.profile = profile
        self.values: Dict[str, Value] = dict(DEFAULTS)
        self.values.update(PROFILES[profile])
        for k, v in dict(overrides).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        self.values[key] = _parse_value(key, value) if isinstance(value, str) else value

    def __getitem__(self, key: str) -> Value:
        return self.values[key]

    def list(self, key: str, cast=str) -> List:
        return [cast(p.strip()) for p in str(self.values[key]).split(",") if p.strip()]

    @classmethod
    def parse(cls, text: str, profile: str = "paper") -> "RunConfig":
        overrides = {}
        for no, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {no}: expected 'section.key = value', got {raw!r}")
            k, v = (s.strip() for s in line.split("=", 1))
            if k not in DEFAULTS:
                raise ConfigError(f"line {no}: unknown configuration key {k!r}")
            overrides[k] = _parse_value(k, v)
        return cls(overrides, profile)

    @classmethod
    def load(cls, path, profile: str = "paper") -> "RunConfig":
        return cls.parse(Path(path).read_text(encoding="utf-8"), profile)

    def dumps(self) -> str:
        lines = [f"# profile: {self.profile}"]
        lines += [f"{k} = {_format(v)}" for k, v in sorted(self.values.items())]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def keys(self) -> Iterable[str]:
        return self.values.keys()

    def model_hyper(self, arch: str) -> Dict[str, int]:
        if arch == "unet":
            return {"base_channels": self["model.base_channels"], "depth": self["model.depth"]}
        if arch == "enet":
            return {"width": self["model.enet_width"]}
        return {}
