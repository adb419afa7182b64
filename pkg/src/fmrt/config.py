"""Run configuration.

Configs are INI files (``configparser``) with sections mirroring the pipeline
stages. Every key maps onto one `RunConfig` field; unknown sections or keys are
rejected so that ablation sweeps fail loudly on typos.

Example::

    [model]
    coarse_dim = 32
    dw_kernels = 3, 7
    encoder = sinusoidal

    [loss]
    beta = 0.5
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, fields
from typing import Any, Dict, Mapping, Tuple


class ConfigError(ValueError):
    pass


ENCODERS = ("awpe", "sinusoidal")
DENOMINATORS = ("full", "rows")


@dataclass
class RunConfig:
    # model
    coarse_dim: int = 256
    fine_dim: int = 128
    backbone_widths: Tuple[int, int, int] = (32, 64, 128)
    l1: int = 4
    l2: int = 2
    dw_kernels: Tuple[int, int] = (3, 5)
    encoder: str = "awpe"
    awpe_normalize: bool = False
    attention_normalized: bool = False
    # matching
    rho: float = 0.2
    tau: float = 1.0
    normalize_features: bool = False
    window: int = 5
    fine_tau: float = 1.0
    # loss
    beta: float = 0.2
    gamma: float = 8.0
    loss_denominator: str = "full"
    # train
    steps: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    clip: float = 0.5
    warmup_steps: int = 0
    n_pairs: int = 8
    # data
    image_size: int = 48
    warp_magnitude: float = 1.0
    photometric: float = 0.05
    seed: int = 7
    # ransac
    ransac_threshold: float = 3.0
    ransac_iters: int = 2000

    def __post_init__(self):
        self.backbone_widths = tuple(int(v) for v in self.backbone_widths)
        self.dw_kernels = tuple(int(v) for v in self.dw_kernels)
        self.validated()

    @classmethod
    def desk(cls, **overrides) -> "RunConfig":
        """Desk-scale preset used by micro-training and the acceptance run."""
        base = dict(coarse_dim=32, fine_dim=16, backbone_widths=(8, 16, 32), l1=2, l2=1, image_size=48)
        base.update(overrides)
        return cls(**base).validated()

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes).validated()

    def validated(self) -> "RunConfig":
        if self.coarse_dim <= 0 or self.coarse_dim % 2:
            raise ConfigError("coarse_dim must be a positive even number")
        if self.fine_dim <= 0 or self.fine_dim % 2:
            raise ConfigError("fine_dim must be a positive even number")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}")
        if self.encoder == "sinusoidal" and self.coarse_dim % 4:
            raise ConfigError("sinusoidal encoding needs coarse_dim divisible by 4")
        if len(self.dw_kernels) != 2 or any(k % 2 == 0 or k < 1 for k in self.dw_kernels):
            raise ConfigError("dw_kernels must be two odd sizes")
        if self.window < 1 or self.window % 2 == 0:
            raise ConfigError("window must be odd")
        if not 0 < self.rho < 1:
            raise ConfigError("rho must lie in (0, 1)")
        if self.tau <= 0 or self.fine_tau <= 0:
            raise ConfigError("temperatures must be positive")
        if self.beta < 0:
            raise ConfigError("beta must be nonnegative")
        if self.l1 < 0 or self.l2 < 0:
            raise ConfigError("layer counts must be nonnegative")
        if self.image_size % 8:
            raise ConfigError("image_size must be divisible by 8")
        if self.loss_denominator not in DENOMINATORS:
            raise ConfigError(f"loss_denominator must be one of {DENOMINATORS}")
        if len(self.backbone_widths) != 3:
            raise ConfigError("backbone_widths needs three stage widths")
        return self

    def to_dict(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(data) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs = {}
        defaults = cls()
        for key, value in data.items():
            kwargs[key] = _coerce(key, value, getattr(defaults, key))
        return cls(**kwargs).validated()


SECTIONS: Dict[str, Tuple[str, ...]] = {
    "model": (
        "coarse_dim", "fine_dim", "backbone_widths", "l1", "l2", "dw_kernels",
        "encoder", "awpe_normalize", "attention_normalized",
    ),
    "matching": ("rho", "tau", "normalize_features", "window", "fine_tau"),
    "loss": ("beta", "gamma", "loss_denominator"),
    "train": ("steps", "lr", "momentum", "clip", "warmup_steps", "n_pairs"),
    "data": ("image_size", "warp_magnitude", "photometric", "seed"),
    "ransac": ("ransac_threshold", "ransac_iters"),
}


def _coerce(key: str, value: Any, default: Any) -> Any:
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                low = value.strip().lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return low in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, tuple):
            items = value.split(",") if isinstance(value, str) else list(value)
            return tuple(int(str(v).strip()) for v in items)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value for {key}: {value!r}") from exc


def parse_ini(text: str, base: RunConfig | None = None) -> RunConfig:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep key case
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    data: Dict[str, Any] = (base or RunConfig()).to_dict()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            data[key] = value
    return RunConfig.from_dict(data)


def load_config(path: str, base: RunConfig | None = None) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_ini(fh.read(), base)


def to_ini(cfg: RunConfig) -> str:
    d = cfg.to_dict()
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for key in keys:
            v = d[key]
            lines.append(f"{key} = {', '.join(map(str, v)) if isinstance(v, list) else v}")
        lines.append("")
    return "\n".join(lines)
