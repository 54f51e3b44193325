"""Pipeline configuration: nested dataclasses loaded from an INI file plus overrides."""
from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .gsplat import OptimConfig
from .head import AdaptConfig
from .isfga import UNetConfig

# (erid, isfga, rf_head) per ablation row
SETTINGS = {
    "1": (False, False, False),
    "2": (True, False, False),
    "3": (True, False, True),
    "4": (True, True, False),
    "full": (True, True, True),
}


@dataclass
class RetinexConfig:
    radius: int = 7
    gain_hidden: int = 16
    state_channels: int = 16
    g_min: float = 0.3
    g_max: float = 6.0
    eps: float = 1e-4


@dataclass
class HeadConfig:
    hidden: int = 16


@dataclass
class TrainConfig:
    steps: int = 600
    batch: int = 4
    crop: int = 32
    lr: float = 1e-3
    warmup: int = 50
    grad_clip: float = 1.0
    ssim_weight: float = 0.2
    val_every: int = 100
    seed: int = 0


@dataclass
class GSConfig(OptimConfig):
    gaussians: int = 500


@dataclass
class PipelineConfig:
    erid: bool = True
    isfga: bool = True
    rf_head: bool = True
    seed: int = 0
    lpips_provider: str = ""
    retinex: RetinexConfig = field(default_factory=RetinexConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gs: GSConfig = field(default_factory=GSConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["unet"]["widths"] = list(self.unet.widths)
        d["unet"]["band_kernels"] = list(self.unet.band_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        cfg = cls()
        for f in fields(cls):
            if f.name not in d:
                continue
            value = d[f.name]
            current = getattr(cfg, f.name)
            if dataclasses.is_dataclass(current):
                setattr(cfg, f.name, type(current)(**value))
            else:
                setattr(cfg, f.name, value)
        return cfg

    def for_setting(self, setting: str) -> "PipelineConfig":
        if setting not in SETTINGS:
            raise ValueError(f"unknown ablation setting {setting!r}; choose from {sorted(SETTINGS)}")
        erid, isfga, head = SETTINGS[setting]
        return dataclasses.replace(self, erid=erid, isfga=isfga, rf_head=head)

    @property
    def setting(self) -> str | None:
        for name, toggles in SETTINGS.items():
            if toggles == (self.erid, self.isfga, self.rf_head):
                return name
        return None

    def with_overrides(self, overrides: dict[str, str]) -> "PipelineConfig":
        """Apply ``{"section.key": "text"}`` (or top-level ``"key"``) overrides."""
        d = self.to_dict()
        for key, text in overrides.items():
            section, _, name = key.rpartition(".")
            target = d[section] if section else d
            if name not in target:
                raise KeyError(f"unknown config key {key!r}")
            target[name] = _parse_like(target[name], text)
        return PipelineConfig.from_dict(d)


def _parse_like(current, text: str):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes", "on")
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if isinstance(current, (list, tuple)):
        return [int(x) if x.strip().lstrip("-").isdigit() else float(x) for x in text.replace(",", " ").split()]
    return text


def load_config(path=None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    cfg = PipelineConfig()
    flat: dict[str, str] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise FileNotFoundError(f"config file {path} not found")
        for section in parser.sections():
            for key, value in parser.items(section):
                flat[key if section == "pipeline" else f"{section}.{key}"] = value
    flat.update(overrides or {})
    return cfg.with_overrides(flat) if flat else cfg


def dump_ini(cfg: PipelineConfig) -> str:
    d = cfg.to_dict()
    parser = configparser.ConfigParser()
    parser["pipeline"] = {k: str(v) for k, v in d.items() if not isinstance(v, dict)}
    for k, v in d.items():
        if isinstance(v, dict):
            parser[k] = {kk: " ".join(map(str, vv)) if isinstance(vv, list) else str(vv) for kk, vv in v.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
