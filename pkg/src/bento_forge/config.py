"""Run configuration: flat ``key = value`` files over dataclass defaults."""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from .layout import LayoutConfig
from .t2i import StageConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    steps: int = 1000
    batch_size: int = 8
    checkpoint_every: int = 250
    # optimisation; the t2i discriminators use t2i_lr_d instead of lr_d
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    # layout and composition
    z_dim: int = 64
    canvas: int = 64
    hidden: int = 64
    w_layout: float = 1.0
    w_image: float = 1.0
    w_stn: float = 1.0
    stn_pretrain_steps: int = 0
    # text to image
    num_stages: int = 4
    resolutions: tuple[int, ...] = (8, 16, 32, 64)
    t2i_channels: tuple[int, ...] = (32, 16, 8, 8)
    t2i_z_dim: int = 16
    t2i_lr_d: float = 5e-5
    text_dim: int = 32
    max_len: int = 24
    # paths
    data_dir: str = ""
    out_dir: str = ""

    # keys that may change between a run and its resume
    UNHASHED = ("steps", "checkpoint_every", "data_dir", "out_dir")

    def __post_init__(self):
        for name in ("steps", "batch_size", "checkpoint_every", "z_dim", "canvas", "hidden", "t2i_z_dim", "text_dim", "max_len"):
            if getattr(self, name) < (0 if name == "steps" else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("lr_g", "lr_d", "t2i_lr_d"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.stn_pretrain_steps < 0:
            raise ConfigError("stn_pretrain_steps must be >= 0")
        if self.num_stages != len(self.resolutions):
            raise ConfigError(f"num_stages = {self.num_stages} but {len(self.resolutions)} resolutions given")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        try:
            self.stage_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]

    def layout_config(self) -> LayoutConfig:
        return LayoutConfig(
            z_dim=self.z_dim,
            canvas=self.canvas,
            hidden=self.hidden,
            lr_g=self.lr_g,
            lr_d=self.lr_d,
            beta1=self.beta1,
            beta2=self.beta2,
            w_layout=self.w_layout,
            w_image=self.w_image,
            w_stn=self.w_stn,
            stn_pretrain_steps=self.stn_pretrain_steps,
        )

    def stage_config(self) -> StageConfig:
        return StageConfig(
            resolutions=tuple(self.resolutions),
            channels=tuple(self.t2i_channels),
            z_dim=self.t2i_z_dim,
            text_dim=self.text_dim,
            max_len=self.max_len,
        )

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(getattr(self, k))}\n" for k in self.keys())

    def hash(self) -> bytes:
        text = "".join(f"{k} = {_format(getattr(self, k))}\n" for k in self.keys() if k not in self.UNHASHED)
        return hashlib.sha256(text.encode("utf-8")).digest()

    def with_overrides(self, pairs: Iterable[tuple[str, str]], source: str = "<overrides>") -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(self)}
        values = {}
        for key, raw in pairs:
            if key not in fields:
                raise ConfigError(f"{source}: unknown key {key!r}; valid keys: {', '.join(self.keys())}")
            values[key] = _parse(key, raw, getattr(self, key), source)
        return dataclasses.replace(self, **values)


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, raw: str, default, source: str):
    try:
        if isinstance(default, bool):
            raise ConfigError(f"{source}: boolean keys are not supported ({key})")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{source}: {key} = {raw!r} is not a valid {type(default).__name__}") from None
    return raw


def parse_pairs(lines: Iterable[str], source: str) -> list[tuple[str, str]]:
    pairs = []
    for n, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        pairs.append((key, value))
    return pairs


def load_config(path: str | Path | None = None, overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, then the file (if any), then ``key=value`` overrides."""
    cfg = RunConfig()
    if path is not None:
        path = Path(path)
        try:
            lines = path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = cfg.with_overrides(parse_pairs(lines, str(path)), str(path))
    return cfg.with_overrides(parse_pairs(overrides, "--set"), "--set")
