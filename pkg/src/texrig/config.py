"""Flat ``key = value`` run configuration for the command-line tool.

Lists are comma separated. Relative paths resolve against the directory of
the config file. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .fit import DEFAULT_LR, LossWeights

VARIANTS = ("naive", "quasi_phong")
FRAME_VARIANTS = ("full_jacobian", "scaled_rotation")


@dataclass
class RunConfig:
    rest_obj: str = ""
    deformed_objs: list = field(default_factory=list)
    cameras: str = ""
    targets: list = field(default_factory=list)
    maps: str = ""
    output_dir: str = "out"
    uv_width: int = 512
    uv_height: int = 512
    dilation_rings: int = 2
    variant: str = "quasi_phong"
    frame_variant: str = "full_jacobian"
    lambda_l1: float = 0.8
    lambda_ssim: float = 0.2
    lambda_reg_mu: float = 0.01
    lambda_reg_s: float = 1.0
    eps_mu: float | None = None  # None: 1.0 mean rest edge length
    eps_s: float | None = None  # None: 0.6 mean rest edge length
    iterations: int = 100
    lr_position: float = DEFAULT_LR["position"]
    lr_rotation: float = DEFAULT_LR["rotation"]
    lr_log_scale: float = DEFAULT_LR["log_scale"]
    lr_opacity: float = DEFAULT_LR["opacity"]
    lr_color: float = DEFAULT_LR["color"]
    init_noise: float = 0.0
    seed: int = 0
    base_dir: str = field(default=".", compare=False, repr=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.frame_variant not in FRAME_VARIANTS:
            raise ConfigError(f"frame_variant must be one of {FRAME_VARIANTS}")
        if self.uv_width < 2 or self.uv_height < 2:
            raise ConfigError("uv_width and uv_height must be >= 2")
        if self.dilation_rings < 0 or self.iterations < 0:
            raise ConfigError("dilation_rings and iterations must be >= 0")
        for name in ("lambda_l1", "lambda_ssim", "lambda_reg_mu", "lambda_reg_s", "init_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def learning_rates(self):
        return {g: getattr(self, f"lr_{g}") for g in DEFAULT_LR}

    def weights(self):
        return LossWeights(self.lambda_l1, self.lambda_ssim, self.lambda_reg_mu,
                           self.lambda_reg_s, self.eps_mu, self.eps_s)

    def path(self, value):
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate_paths(self, need=()):
        """Check inputs exist and the output directory can be created.

        ``need`` names keys that must be set for the calling command.
        """
        for key in need:
            if not getattr(self, key):
                raise ConfigError(f"{key} is required for this command")
        inputs = [self.rest_obj, self.cameras, self.maps] + list(self.deformed_objs) + list(self.targets)
        for value in inputs:
            if value and not self.path(value).is_file():
                raise ConfigError(f"file not found: {self.path(value)}")
        out = self.path(self.output_dir)
        parent = next((p for p in [out, *out.parents] if p.exists()), None)
        if parent is None or not parent.is_dir():
            raise ConfigError(f"cannot create output directory {out}")

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            if f.name == "base_dir":
                continue
            value = getattr(self, f.name)
            if isinstance(value, list):
                text = ", ".join(value)
            elif value is None:
                text = "auto"
            elif isinstance(value, float):
                text = repr(value)
            else:
                text = str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "base_dir"}


def _convert(name, text, lineno):
    kind = _FIELDS[name].type
    try:
        if kind == "list":
            return [t.strip() for t in text.split(",") if t.strip()]
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "float | None":
            return None if text.lower() == "auto" else float(text)
        return text
    except ValueError:
        raise ConfigError(f"line {lineno}: bad value for {name}: {text!r}") from None


def parse_config_text(text, base_dir="."):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, value, lineno)
    return RunConfig(**values, base_dir=str(base_dir))


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, path.parent)
