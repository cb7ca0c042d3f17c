"""Run configuration: defaults, flat INI files with one section per stage, CLI flags.

Precedence is defaults < file < flags.  In the file, keys are written without
their section prefix (``lr`` under ``[gru]`` is the ``gru_lr`` field); on the
command line every field is a ``--kebab-case`` flag (``--gru-lr``).
"""
from __future__ import annotations

import configparser
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from timekit import cf
from timekit.forecaster import PAIRINGS, TrainConfig
from timekit.pipeline import PipelineConfig
from timekit.synth import ConfigError, DriftConfig

OUTPUT_ROOT_ENV = "TIMEKIT_OUTPUT_ROOT"

# section -> field-name prefix stripped in the file; unprefixed fields listed explicitly
SECTIONS = {
    "data": ("", ("dataset", "granularity", "drop_leading_fraction")),
    "base": ("base_", ("base", "dim", "layers", "cold_epochs", "warm_epochs", "init_std")),
    "forecast": ("", ("pairing", "window", "workers")),
    "gru": ("gru_", ()),
    "ncde": ("ncde_", ()),
    "eval": ("", ("k", "dump_users", "dump_items", "test_mse")),
    "run": ("", ("seed", "output_dir")),
    "synth": ("synth_", ()),
}


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    granularity: int = 1
    drop_leading_fraction: float = 0.0

    base: str = "bprmf"
    dim: int = 64
    layers: int = 3
    base_lr: float = 1e-3
    base_weight_decay: float = 1e-4
    base_batch_size: int = 2048
    cold_epochs: int = 500
    warm_epochs: int = 100
    init_std: float = 0.1

    pairing: str = "gru-ncde"
    window: int = 5
    workers: int = 2

    gru_hidden: int = 64
    gru_lr: float = 1e-3
    gru_weight_decay: float = 1e-5
    gru_batch_size: int = 32
    gru_epochs: int = 300

    ncde_hidden: int = 64
    ncde_lr: float = 1e-3
    ncde_weight_decay: float = 1e-5
    ncde_batch_size: int = 64
    ncde_epochs: int = 100
    ncde_steps_per_interval: int = 4

    k: int = 20
    dump_users: str = ""  # comma-separated original ids
    dump_items: str = ""
    test_mse: bool = False  # also train a diagnostic E_{M+1} to report forecaster test MSE

    seed: int = 0
    output_dir: str = ""

    synth_num_users: int = 200
    synth_num_items: int = 500
    synth_latent_dim: int = 8
    synth_num_periods: int = 12
    synth_interactions_per_period: int = 20
    synth_drift_angle: float = math.pi / 24
    synth_noise_std: float = 0.05
    synth_temperature: float = 0.1
    synth_start_year: int = 2020

    def validate(self) -> "RunConfig":
        if self.base not in cf.BASES:
            raise ConfigError("base", f"must be one of {', '.join(cf.BASES)}, got {self.base!r}")
        if self.pairing not in PAIRINGS:
            raise ConfigError("pairing", f"must be one of {', '.join(PAIRINGS)}, got {self.pairing!r}")
        for name in ("granularity", "dim", "layers", "base_batch_size", "window", "workers", "k", "gru_hidden", "gru_batch_size",
                     "gru_epochs", "ncde_hidden", "ncde_batch_size", "ncde_epochs", "ncde_steps_per_interval"):
            if getattr(self, name) < 1:
                raise ConfigError(name, f"must be >= 1, got {getattr(self, name)}")
        for name in ("cold_epochs", "warm_epochs"):
            if getattr(self, name) < 0:
                raise ConfigError(name, "must be >= 0")
        for name in ("base_lr", "gru_lr", "ncde_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "must be > 0")
        if not 0.0 <= self.drop_leading_fraction < 1.0:
            raise ConfigError("drop_leading_fraction", f"must lie in [0, 1), got {self.drop_leading_fraction}")
        if self.pairing != "gru-gru" and self.window < 2:
            raise ConfigError("window", "NCDE forecasting needs a window of at least 2 periods")
        try:
            self.drift_config().validate()
        except ConfigError as exc:
            raise ConfigError("synth_" + exc.field, str(exc).split(": ", 1)[-1]) from None
        return self

    # -- stage views ------------------------------------------------------

    def base_config(self) -> cf.BaseConfig:
        return cf.BaseConfig(dim=self.dim, epochs=self.cold_epochs, batch_size=self.base_batch_size, lr=self.base_lr,
                             weight_decay=self.base_weight_decay, layers=self.layers, init_std=self.init_std)

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(base=self.base_config(), cold_epochs=self.cold_epochs, warm_epochs=self.warm_epochs, seed=self.seed)

    def train_config(self, kind: str) -> TrainConfig:
        p = kind + "_"
        extra = {"steps_per_interval": self.ncde_steps_per_interval} if kind == "ncde" else {}
        return TrainConfig(hidden=getattr(self, p + "hidden"), lr=getattr(self, p + "lr"), weight_decay=getattr(self, p + "weight_decay"),
                           batch_size=getattr(self, p + "batch_size"), epochs=getattr(self, p + "epochs"), seed=self.seed, **extra)

    def drift_config(self) -> DriftConfig:
        return DriftConfig(
            num_users=self.synth_num_users, num_items=self.synth_num_items, latent_dim=self.synth_latent_dim,
            num_periods=self.synth_num_periods, interactions_per_period=self.synth_interactions_per_period,
            drift_angle=self.synth_drift_angle, noise_std=self.synth_noise_std, temperature=self.synth_temperature,
            seed=self.seed, start_year=self.synth_start_year,
        )

    def run_name(self) -> str:
        stem = Path(self.dataset).stem or "run"
        return f"{stem}-{self.base}-{self.pairing}-s{self.seed}"

    def resolved_output_dir(self) -> Path:
        if self.output_dir:
            return Path(self.output_dir)
        return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / self.run_name()


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _section_key(name: str) -> tuple[str, str]:
    for section, (_, names) in SECTIONS.items():
        if name in names:
            return section, name
    for section, (prefix, _) in SECTIONS.items():
        if prefix and name.startswith(prefix):
            return section, name[len(prefix):]
    raise KeyError(name)


def _field_for(section: str, key: str) -> str:
    prefix, names = SECTIONS[section]
    if key in names:
        return key
    name = prefix + key
    if prefix and name in FIELD_TYPES and name not in names:
        return name
    raise ConfigError(f"{section}.{key}", "unknown config key")


def coerce(name: str, raw):
    """Parse a raw string (or pass through a typed value) for field ``name``."""
    typ = FIELD_TYPES[name]
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if typ == "bool":
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ == "int":
            return int(text)
        if typ == "float":
            return _parse_float(text)
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {typ}") from None
    return text


def _parse_float(text: str) -> float:
    # accept "pi/24" and "0.5*pi" for angles
    t = text.replace(" ", "").lower()
    if "pi" in t:
        if t == "pi":
            return math.pi
        if t.startswith("pi/"):
            return math.pi / float(t[3:])
        if t.endswith("*pi"):
            return float(t[:-3]) * math.pi
        raise ValueError(text)
    return float(t)


def read_config_file(path) -> dict:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=(";", "#"))
    parser.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError("config", f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(section, f"unknown config section in {path}")
        for key, raw in parser.items(section):
            name = _field_for(section, key)
            out[name] = coerce(name, raw)
    return out


def build_config(file_values: dict | None = None, flag_values: dict | None = None, base: RunConfig | None = None) -> RunConfig:
    """Layer defaults (or ``base``), then file values, then flag values."""
    cfg = base or RunConfig()
    merged = {}
    for layer in (file_values or {}, flag_values or {}):
        merged.update({k: coerce(k, v) for k, v in layer.items() if v is not None})
    return replace(cfg, **merged)


def format_config(cfg: RunConfig) -> str:
    values = asdict(cfg)
    grouped: dict[str, list[str]] = {s: [] for s in SECTIONS}
    for name, value in values.items():
        section, key = _section_key(name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        grouped[section].append(f"{key} = {value}")
    return "\n".join(f"[{s}]\n" + "\n".join(lines) + "\n" for s, lines in grouped.items())


def write_config(cfg: RunConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(format_config(cfg), encoding="utf-8")


def load_config(path) -> RunConfig:
    return build_config(read_config_file(path))
