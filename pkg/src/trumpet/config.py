"""Experiment configuration files.

Flat ``key = value`` text with ``[model]``, ``[train]``, ``[solve]``, ``[uq]``
and ``[data]`` sections. Every key maps to a field of the matching typed
config; unknown sections or keys and missing required keys are errors that
name the offender. Example::

    [model]
    latent_dim = 4
    data_shape = 8x8x1
    latent_shape = 2x2x1
    schedule = 1:2:1, 1:2:1    # bijective:injective:upsqueeze per stage

    [train]
    mse_epochs = 40
    ml_epochs = 40
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from trumpet.inverse import SolveConfig
from trumpet.model import TrumpetSpec
from trumpet.training import TrainConfig
from trumpet.uq import UqConfig

__all__ = [
    "ConfigError",
    "DataConfig",
    "ExperimentConfig",
    "parse_sections",
    "parse_config",
    "load_config",
    "spec_from_section",
    "spec_to_text",
    "format_config",
    "parse_shape",
    "parse_schedule",
]


class ConfigError(ValueError):
    """Malformed configuration text."""


@dataclass(frozen=True)
class DataConfig:
    """Dataset recipe: ``source`` is ``synth`` or a path to an IDX image file."""

    source: str = "synth"
    intrinsic_dim: int = 4
    n: int = 4096
    noise: float = 0.0
    curvature: float = 1.0
    seed: int = 0
    train_fraction: float = 0.9


@dataclass(frozen=True)
class ExperimentConfig:
    model: TrumpetSpec
    train: TrainConfig = field(default_factory=TrainConfig)
    solve: SolveConfig = field(default_factory=SolveConfig)
    uq: UqConfig = field(default_factory=UqConfig)
    data: DataConfig = field(default_factory=DataConfig)


def parse_shape(text: str) -> tuple[int, ...]:
    try:
        dims = tuple(int(p) for p in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"bad shape {text!r}; expected HxWxC") from None
    if len(dims) != 3 or min(dims) < 1:
        raise ConfigError(f"bad shape {text!r}; expected HxWxC with positive entries")
    return dims


def parse_schedule(text: str) -> tuple[tuple[int, int, bool], ...]:
    stages = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        parts = item.split(":")
        try:
            n_bij, n_inj, up = (int(p) for p in parts)
        except ValueError:
            raise ConfigError(f"bad schedule stage {item!r}; expected bij:inj:up") from None
        if n_bij < 0 or n_inj < 0 or up not in (0, 1):
            raise ConfigError(f"bad schedule stage {item!r}")
        stages.append((n_bij, n_inj, bool(up)))
    if not stages:
        raise ConfigError("empty schedule")
    return tuple(stages)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"bad boolean {text!r}")


_REQUIRED = object()

# section -> key -> (parser, default)
_SCHEMA = {
    "model": {
        "latent_dim": (int, _REQUIRED),
        "data_shape": (parse_shape, _REQUIRED),
        "latent_shape": (parse_shape, _REQUIRED),
        "schedule": (parse_schedule, _REQUIRED),
        "flow_depth": (int, 4),
        "conv_mode": (str, "injective-linear"),
        "coupling_hidden": (int, 16),
        "coupling_net": (str, "plain"),
        "flow_hidden": (int, 16),
        "tikhonov": (float, 1e-6),
    },
    "train": {
        "lr": (float, 1e-4),
        "batch_size": (int, 64),
        "mse_epochs": (int, _REQUIRED),
        "ml_epochs": (int, _REQUIRED),
        "tikhonov": (float, 1e-6),
        "seed": (int, 0),
        "checkpoint_every": (int, 0),
        "patience": (int, 10),
        "lr_decay": (str, "none"),
    },
    "solve": {
        "eta": (float, 0.05),
        "rho": (float, 0.0),
        "iters": (int, 300),
        "use_likelihood": (_bool, False),
    },
    "uq": {
        "beta": (float, 1.0),
        "sigma": (float, 0.1),
        "batch": (int, 16),
        "steps": (int, 1000),
        "lr": (float, 1e-3),
        "blocks": (int, 8),
        "hidden": (int, 16),
    },
    "data": {
        "source": (str, "synth"),
        "intrinsic_dim": (int, 4),
        "n": (int, 4096),
        "noise": (float, 0.0),
        "curvature": (float, 1.0),
        "seed": (int, 0),
        "train_fraction": (float, 0.9),
    },
}

_TYPES = {"train": TrainConfig, "solve": SolveConfig, "uq": UqConfig, "data": DataConfig}


def parse_sections(text: str) -> dict[str, dict[str, str]]:
    """Raw ``{section: {key: value}}`` with duplicate keys rejected."""
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",),
                                       comment_prefixes=("#", ";"), inline_comment_prefixes=("#",),
                                       strict=True, empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0]) from None
    return {s: dict(parser[s]) for s in parser.sections()}


def _typed(section: str, raw: dict[str, str], defaults: bool = True) -> dict:
    schema = _SCHEMA[section]
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in [{section}]")
    out = {}
    for key, (parse, default) in schema.items():
        if key in raw:
            try:
                out[key] = parse(raw[key].strip())
            except ConfigError:
                raise
            except ValueError:
                raise ConfigError(f"bad value for {section}.{key}: {raw[key]!r}") from None
        elif default is _REQUIRED:
            raise ConfigError(f"missing required key {key!r} in [{section}]")
        elif defaults:
            out[key] = default
    return out


def spec_from_section(raw: dict[str, str]) -> TrumpetSpec:
    vals = _typed("model", raw)
    try:
        spec = TrumpetSpec(
            latent_dim=vals["latent_dim"], data_shape=vals["data_shape"],
            latent_shape=vals["latent_shape"], schedule=vals["schedule"],
            flow_depth=vals["flow_depth"], conv_mode=vals["conv_mode"],
            coupling_hidden=vals["coupling_hidden"], coupling_net=vals["coupling_net"],
            flow_hidden=vals["flow_hidden"], tikhonov=vals["tikhonov"])
        spec.validate()
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from None
    return spec


def spec_to_text(spec: TrumpetSpec) -> str:
    """``[model]`` section that :func:`spec_from_section` maps back to ``spec``."""
    shape = "x".join(str(v) for v in spec.data_shape)
    lshape = "x".join(str(v) for v in spec.latent_shape)
    sched = ", ".join(f"{b}:{i}:{int(u)}" for b, i, u in spec.schedule)
    return (
        "[model]\n"
        f"latent_dim = {spec.latent_dim}\n"
        f"data_shape = {shape}\n"
        f"latent_shape = {lshape}\n"
        f"schedule = {sched}\n"
        f"flow_depth = {spec.flow_depth}\n"
        f"conv_mode = {spec.conv_mode}\n"
        f"coupling_hidden = {spec.coupling_hidden}\n"
        f"coupling_net = {spec.coupling_net}\n"
        f"flow_hidden = {spec.flow_hidden}\n"
        f"tikhonov = {spec.tikhonov!r}\n"
    )


def _build(section: str, raw: dict[str, str]):
    cls = _TYPES[section]
    vals = _typed(section, raw)
    names = {f.name for f in fields(cls)}
    try:
        return cls(**{k: v for k, v in vals.items() if k in names})
    except ValueError as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_config(text: str) -> ExperimentConfig:
    sections = parse_sections(text)
    unknown = sorted(set(sections) - set(_SCHEMA))
    if unknown:
        raise ConfigError(f"unknown section [{unknown[0]}]")
    if "model" not in sections:
        raise ConfigError("missing required section [model]")
    kwargs = {"model": spec_from_section(sections["model"])}
    for name in _TYPES:
        if name in sections:
            kwargs[name] = _build(name, sections[name])
        elif any(d is _REQUIRED for _, d in _SCHEMA[name].values()):
            raise ConfigError(f"missing required section [{name}]")
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def format_config(cfg: ExperimentConfig) -> str:
    """Full text of ``cfg``; parses back to an equal config."""
    parts = [spec_to_text(cfg.model)]
    for name, obj in (("train", cfg.train), ("solve", cfg.solve), ("uq", cfg.uq), ("data", cfg.data)):
        lines = [f"[{name}]"]
        for key in _SCHEMA[name]:
            if hasattr(obj, key):
                val = getattr(obj, key)
                lines.append(f"{key} = {val!r}" if isinstance(val, float) else f"{key} = {val}")
        parts.append("\n".join(lines) + "\n")
    return "\n".join(parts)
