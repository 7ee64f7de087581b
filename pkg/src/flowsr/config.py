"""Strict run-config files: ``[section]`` headers and ``key = value`` lines.

Unknown sections and unknown keys are errors.  Values are coerced to the type of
the matching dataclass default; tuples are comma-separated.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .data import DatasetSpec
from .distill import DistillConfig
from .errors import ConfigError
from .flow import FlowConfig
from .solvers import SolverSpec

STAGES = ("teacher", "distill")


@dataclass
class ModelSpec:
    widths: tuple = (64, 64, 64)
    time_dim: int = 16


@dataclass
class PathSpec:
    data: str = ""
    teacher: str = ""
    out: str = ""


@dataclass
class RunConfig:
    stage: str = "teacher"
    flow: FlowConfig = field(default_factory=FlowConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    solver: SolverSpec = field(default_factory=SolverSpec)
    paths: PathSpec = field(default_factory=PathSpec)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}, got {self.stage!r}")

    def check_paths(self) -> None:
        """Referenced input files must exist."""
        needed = [("data", self.paths.data)]
        if self.stage == "distill":
            needed.append(("teacher", self.paths.teacher))
        for name, p in needed:
            if not p:
                raise ConfigError(f"[paths] {name} is required for stage {self.stage}")
            if not Path(p).is_file():
                raise ConfigError(f"[paths] {name} = {p} does not exist")

    def to_sections(self) -> dict:
        out = {"run": {"stage": self.stage}}
        for name in _SECTIONS:
            out[name] = _as_dict(getattr(self, _ATTR.get(name, name)))
        return out


_SECTIONS = {"flow": FlowConfig, "distill": DistillConfig, "data": DatasetSpec,
             "model": ModelSpec, "solver": SolverSpec, "paths": PathSpec}
_ATTR = {"data": "dataset"}


def _as_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _coerce(raw: str, default, where: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _build(cls, values: dict, section: str):
    proto = cls()
    known = {f.name: getattr(proto, f.name) for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section}]; allowed: {', '.join(known)}")
        kwargs[key] = _coerce(raw, known[key], f"[{section}] {key}")
    try:
        return replace(proto, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def parse_config_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, strict=True, empty_lines_in_values=False,
                                   inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}".splitlines()[0]) from None
    kwargs = {}
    for section in cp.sections():
        values = dict(cp.items(section))
        if section == "run":
            for key in values:
                if key != "stage":
                    raise ConfigError(f"unknown key {key!r} in [run]; allowed: stage")
            kwargs["stage"] = values.get("stage", "teacher")
        elif section in _SECTIONS:
            kwargs[_ATTR.get(section, section)] = _build(_SECTIONS[section], values, section)
        else:
            raise ConfigError(f"unknown section [{section}]; allowed: run, {', '.join(_SECTIONS)}")
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text)


def render_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config_text` (used in run manifests)."""
    lines = []
    for section, values in cfg.to_sections().items():
        lines.append(f"[{section}]")
        for k, v in values.items():
            if isinstance(v, tuple):
                v = ",".join(str(i) for i in v)
            if v is None or v == "":
                continue
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
