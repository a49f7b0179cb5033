"""Experiment configuration and its sectioned key-value file format.

A config file is INI-style text with the sections ``data``, ``model``,
``fl``, ``hda``, ``akt``, ``pgd`` and ``run``.  Overrides use dotted keys
(``fl.rounds=5``).  Every field has a default; unknown sections or keys
are rejected.  ``run`` holds execution-only settings and is excluded from
the config hash, so the hash identifies the experiment, not where or how
fast it ran.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .akt import AktConfig, PgdConfig
from .hda import HdaConfig
from .orchestrator import FLConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    num_classes: int = 10
    dim: int = 16
    n_samples: int = 2000
    # benchmark difficulty: FedAvg-per lands near 66% personalized accuracy at the defaults
    class_sep: float = 2.0
    alpha: float = 0.1
    min_per_client: int = 10
    test_fraction: float = 0.2
    pretrain_size: int = 1000
    pretrain_epochs: int = 20
    proxy_size: int = 400
    proxy_mode: str = "in_domain"
    # None -> same number of classes as the client data
    ood_num_classes: int | None = None
    ood_class_sep: float = 3.0

    def __post_init__(self):
        if self.proxy_mode not in ("in_domain", "out_of_domain"):
            raise ValueError("proxy_mode must be 'in_domain' or 'out_of_domain'")
        if self.alpha <= 0 or self.class_sep < 0:
            raise ValueError("alpha must be > 0 and class_sep >= 0")


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (64, 64, 64, 64)
    depth_per_stage: int = 2
    proto_dim: int = 32
    dropout: float = 0.1


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    workers: int = 1
    checkpoint_every: int = 0


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def sections(self) -> dict[str, object]:
        return {"data": self.data, "model": self.model, "fl": self.fl, "hda": self.fl.hda,
                "akt": self.fl.akt, "pgd": self.fl.akt.pgd, "run": self.run}

    def to_ini(self, include_run: bool = True) -> str:
        lines = []
        for name, section in self.sections().items():
            if name == "run" and not include_run:
                continue
            lines.append(f"[{name}]")
            for f in _scalar_fields(section):
                lines.append(f"{f.name} = {_format(getattr(section, f.name))}")
            lines.append("")
        return "\n".join(lines)

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_ini(include_run=False).encode()).hexdigest()[:12]

    def save(self, path: Path | str, header: str = "") -> None:
        Path(path).write_text(header + self.to_ini())

    @classmethod
    def from_ini(cls, text: str, overrides: Iterable[str] = ()) -> ExperimentConfig:
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
        parser.optionxform = str
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"unreadable config: {exc}") from None
        values: dict[str, dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} must look like section.key=value")
            values.setdefault(section, {})[name] = value.strip()
        return cls.from_values(values)

    @classmethod
    def from_values(cls, values: dict[str, dict[str, str]]) -> ExperimentConfig:
        defaults = cls()
        known = defaults.sections()
        for section, entries in values.items():
            if section not in known:
                raise ConfigError(f"unknown section [{section}]; expected one of {sorted(known)}")
            names = {f.name for f in _scalar_fields(known[section])}
            for key in entries:
                if key not in names:
                    raise ConfigError(f"unknown key {section}.{key}")

        def build(section: str, kind, **nested):
            hints = typing.get_type_hints(kind)
            kwargs = dict(nested)
            for key, raw in values.get(section, {}).items():
                try:
                    kwargs[key] = _parse(raw, hints[key])
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: {exc}") from None
            try:
                return kind(**kwargs)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{section}] {exc}") from None

        pgd = build("pgd", PgdConfig)
        akt = build("akt", AktConfig, pgd=pgd)
        hda = build("hda", HdaConfig)
        fl = build("fl", FLConfig, hda=hda, akt=akt)
        return cls(build("data", DataConfig), build("model", ModelConfig), fl, build("run", RunConfig))

    @classmethod
    def load(cls, path: Path | str | None, overrides: Iterable[str] = ()) -> ExperimentConfig:
        text = "" if path is None else Path(path).read_text()
        return cls.from_ini(text, overrides)

    def with_overrides(self, overrides: Iterable[str]) -> ExperimentConfig:
        return ExperimentConfig.from_ini(self.to_ini(), overrides)


def _scalar_fields(section) -> list[dataclasses.Field]:
    return [f for f in dataclasses.fields(section) if not dataclasses.is_dataclass(getattr(section, f.name))]


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _parse(raw: str, hint):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if raw.lower() == "none" and type(None) in args:
            return None
        (inner,) = [a for a in args if a is not type(None)]
        return _parse(raw, inner)
    if origin is tuple:
        return tuple(_parse(part, args[0]) for part in raw.split(",") if part.strip())
    if hint is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if hint is int:
        return int(raw)
    if hint is float:
        return float(raw)
    if hint is str:
        return raw
    raise ValueError(f"unsupported field type {hint!r}")


def default_config_text() -> str:
    buf = io.StringIO()
    buf.write("# heartpfl experiment configuration (all values shown are defaults)\n")
    buf.write(ExperimentConfig().to_ini())
    return buf.getvalue()
