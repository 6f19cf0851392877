"""Benchmark configuration from YAML files and the environment."""

from __future__ import annotations

import logging
import os
from collections.abc import Mapping
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, get_type_hints

import yaml

from .algorithms import Hyperparameters
from .exceptions import ConfigurationError
from .games import GameConfig
from .harness import ExperimentConfig
from .models import ChannelParams, HighwayConfig, coerce_value

ENV_PREFIX = "V2XBENCH_"
SECTIONS = ("highway", "channel", "game", "training", "experiment")
_SECTION_TYPES: dict[str, type] = {
    "highway": HighwayConfig,
    "channel": ChannelParams,
    "game": GameConfig,
    "training": Hyperparameters,
    "experiment": ExperimentConfig,
}
_NOT_FLAT = ("highway", "channel", "game", "hyperparameters")

logger = logging.getLogger(__name__)


def section_keys(section: str) -> list[str]:
    """Keys accepted in ``section``."""
    cls = _SECTION_TYPES[section]
    return [f.name for f in fields(cls) if section != "experiment" or f.name not in _NOT_FLAT]


def _convert(section: str, key: str, value: Any) -> Any:
    if section == "training":
        # Validated by Hyperparameters.with_overrides when the run resolves it.
        return value
    if section == "experiment" and key == "seeds" and type(value) is int:
        return (value,)
    if section == "experiment" and key == "seeds" and isinstance(value, str):
        return tuple(int(s) for s in value.replace(",", " ").split())
    hints = get_type_hints(_SECTION_TYPES[section])
    try:
        return coerce_value(value, hints[key])
    except (ValueError, TypeError) as err:
        raise ConfigurationError(f"invalid value for [{section}] {key}: {err}") from err


@dataclass
class BenchConfig:
    """
    Layered configuration: file, then ``V2XBENCH_*`` variables, then CLI flags.

    Each section maps onto one dataclass; values stay as raw overrides until
    :meth:`experiment` builds and validates the resolved objects.
    """

    values: dict[str, dict[str, Any]] = field(
        default_factory=lambda: {section: {} for section in SECTIONS}
    )

    def set(self, section: str, key: str, value: Any) -> None:
        """
        Set one key, converting text to the field type.

        Raises:
            ConfigurationError: For an unknown section or key, listing the valid ones
        """
        if section not in SECTIONS:
            raise ConfigurationError(f"unknown config section [{section}]", list(SECTIONS))
        valid = section_keys(section)
        if key not in valid:
            raise ConfigurationError(
                f"unknown key {key!r} in [{section}]; valid keys: {', '.join(valid)}", valid
            )
        self.values[section][key] = _convert(section, key, value)

    def update(self, section: str, overrides: Mapping[str, Any]) -> BenchConfig:
        for key, value in overrides.items():
            if value is not None:
                self.set(section, key, value)
        return self

    @classmethod
    def from_file(cls, filepath: str | Path) -> BenchConfig:
        """
        Load a YAML file mapping section names to ``key: value`` mappings.

        Raises:
            ConfigurationError: If the file is missing, is not valid YAML or
                holds unknown sections or keys
        """
        try:
            with open(filepath, encoding="utf-8") as handle:
                document = yaml.safe_load(handle)
        except FileNotFoundError as err:
            raise ConfigurationError(f"config file not found: {filepath}") from err
        except yaml.YAMLError as err:
            mark = getattr(err, "problem_mark", None)
            where = f":{mark.line + 1}" if mark is not None else ""
            raise ConfigurationError(f"{filepath}{where}: invalid YAML: {err}") from err
        logger.debug(f"Loaded config file {filepath}")
        return cls.from_mapping({} if document is None else document, source=str(filepath))

    @classmethod
    def from_mapping(cls, document: Any, source: str = "config") -> BenchConfig:
        """
        Build a config from a mapping of sections, as loaded from YAML.

        Raises:
            ConfigurationError: If the document or a section is not a mapping,
                or names an unknown section or key
        """
        if not isinstance(document, Mapping):
            raise ConfigurationError(
                f"{source}: expected a mapping of sections, got {type(document).__name__}",
                list(SECTIONS),
            )
        config = cls()
        for name, entries in document.items():
            section = str(name).lower()
            if section not in SECTIONS:
                raise ConfigurationError(
                    f"{source}: unknown section {name!r}", list(SECTIONS)
                )
            if entries is None:
                continue
            if not isinstance(entries, Mapping):
                raise ConfigurationError(
                    f"{source}: section {section!r} must map keys to values"
                )
            for key, value in entries.items():
                config.set(section, str(key), value)
        return config

    def apply_env(self, environ: Mapping[str, str] | None = None) -> BenchConfig:
        """
        Apply ``V2XBENCH_<SECTION>_<KEY>`` variables, e.g. ``V2XBENCH_EXPERIMENT_SCALE``.

        Raises:
            ConfigurationError: For variables naming unknown sections or keys
        """
        env = os.environ if environ is None else environ
        for name, value in sorted(env.items()):
            if not name.startswith(ENV_PREFIX):
                continue
            rest = name[len(ENV_PREFIX) :].lower()
            section, _, key = rest.partition("_")
            if section not in SECTIONS:
                # Other V2XBENCH_* variables (such as test switches) are not config.
                continue
            self.set(section, key, value)
        return self

    @classmethod
    def from_env(cls, environ: Mapping[str, str] | None = None) -> BenchConfig:
        return cls().apply_env(environ)

    def experiment(self) -> ExperimentConfig:
        """
        Resolve all sections into a validated experiment config.

        Raises:
            ConfigurationError: If any resolved value is invalid
        """
        base = ExperimentConfig()
        return replace(
            base,
            **self.values["experiment"],
            highway=replace(base.highway, **self.values["highway"]),
            channel=replace(base.channel, **self.values["channel"]),
            game=replace(base.game, **self.values["game"]),
            hyperparameters=dict(self.values["training"]),
        )
