"""YAML experiment configuration and per-run records."""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .version import describe

logger = logging.getLogger(__name__)

# per subcommand, the options whose values are file or directory paths
PATH_KEYS = {
    "gen-net": frozenset({"out"}),
    "simulate": frozenset({"net", "out"}),
    "oracle": frozenset({"net", "sources", "out"}),
    "train": frozenset({"data", "net_mask", "out", "log"}),
    "gradcheck": frozenset({"out"}),
    "estimate": frozenset({"ckpt", "out"}),
    "eval-net": frozenset({"ckpt", "truth_net", "out"}),
    "eval-prob": frozenset({"ckpt", "oracle", "sources", "out"}),
    "maximize": frozenset({"ckpt", "oracle_net", "eval_net", "out"}),
    "reproduce": frozenset({"out"}),
}


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


def _normalize(key):
    return str(key).replace("-", "_")


def _command_name(key):
    return str(key).replace("_", "-")


@dataclass
class ExperimentConfig:
    """
    Parsed experiment file.

    sections maps a subcommand name to its options, keyed by the option's
    long flag with dashes turned into underscores.
    """

    path: Path = None
    seed: int = None
    threads: int = None
    pipeline: list = field(default_factory=list)
    sections: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path, encoding="utf-8") as f:
            doc = yaml.safe_load(f)
        return cls.from_dict(doc or {}, path)

    @classmethod
    def from_dict(cls, doc, path=None):
        if not isinstance(doc, dict):
            raise ConfigError("Config file must hold a mapping at the top level.")
        base = Path(path).parent if path is not None else Path(".")
        config = cls(path=None if path is None else Path(path))
        for key, value in doc.items():
            key = _normalize(key)
            if key == "seed":
                config.seed = int(value)
            elif key == "threads":
                config.threads = int(value)
            elif key == "pipeline":
                if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                    raise ConfigError("'pipeline' must be a list of subcommand names.")
                config.pipeline = list(value)
            else:
                command = _command_name(key)
                if not isinstance(value, dict):
                    raise ConfigError(f"Section {command!r} must be a mapping of options.")
                paths = PATH_KEYS.get(command, frozenset())
                options = {}
                for k, v in value.items():
                    k = _normalize(k)
                    options[k] = str(base / v) if k in paths and isinstance(v, str) else v
                config.sections[command] = options
        return config

    def check(self, known):
        """
        Reject sections and options no subcommand declares.

        known maps each subcommand name to the set of its option names.
        """
        for name in self.pipeline:
            if name not in known or name == "pipeline":
                raise ConfigError(f"Pipeline step {name!r} is not a runnable subcommand.")
        for section, options in self.sections.items():
            if section not in known:
                raise ConfigError(f"Unknown config section {section!r}.")
            unknown = sorted(set(options) - set(known[section]))
            if unknown:
                raise ConfigError(f"Unknown option(s) in section {section!r}: {', '.join(unknown)}.")

    def section(self, command):
        return dict(self.sections.get(command, {}))


def _plain(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    return value


def write_run_record(out, command, args):
    """
    Write the resolved options and the package version of a run.

    The record goes to <out>/run.yaml when out is a directory and to
    <out>.run.yaml next to an output file otherwise.
    """
    record = {
        "command": command,
        "version": describe(),
        "args": {k: _plain(v) for k, v in sorted(args.items()) if not callable(v)},
    }
    path = Path(out) / "run.yaml" if Path(out).is_dir() else Path(f"{out}.run.yaml")
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(record, f, sort_keys=True, default_flow_style=False)
    logger.debug("Wrote run record %s", path)
    return path
