"""Run configuration: INI-style sections of flat ``key = value`` pairs.

Example::

    [run]
    seed = 0
    catalog = full            ; or a comma list such as Identity,Zero

    [task]
    kind = blobs
    size = 16,16
    channels = 1

    [network]
    stem_channels = 8
    depth = 1
    nodes = 2
    patch = 16,16

    [search]
    epochs = 30

    [retrain]
    epochs = 100

Every key is optional except ``run.seed``. ``network.input_channels`` and
``network.num_classes`` follow from the task section. The ``SCNAS_SEED``
environment variable overrides the seed.
"""

from __future__ import annotations

import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from typing import Any

from .ops import FULL_CATALOG, OperationKind
from .search_space import NetworkSpec
from .tasks import TaskSpec
from .train import RetrainConfig, SearchConfig

log = logging.getLogger(__name__)

SECTIONS = ("run", "task", "network", "search", "retrain")
_NETWORK_KEYS = ("stem_channels", "depth", "nodes", "patch")
# keys whose default is None but whose values are integers
_OPTIONAL_INT = {("retrain", "stem_channels")}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int
    task: TaskSpec
    network: NetworkSpec
    search: SearchConfig = field(default_factory=SearchConfig)
    retrain: RetrainConfig = field(default_factory=RetrainConfig)
    catalog: tuple[OperationKind, ...] = FULL_CATALOG


def _convert(section: str, key: str, raw: str, default: Any):
    name = f"{section}.{key}"
    try:
        if (section, key) in _OPTIONAL_INT:
            return None if raw.strip().lower() in ("", "none") else int(raw)
        if isinstance(default, bool):
            return raw.strip().lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            elem = type(default[0]) if default else float
            return tuple(elem(v) for v in raw.replace("x", ",").split(",") if v.strip())
        return raw.strip()
    except ValueError:
        raise ConfigError(f"invalid value for {name}: {raw!r}") from None


def _section(parser, name: str, cls, allowed: tuple[str, ...] | None = None) -> dict:
    defaults = {f.name: f.default for f in dataclasses.fields(cls) if f.default is not dataclasses.MISSING}
    keys = allowed if allowed is not None else tuple(defaults)
    out = {}
    if not parser.has_section(name):
        return out
    for key, raw in parser.items(name):
        if key not in keys:
            raise ConfigError(f"unknown field: {name}.{key}")
        out[key] = _convert(name, key, raw, defaults[key])
    return out


def parse_catalog(raw: str) -> tuple[OperationKind, ...]:
    if raw.strip().lower() in ("", "full", "all"):
        return FULL_CATALOG
    try:
        kinds = tuple(OperationKind.parse(v.strip()) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"invalid value for run.catalog: {exc}") from None
    if len(kinds) < 2 or len(set(kinds)) != len(kinds):
        raise ConfigError("invalid value for run.catalog: need at least two distinct kinds")
    return tuple(sorted(kinds))


def parse_config(text: str, seed_override: int | None = None, require_seed: bool = True) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for name in parser.sections():
        if name not in SECTIONS:
            raise ConfigError(f"unknown section: [{name}]")

    run = dict(parser.items("run")) if parser.has_section("run") else {}
    for key in run:
        if key not in ("seed", "catalog"):
            raise ConfigError(f"unknown field: run.{key}")
    seed = None
    if "seed" in run:
        try:
            seed = int(run["seed"])
        except ValueError:
            raise ConfigError(f"invalid value for run.seed: {run['seed']!r}") from None
    if seed_override is not None:
        seed = seed_override
    env = os.environ.get("SCNAS_SEED")
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"invalid value for SCNAS_SEED: {env!r}") from None
        log.info("using seed %d from SCNAS_SEED", seed)
    if seed is None:
        if require_seed:
            raise ConfigError("missing field: seed")
        seed = 0
    catalog = parse_catalog(run.get("catalog", "full"))

    task_kw = _section(parser, "task", TaskSpec)
    task_kw.setdefault("seed", seed)
    try:
        task = TaskSpec(**task_kw)
    except ValueError as exc:
        raise ConfigError(f"invalid task section: {exc}") from None

    net_kw = _section(parser, "network", NetworkSpec, _NETWORK_KEYS)
    net_kw.setdefault("patch", tuple(task.size))
    net_kw["spatial_dims"] = len(net_kw["patch"])
    net_kw["input_channels"] = task.channels
    net_kw["num_classes"] = task.num_classes + 1
    try:
        network = NetworkSpec(**net_kw)
    except ValueError as exc:
        raise ConfigError(f"invalid network section: {exc}") from None
    if len(task.size) != network.spatial_dims:
        raise ConfigError("network.patch and task.size have different ranks")

    try:
        search = SearchConfig(**_section(parser, "search", SearchConfig))
        retrain = RetrainConfig(**_section(parser, "retrain", RetrainConfig))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(seed, task, network, search, retrain, catalog)


def load_config(path, seed_override: int | None = None, require_seed: bool = True) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, seed_override, require_seed)
