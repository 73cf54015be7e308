"""JSON run configuration: schema checks with field paths, and resolved snapshots.

Schema (every key optional)::

    {
      "seeds": [0, 1, 2, 3, 4],
      "shots": 16,
      "variants": ["TextShallow", "IndependentDeep"],
      "ablation_variant": "IndependentDeep",
      "world": {<WorldConfig fields>, "domain": {<DomainSpec fields>}},
      "kd": {<KDConfig fields>},
      "adapt": {"<variant>": {<AdaptStrategy fields>}}
    }
"""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

from .adapt import VARIANTS, AdaptStrategy
from .boost import KDConfig
from .errors import CasplError, ConfigError
from .experiments import ExperimentConfig
from .world import WorldConfig

TOP_KEYS = ("seeds", "shots", "variants", "ablation_variant", "world", "kd", "adapt")


def _check_type(path, value, default):
    def bad(expected):
        return ConfigError(f"{path}: expected {expected}, got {value!r}")

    if value is None and (default is None or path.endswith(".depth")):
        return None
    if default is None or isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) \
                or not float(value).is_integer():
            raise bad("an integer")
        return int(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise bad("a boolean")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad("a number")
        return float(value)
    if not isinstance(value, type(default)):
        raise bad(type(default).__name__)
    return value


def _build(cls, data, path, base=None):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    base = base if base is not None else cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}"
        if key not in fields:
            raise ConfigError(f"{sub}: unknown field (allowed: {sorted(fields)})")
        current = getattr(base, key)
        if dataclasses.is_dataclass(current):
            kwargs[key] = _build(type(current), value, sub, current)
        else:
            kwargs[key] = _check_type(sub, value, current)
    try:
        return dataclasses.replace(base, **kwargs)
    except CasplError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def from_dict(data):
    """Validated :class:`ExperimentConfig`; errors name the offending field path."""
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    for key in data:
        if key not in TOP_KEYS:
            raise ConfigError(f"config.{key}: unknown field (allowed: {list(TOP_KEYS)})")
    kw = {}
    if "world" in data:
        kw["world"] = _build(WorldConfig, data["world"], "config.world")
    if "kd" in data:
        kw["kd"] = _build(KDConfig, data["kd"], "config.kd")
    if "seeds" in data:
        seeds = data["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(
                isinstance(s, int) and not isinstance(s, bool) for s in seeds):
            raise ConfigError("config.seeds: expected a non-empty list of integers")
        kw["seeds"] = tuple(seeds)
    if "shots" in data:
        kw["shots"] = _check_type("config.shots", data["shots"], 16)
    if "variants" in data:
        v = data["variants"]
        if not isinstance(v, list) or any(x not in VARIANTS for x in v):
            raise ConfigError(f"config.variants: expected a list drawn from {list(VARIANTS)}")
        kw["variants"] = tuple(v)
    if "ablation_variant" in data:
        if data["ablation_variant"] not in VARIANTS:
            raise ConfigError(f"config.ablation_variant: expected one of {list(VARIANTS)}")
        kw["ablation_variant"] = data["ablation_variant"]
    if "adapt" in data:
        adapt = data["adapt"]
        if not isinstance(adapt, dict):
            raise ConfigError("config.adapt: expected an object keyed by variant")
        overrides = {}
        for variant, over in adapt.items():
            path = f"config.adapt.{variant}"
            if variant not in VARIANTS:
                raise ConfigError(f"{path}: unknown variant (allowed: {list(VARIANTS)})")
            if not isinstance(over, dict) or "variant" in over:
                raise ConfigError(f"{path}: expected an object of strategy fields")
            _build(AdaptStrategy, over, path, AdaptStrategy.default(variant))
            overrides[variant] = dict(over)
        kw["adapt_overrides"] = overrides
    try:
        return ExperimentConfig(**kw)
    except CasplError as exc:
        raise ConfigError(f"config: {exc}") from None


def load_config(path=None):
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    text = path.read_text()  # missing file surfaces as an I/O error
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return from_dict(data)


def resolved(config, **extra):
    d = config.to_dict()
    d.pop("cache", None)
    d.update(extra)
    return d


def write_snapshot(directory, config, **extra):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "resolved_config.json"
    path.write_text(json.dumps(resolved(config, **extra), indent=2, sort_keys=True) + "\n")
    return path
