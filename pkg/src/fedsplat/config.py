"""TOML run configuration.

A run file has optional top-level `seed` and `output_dir` keys and one
table per module config::

    seed = 1
    output_dir = "runs/demo"

    [scene]        # SceneSpec
    camera_grid = 10

    [train]        # TrainConfig
    iterations = 500

    [merge]        # MergeConfig
    epochs = 5

    [federation]   # FederationConfig (scalar fields)
    n_clients = 6

Unknown tables or keys are errors. Every omitted key keeps the dataclass
default; `python -m fedsplat.cli config-defaults` prints them all.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .client import TrainConfig
from .federation import FederationConfig
from .merge import MergeConfig
from .scene import SceneSpec

SECTIONS = {"scene": SceneSpec, "train": TrainConfig, "merge": MergeConfig,
            "federation": FederationConfig}
_NESTED = {"train", "merge"}  # FederationConfig fields filled from their own tables


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    scene: SceneSpec = field(default_factory=SceneSpec)
    federation: FederationConfig = field(default_factory=FederationConfig)

    @property
    def train(self) -> TrainConfig:
        return self.federation.train

    @property
    def merge(self) -> MergeConfig:
        return self.federation.merge

    def with_seed(self, seed: int) -> "RunConfig":
        fed = replace(self.federation, seed=seed, train=replace(self.train, seed=seed),
                      merge=replace(self.merge, seed=seed))
        return replace(self, seed=seed, federation=fed)


def _build(cls, values: dict, section: str, skip=()):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = [k for k in values if k not in names or k in skip]
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    kwargs = {}
    for k, v in values.items():
        default = getattr(cls(), k) if k not in skip else None
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        if isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}]: {exc}") from exc


def parse_config(data: dict) -> RunConfig:
    top = {"seed", "output_dir"} | set(SECTIONS)
    unknown = [k for k in data if k not in top]
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    for name in SECTIONS:
        if name in data and not isinstance(data[name], dict):
            raise ConfigError(f"[{name}] must be a table")
    scene = _build(SceneSpec, data.get("scene", {}), "scene")
    train = _build(TrainConfig, data.get("train", {}), "train")
    merge = _build(MergeConfig, data.get("merge", {}), "merge")
    fed_values = dict(data.get("federation", {}))
    fed = _build(FederationConfig, fed_values, "federation", skip=_NESTED)
    fed = replace(fed, train=train, merge=merge)
    cfg = RunConfig(scene=scene, federation=fed, output_dir=str(data.get("output_dir", "runs/default")))
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed must be an integer")
    return cfg.with_seed(seed)


def load_config(path) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data)


def defaults_toml() -> str:
    """All defaults as a TOML document (documentation of every key)."""
    lines = ["seed = 0", 'output_dir = "runs/default"', ""]
    for name, cls in SECTIONS.items():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(cls):
            if name == "federation" and f.name in _NESTED:
                continue
            v = getattr(cls(), f.name)
            lines.append(f"{f.name} = {_toml_value(v)}" if v is not None else f"# {f.name} = (unset)")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return repr(v)
