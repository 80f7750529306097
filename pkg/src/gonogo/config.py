"""Run configuration: one INI file feeding every module's dataclass.

Sections map one-to-one onto module configs.  Values the modules derive
from context (image size, per-stage seeds, the scale a GAN trains at) are
not separate keys; they come from [run] and [seeds] so a file cannot
contradict itself.  Loading is strict: unknown sections or keys fail, and
every value passes through the owning dataclass, so a config that loads
is a config every module will accept.
"""

import configparser
from dataclasses import dataclass, fields

from .costmap import MissionConfig
from .gan import GanConfig, get_scale
from .inversion import InversionConfig
from .scenes import LabelingConfig
from .scoring import FcTrainConfig, ScoringConfig


class ConfigError(ValueError):
    """Malformed or out-of-invariant configuration file."""


@dataclass
class Paths:
    data: str = "data"
    models: str = "models"
    reports: str = "reports"


@dataclass
class Seeds:
    data: int = 7
    gan: int = 1
    inversion: int = 2
    fc: int = 3
    eval: int = 4

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"seed {f.name} must be >= 0")


@dataclass
class DataParams:
    """Corpus size knobs for gen-data."""

    n_traces: int = 200
    steps: int = 40
    n_pos: int = 400
    n_neg: int = 400
    flip: bool = True

    def __post_init__(self):
        for name in ("n_traces", "steps", "n_pos", "n_neg"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass
class RunConfig:
    scale: str = "desk"
    paths: Paths = None
    seeds: Seeds = None
    data: DataParams = None
    labeling: LabelingConfig = None
    gan: GanConfig = None
    inversion: InversionConfig = None
    scoring: ScoringConfig = None
    fc: FcTrainConfig = None
    mission: MissionConfig = None

    def __post_init__(self):
        get_scale(self.scale)
        if self.paths is None:
            self.paths = Paths()
        if self.seeds is None:
            self.seeds = Seeds()
        if self.data is None:
            self.data = DataParams()
        if self.labeling is None:
            self.labeling = LabelingConfig()
        if self.gan is None:
            self.gan = GanConfig(scale=self.scale, seed=self.seeds.gan)
        if self.inversion is None:
            self.inversion = InversionConfig(seed=self.seeds.inversion)
        if self.scoring is None:
            self.scoring = ScoringConfig()
        if self.fc is None:
            self.fc = FcTrainConfig(seed=self.seeds.fc)
        if self.mission is None:
            self.mission = MissionConfig(hw=get_scale(self.scale).hw)

    @property
    def hw(self):
        return get_scale(self.scale).hw


# section -> (dataclass, keys the loader injects itself and must not appear)
_SECTIONS = {
    "run": (None, ()),
    "paths": (Paths, ()),
    "seeds": (Seeds, ()),
    "data": (DataParams, ()),
    "labeling": (LabelingConfig, ()),
    "gan": (GanConfig, ("scale", "seed")),
    "inversion": (InversionConfig, ("seed",)),
    "scoring": (ScoringConfig, ()),
    "fc": (FcTrainConfig, ("seed",)),
    "costmap": (MissionConfig, ("hw",)),
}

_BOOL = {"true": True, "yes": True, "on": True, "1": True,
         "false": False, "no": False, "off": False, "0": False}


def _field_types(cls, hidden):
    return {f.name: f.type for f in fields(cls) if f.name not in hidden}


def _parse(raw, typ, where):
    try:
        if typ is bool:
            if raw.strip().lower() not in _BOOL:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL[raw.strip().lower()]
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw.strip()
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from None


def _read_ini(path):
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    except configparser.Error as e:
        raise ConfigError(f"{path}: {e}") from None
    if cp.defaults():
        raise ConfigError(f"{path}: [DEFAULT] section is not supported")
    return cp


def load_config(path) -> RunConfig:
    cp = _read_ini(path)
    unknown = [s for s in cp.sections() if s not in _SECTIONS]
    if unknown:
        raise ConfigError(f"{path}: unknown section(s) {unknown}; "
                          f"expected a subset of {sorted(_SECTIONS)}")

    overrides = {}
    for section in cp.sections():
        cls, hidden = _SECTIONS[section]
        allowed = {"scale": str} if cls is None else _field_types(cls, hidden)
        got = {}
        for key, raw in cp[section].items():
            if key not in allowed:
                raise ConfigError(f"{path}: [{section}] has no key {key!r}; "
                                  f"expected a subset of {sorted(allowed)}")
            got[key] = _parse(raw, allowed[key], f"{path}: [{section}] {key}")
        overrides[section] = got

    def build(section, cls, **injected):
        try:
            return cls(**injected, **overrides.get(section, {}))
        except (ValueError, KeyError) as e:
            raise ConfigError(f"{path}: [{section}]: {e}") from None

    scale = overrides.get("run", {}).get("scale", "desk")
    try:
        get_scale(scale)
    except (ValueError, KeyError) as e:
        raise ConfigError(f"{path}: [run] scale: {e}") from None
    seeds = build("seeds", Seeds)
    return RunConfig(
        scale=scale,
        paths=build("paths", Paths),
        seeds=seeds,
        data=build("data", DataParams),
        labeling=build("labeling", LabelingConfig),
        gan=build("gan", GanConfig, scale=scale, seed=seeds.gan),
        inversion=build("inversion", InversionConfig, seed=seeds.inversion),
        scoring=build("scoring", ScoringConfig),
        fc=build("fc", FcTrainConfig, seed=seeds.fc),
        mission=build("costmap", MissionConfig, hw=get_scale(scale).hw),
    )


def default_config(scale="desk") -> RunConfig:
    return RunConfig(scale=scale)


def _render(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def write_default_config(path, scale="desk"):
    """Write a fully populated INI for `scale`; loads back to default_config."""
    cfg = default_config(scale)
    instances = {"paths": cfg.paths, "seeds": cfg.seeds, "data": cfg.data,
                 "labeling": cfg.labeling, "gan": cfg.gan,
                 "inversion": cfg.inversion, "scoring": cfg.scoring,
                 "fc": cfg.fc, "costmap": cfg.mission}
    lines = ["[run]", f"scale = {cfg.scale}", ""]
    for section, obj in instances.items():
        hidden = _SECTIONS[section][1]
        lines.append(f"[{section}]")
        for f in fields(obj):
            if f.name not in hidden:
                lines.append(f"{f.name} = {_render(getattr(obj, f.name))}")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    return path
