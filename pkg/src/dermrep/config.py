"""``key = value`` run configuration with dotted section keys.

Example::

    # global
    seed = 3
    folds = 5
    synth.n_train = 400
    model.lr = 0.002
    model.blocks = 8x2, 16x2, 32x2
    sweep.counts = 0, 20, 80
"""
from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .gda import GanConfig
from .model import BackboneConfig
from .synthdata import ConfigError, ConfoundConfig


@dataclass
class SynthSection:
    n_train: int = 400
    n_test: int = 0
    positive_rate: float = 0.5
    rho: float = 0.8
    hair_rate: float = 0.5
    test_positive_rate: float = -1.0
    size: int = 64
    max_arcs: int = 6

    def confound_config(self, seed: int) -> ConfoundConfig:
        tpr = None if self.test_positive_rate < 0 else self.test_positive_rate
        return ConfoundConfig(self.n_train, self.n_test, self.positive_rate, self.rho, self.hair_rate,
                              tpr, self.size, self.max_arcs, seed)


@dataclass
class GdaSection:
    synthetic_count: int = 200
    enabled: bool = True


@dataclass
class SweepSection:
    counts: tuple[int, ...] = ()


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    folds: int = 5
    jobs: int = 1
    manifest: str = ""
    synth: SynthSection = field(default_factory=SynthSection)
    gan: GanConfig = field(default_factory=GanConfig)
    gda: GdaSection = field(default_factory=GdaSection)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    sweep: SweepSection = field(default_factory=SweepSection)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def manifest_path(self) -> Path:
        return Path(self.manifest) if self.manifest else self.out_dir / "data" / "manifest.csv"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["model"] = self.model.to_dict()
        d["sweep"]["counts"] = list(self.sweep.counts)
        return d


_SECTIONS = ("synth", "gan", "gda", "model", "sweep")


def _parse_value(raw: str, tp, key: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if origin is tuple:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            inner = typing.get_args(tp)[0]
            if typing.get_origin(inner) is tuple:
                # "8x2, 16x2" -> ((8, 2), (16, 2))
                return tuple(tuple(int(v) for v in item.lower().split("x")) for item in items)
            return tuple(int(s) for s in items)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _field_types(obj) -> dict[str, typing.Any]:
    hints = typing.get_type_hints(type(obj))
    return {f.name: hints[f.name] for f in fields(obj)}


def set_key(cfg: RunConfig, key: str, raw: str) -> None:
    """Validate and assign one dotted key; unknown keys raise ConfigError."""
    parts = key.strip().split(".")
    if len(parts) == 1:
        target, name = cfg, parts[0]
        if name in _SECTIONS:
            raise ConfigError(f"{key}: is a section, not a key")
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        target, name = getattr(cfg, parts[0]), parts[1]
        if name == "seed":
            raise ConfigError(f"{key}: section seeds follow the global 'seed' key")
    else:
        raise ConfigError(f"unknown config key {key!r}")
    hints = _field_types(target)
    if name not in hints:
        raise ConfigError(f"unknown config key {key!r}")
    tp = hints[name]
    if typing.get_origin(tp) in (typing.Union, types.UnionType):
        tp = next(a for a in typing.get_args(tp) if a is not type(None))
    setattr(target, name, _parse_value(raw, tp, key))


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        try:
            set_key(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"config line {lineno}: {exc}") from None
    return validate(cfg)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text(encoding="utf-8"))


def validate(cfg: RunConfig) -> RunConfig:
    """Re-run the dataclass checks after string assignment; propagate the global seed."""
    cfg.model.seed = cfg.seed
    cfg.gan.seed = cfg.seed
    try:
        cfg.model = BackboneConfig(**{f.name: getattr(cfg.model, f.name) for f in fields(cfg.model)})
        cfg.gan = GanConfig(**{f.name: getattr(cfg.gan, f.name) for f in fields(cfg.gan)})
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.folds < 2:
        raise ConfigError(f"folds must be >= 2, got {cfg.folds}")
    if cfg.jobs < 1:
        raise ConfigError(f"jobs must be >= 1, got {cfg.jobs}")
    if cfg.gda.synthetic_count < 0:
        raise ConfigError("gda.synthetic_count must be >= 0")
    return cfg
