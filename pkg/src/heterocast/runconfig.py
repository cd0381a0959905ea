"""Flat key=value run configuration.

One key per line, ``#`` starts a comment, unknown keys are errors.  Every
command writes a resolved echo next to its outputs; reloading the echo yields
an identical configuration, which makes any run reproducible from its echo
plus the input files.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigError
from .model import ModelConfig
from .synth import SynthSpec
from .training import TrainSettings


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int_tuple(raw: str) -> tuple[int, ...]:
    return tuple(int(part) for part in raw.split(",") if part.strip())


def _parse_delta(raw: str):
    raw = raw.strip()
    return raw if raw == "auto" else float(raw)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainSettings = field(default_factory=TrainSettings)
    synth: SynthSpec = field(default_factory=SynthSpec)
    series_csv: str = ""
    distance_csv: str = ""
    delta: float | str = "auto"
    noise_variance: float = 0.0
    noise_targets: bool = True
    seed: int = 0
    explicit: set = field(default_factory=set, repr=False, compare=False)

    def series_paths(self) -> list[str]:
        return [p.strip() for p in self.series_csv.split(",") if p.strip()]

    def apply_manifest(self, manifest: dict) -> None:
        """Adopt data-derived dimensions from a prepared-dataset manifest.

        Keys the config file set explicitly must agree with the manifest.
        """
        pairs = {
            "n_nodes": "n_nodes",
            "in_features": "n_features",
            "input_len": "input_len",
            "horizon": "horizon",
            "n_slots": "n_slots",
        }
        for cfg_key, man_key in pairs.items():
            value = int(manifest[man_key])
            if cfg_key in self.explicit and getattr(self.model, cfg_key) != value:
                raise ConfigError(
                    f"config sets {cfg_key}={getattr(self.model, cfg_key)} but the "
                    f"prepared dataset has {man_key}={value}"
                )
            setattr(self.model, cfg_key, value)


# key -> (section attribute, field name, parser); section "" targets RunConfig
_REGISTRY: dict[str, tuple[str, str, callable]] = {}


def _register_dataclass(section: str, cls, skip=(), prefix="") -> None:
    parsers = {int: int, float: float, bool: _parse_bool, str: str}
    for f in fields(cls):
        if f.name in skip:
            continue
        if f.name == "dilation_pattern":
            parser = _parse_int_tuple
        else:
            parser = parsers.get(f.type if isinstance(f.type, type) else None)
            if parser is None:
                # dataclass fields carry string annotations under
                # `from __future__ import annotations`
                by_name = {"int": int, "float": float, "bool": _parse_bool, "str": str}
                parser = by_name.get(str(f.type))
        if parser is None:
            continue
        _REGISTRY[prefix + f.name] = (section, f.name, parser)


_register_dataclass("model", ModelConfig, skip=("seed",))
_register_dataclass("train", TrainSettings, skip=("seed",))
# the synth series shares the model's period length via the plain n_slots key
_register_dataclass(
    "synth", SynthSpec, skip=("seed", "planted", "n_slots"), prefix="synth_"
)
_REGISTRY["series_csv"] = ("", "series_csv", str)
_REGISTRY["distance_csv"] = ("", "distance_csv", str)
_REGISTRY["delta"] = ("", "delta", _parse_delta)
_REGISTRY["noise_variance"] = ("", "noise_variance", float)
_REGISTRY["noise_targets"] = ("", "noise_targets", _parse_bool)
_REGISTRY["seed"] = ("", "seed", int)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    cfg = RunConfig()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}: line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _REGISTRY:
            raise ConfigError(f"{path}: line {lineno}: unknown key {key!r}")
        section, name, parser = _REGISTRY[key]
        try:
            value = parser(raw)
        except ValueError as exc:
            raise ConfigError(f"{path}: line {lineno}: bad value for {key}: {exc}") from None
        target = cfg if section == "" else getattr(cfg, section)
        setattr(target, name, value)
        cfg.explicit.add(key)
    _sync_seed(cfg)
    return cfg


def _sync_seed(cfg: RunConfig) -> None:
    cfg.model.seed = cfg.seed
    cfg.train.seed = cfg.seed
    cfg.synth.seed = cfg.seed


def set_seed(cfg: RunConfig, seed: int) -> None:
    cfg.seed = int(seed)
    cfg.explicit.add("seed")
    _sync_seed(cfg)


def write_echo(path: str | Path, cfg: RunConfig) -> Path:
    """Write every resolved key so the run can be reproduced exactly."""
    path = Path(path)
    lines = []
    for key in sorted(_REGISTRY):
        section, name, _ = _REGISTRY[key]
        target = cfg if section == "" else getattr(cfg, section)
        lines.append(f"{key}={_fmt(getattr(target, name))}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
