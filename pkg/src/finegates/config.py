"""INI run configuration: ``[model]``, ``[train]`` and ``[data]`` sections.

Keys mirror the ``ModelConfig``, ``TrainConfig`` and ``DataConfig`` fields.
``lambda`` is accepted as an alias of ``lam``. A resolved configuration is
written back as ``manifest.txt`` with every default filled in, and a manifest
is itself a valid config file.
"""

import configparser
import dataclasses
import os
import subprocess
from dataclasses import dataclass, field

from . import __version__
from .data import PlantedTaskSpec
from .errors import ConfigError
from .training import TrainConfig
from .transformer import ModelConfig

SEED_ENV = "FINEGATES_SEED"
ALIASES = {"train": {"lambda": "lam"}}
RUN_SECTION = "run"


@dataclass
class DataConfig:
    source: str = "planted"
    # planted task
    vocab_size: int = 256
    seq_len: int = 8
    num_classes: int = 2
    informative_dims: tuple = tuple(range(16))
    noise_rate: float = 0.0
    num_samples: int = 5000
    seed: int = 0
    margin: float = 0.05
    eval_fraction: float = 0.2
    # text files
    train_path: str = ""
    eval_path: str = ""
    max_samples: int = 0

    def validate(self):
        if self.source not in ("planted", "tsv"):
            raise ConfigError(f"data source must be 'planted' or 'tsv', got {self.source!r}")
        if self.source == "tsv" and not self.train_path:
            raise ConfigError("data source 'tsv' needs train_path")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigError("eval_fraction must lie in (0, 1)")
        return self

    def planted_spec(self, model_dim):
        return PlantedTaskSpec(
            vocab_size=self.vocab_size, seq_len=self.seq_len, num_classes=self.num_classes,
            model_dim=model_dim, informative_dims=tuple(self.informative_dims), noise_rate=self.noise_rate,
            num_samples=self.num_samples, seed=self.seed, margin=self.margin,
        )


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def sections(self):
        return {"model": self.model, "train": self.train, "data": self.data}


def parse_dims(text):
    """``"0-15"``, ``"0,2,5"`` or a mix such as ``"0-3,8"``."""
    dims = []
    for part in str(text).replace(" ", "").split(","):
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            dims.extend(range(int(lo), int(hi) + 1))
        else:
            dims.append(int(part))
    return tuple(dims)


def format_dims(dims):
    return ",".join(str(int(d)) for d in dims)


def _convert(section, key, raw, default):
    try:
        if isinstance(default, bool):
            lowered = raw.strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(raw)
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return parse_dims(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {raw!r} is not a valid {type(default).__name__}") from None


def apply(cfg, section, key, raw):
    target = cfg.sections().get(section)
    if target is None:
        raise ConfigError(f"unknown config section [{section}]")
    key = ALIASES.get(section, {}).get(key, key)
    names = {f.name for f in dataclasses.fields(target)}
    if key not in names:
        raise ConfigError(f"unknown config key '{key}' in [{section}]")
    setattr(target, key, _convert(section, key, raw, getattr(type(target)(), key)))


def load_config(path=None, overrides=(), seed=None, env=None):
    """Resolve a RunConfig from an INI file, ``section.key=value`` overrides, the env seed and ``seed``."""
    cfg = RunConfig()
    if path is not None:
        if not os.path.isfile(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section == RUN_SECTION:
                continue
            for key, raw in parser.items(section):
                apply(cfg, section, key, raw)
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        cfg.train.seed = _convert("env", SEED_ENV, env[SEED_ENV], 0)
    for item in overrides:
        name, sep, raw = item.partition("=")
        section, dot, key = name.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        apply(cfg, section, key.strip(), raw)
    if seed is not None:
        cfg.train.seed = int(seed)
    cfg.model.validate()
    cfg.train.validate()
    cfg.data.validate()
    return cfg


def version_string():
    """Package version, plus ``git describe`` output when run from a checkout."""
    here = os.path.dirname(os.path.abspath(__file__))
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return format_dims(value)
    return str(value)


def manifest_text(cfg, extra=None):
    """Every field of every section, defaults included, in a re-loadable INI layout."""
    lines = []
    for name, obj in cfg.sections().items():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines.append("")
    lines.append(f"[{RUN_SECTION}]")
    lines.append(f"version = {version_string()}")
    lines.append(f"seed = {cfg.train.seed}")
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
