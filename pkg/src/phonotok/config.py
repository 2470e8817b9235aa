"""Run configuration: one INI file with a section per module.

Example::

    [meta]
    schema_version = 1

    [gen]
    n_utterances = 1250
    noise_sigma = 0.1

    [train]
    alpha = 0.1

Every key is optional except ``meta.schema_version`` and
``gen.n_utterances``. Unknown sections or keys are rejected.
"""
from __future__ import annotations

import configparser
import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .diffkm import DiffKmConfig
from .errors import ConfigError
from .model import ModelConfig
from .synthgen import GenConfig, split_sizes
from .trainer import TrainConfig

SCHEMA_VERSION = 1
DEFAULT_ALPHAS = (0.0, 0.1, 0.3, 0.5, 1.0)


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    n_utterances: int = 1250
    split_ratios: tuple = (0.8, 0.1, 0.1)
    speaker_independent: bool = True
    hidden: int = 64
    d_z: int = 16
    k: int = 16
    diffkm: DiffKmConfig = field(default_factory=DiffKmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sweep_alphas: tuple = DEFAULT_ALPHAS
    sweep_seeds: int = 3
    probe_seed: int = 0
    seed: int = 0

    def model_config(self):
        g = self.gen
        return ModelConfig(d=g.d, hidden=self.hidden, d_z=self.d_z, v_c=g.v_c, d_s=g.d_s, k=self.k)

    def train_config(self):
        return replace(self.train, seed=self.seed)

    def validate(self):
        self.gen.validate()
        self.model_config().validate()
        self.diffkm.validate()
        self.train_config().validate()
        split_sizes(self.n_utterances, self.split_ratios)
        if self.sweep_seeds < 1:
            raise ConfigError("sweep.seeds must be >= 1")
        if list(self.sweep_alphas) != sorted(self.sweep_alphas) or any(not 0 <= a <= 1 for a in self.sweep_alphas):
            raise ConfigError("sweep.alphas must be sorted ascending within [0, 1]")
        return self

    def to_dict(self):
        return {
            "meta": {"schema_version": SCHEMA_VERSION},
            "gen": {
                **asdict(self.gen),
                "n_utterances": self.n_utterances,
                "split_ratios": list(self.split_ratios),
                "speaker_independent": self.speaker_independent,
            },
            "model": {"hidden": self.hidden, "d_z": self.d_z, "k": self.k},
            "diffkm": asdict(self.diffkm),
            "train": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self.train).items() if k != "seed"},
            "sweep": {"alphas": list(self.sweep_alphas), "seeds": self.sweep_seeds},
            "probe": {"seed": self.probe_seed},
            "run": {"seed": self.seed},
        }

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def data_hash(self):
        """Hash of everything that determines the generated dataset."""
        blob = json.dumps(self.to_dict()["gen"], sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump_config(cfg: RunConfig, path=None):
    lines = [f"# config_hash = {cfg.config_hash()}"]
    for section, values in cfg.to_dict().items():
        lines.append(f"\n[{section}]")
        lines.extend(f"{k} = {_fmt(v)}" for k, v in values.items())
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _coerce(raw, default, where):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if default and isinstance(default[0], float):
                return tuple(float(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _line_of(text, section, key):
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
        elif current == section and re.match(rf"\s*{re.escape(key)}\s*[=:]", line):
            return i
    return None


_TOP = {
    "gen": {"n_utterances": "n_utterances", "split_ratios": "split_ratios", "speaker_independent": "speaker_independent"},
    "model": {"hidden": "hidden", "d_z": "d_z", "k": "k"},
    "sweep": {"alphas": "sweep_alphas", "seeds": "sweep_seeds"},
    "probe": {"seed": "probe_seed"},
    "run": {"seed": "seed"},
}
_NESTED = {"gen": "gen", "diffkm": "diffkm", "train": "train"}
REQUIRED = (("meta", "schema_version"), ("gen", "n_utterances"))


def parse_config(text, source="<config>"):
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    for section, key in REQUIRED:
        if not parser.has_option(section, key):
            raise ConfigError(f"{source}: missing required key '{key}' in section [{section}]")
    version = parser.get("meta", "schema_version").strip()
    if version != str(SCHEMA_VERSION):
        raise ConfigError(f"{source}: unsupported schema_version {version}, expected {SCHEMA_VERSION}")

    cfg = RunConfig()
    nested = {name: asdict(getattr(cfg, attr)) for name, attr in _NESTED.items()}
    top = {}
    for section in parser.sections():
        allowed = set(_TOP.get(section, {})) | set(nested.get(section, {})) | ({"schema_version"} if section == "meta" else set())
        if section not in _TOP and section not in _NESTED and section != "meta":
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser.items(section):
            line = _line_of(text, section, key)
            where = f"{source}:{line} [{section}] {key}" if line else f"{source} [{section}] {key}"
            if key not in allowed or (section == "train" and key == "seed"):
                raise ConfigError(f"{where}: unknown key '{key}'")
            if section == "meta":
                continue
            if key in _TOP.get(section, {}):
                attr = _TOP[section][key]
                top[attr] = _coerce(raw, getattr(cfg, attr), where)
            else:
                nested[section][key] = _coerce(raw, nested[section][key], where)
    cfg = replace(
        cfg,
        gen=GenConfig(**nested["gen"]),
        diffkm=DiffKmConfig(**nested["diffkm"]),
        train=TrainConfig(**nested["train"]),
        **top,
    )
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def with_overrides(cfg: RunConfig, seed=None, alpha=None):
    if seed is not None:
        cfg = replace(cfg, seed=int(seed))
    if alpha is not None:
        cfg = replace(cfg, train=replace(cfg.train, alpha=float(alpha)))
    return cfg.validate()

