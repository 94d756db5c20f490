"""Sectioned INI experiment configuration.

Every section maps onto a dataclass; keys are the dataclass field names.
Parsing fills defaults, converts types, and rejects unknown sections and
keys.  ``serialize`` writes every value out so a run can be replayed from
its config echo alone.
"""

from __future__ import annotations

import configparser
import dataclasses
import math
from dataclasses import dataclass, field, fields

from .errors import ConfigError

ALGORITHMS = ("adds", "fedavg", "feddrop", "centralized")
IMPORTANCE_KINDS = ("slim", "lrp", "fc_activation")
LAMBDA_MODES = ("jsd", "jsd_minmax", "fixed")


@dataclass
class ExperimentSection:
    algorithm: str = ""
    seed: int = 0
    rounds: int = 200
    workers: int = 1


@dataclass
class FederationSection:
    clients: int = 20
    participation: float = 0.3
    test_client_fraction: float = 0.2
    local_test_fraction: float = 0.2


@dataclass
class TrainingSection:
    local_epochs: int = 3
    batch_size: int = 32
    lr_weights: float = 0.05
    lr_alpha: float = 0.01
    val_fraction: float = 0.1
    val_bn_mode: str = "eval"


@dataclass
class ModelSection:
    hidden: tuple[int, ...] = (128, 128)
    importance: str = "slim"


@dataclass
class SamplingSection:
    epsilon_init: float = 1.0
    epsilon_decay: float = 0.98
    alpha_init: float = 1.0
    alpha_min: float = 0.05
    root_tolerance: float = 1e-8
    lambda_mode: str = "jsd"
    lambda_value: float = 0.5
    freeze_alpha: bool = False


@dataclass
class FedDropSection:
    keep_fraction: float = 0.25


@dataclass
class DataSection:
    source: str = ""
    path: str = ""
    num_classes: int = 10
    samples_per_class: int = 200
    dim: int = 32
    spread: float = 1.0
    center_scale: float = 1.0


@dataclass
class PartitionSection:
    method: str = "dirichlet"
    concentration: float = 0.3
    min_samples: int = 20
    shards_per_client: int = 2


@dataclass
class OutputSection:
    dir: str = "runs"


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    federation: FederationSection = field(default_factory=FederationSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    model: ModelSection = field(default_factory=ModelSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    feddrop: FedDropSection = field(default_factory=FedDropSection)
    data: DataSection = field(default_factory=DataSection)
    partition: PartitionSection = field(default_factory=PartitionSection)
    output: OutputSection = field(default_factory=OutputSection)

    # shortcuts for the most used knobs
    @property
    def algorithm(self) -> str:
        return self.experiment.algorithm

    @property
    def seed(self) -> int:
        return self.experiment.seed

    @property
    def rounds(self) -> int:
        return self.experiment.rounds

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some keys changed, e.g. ``replace(experiment={"seed": 3})``; re-validated."""
        new = {}
        for f in fields(self):
            current = getattr(self, f.name)
            new[f.name] = dataclasses.replace(current, **sections.pop(f.name, {}))
        if sections:
            raise ConfigError("unknown section", next(iter(sections)))
        cfg = ExperimentConfig(**new)
        validate(cfg)
        return cfg


def _convert(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.replace(" ", "").split(",") if v)
    except ValueError as exc:
        raise ConfigError(str(exc), key) from exc
    return raw


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc).splitlines()[0], "syntax") from exc
    cfg = ExperimentConfig()
    known = {f.name for f in fields(cfg)}
    for section in parser.sections():
        if section not in known:
            raise ConfigError("unknown section", section)
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        for key, raw in parser.items(section):
            qualified = f"{section}.{key}"
            if key not in names:
                raise ConfigError("unknown key", qualified)
            setattr(target, key, _convert(qualified, raw, getattr(target, key)))
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def serialize(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        lines.append(f"[{f.name}]")
        section = getattr(cfg, f.name)
        for sf in fields(section):
            lines.append(f"{sf.name} = {_format(getattr(section, sf.name))}")
        lines.append("")
    return "\n".join(lines)


def _require(cond: bool, key: str, msg: str) -> None:
    if not cond:
        raise ConfigError(msg, key)


def _in_unit(x) -> bool:
    return math.isfinite(x) and 0 < x < 1


def validate(cfg: ExperimentConfig) -> None:
    e, f, t, m, s, d, p = (
        cfg.experiment, cfg.federation, cfg.training, cfg.model, cfg.sampling, cfg.data, cfg.partition,
    )
    _require(e.algorithm in ALGORITHMS, "experiment.algorithm", f"must be one of {', '.join(ALGORITHMS)}")
    _require(e.rounds >= 0, "experiment.rounds", "must be >= 0")
    _require(e.workers >= 1, "experiment.workers", "must be >= 1")
    _require(f.clients >= 1, "federation.clients", "must be >= 1")
    _require(0 < f.participation <= 1, "federation.participation", "must be in (0, 1]")
    _require(0 <= f.test_client_fraction < 1, "federation.test_client_fraction", "must be in [0, 1)")
    _require(_in_unit(f.local_test_fraction), "federation.local_test_fraction", "must be in (0, 1)")
    _require(t.local_epochs >= 1, "training.local_epochs", "must be >= 1")
    _require(t.batch_size >= 1, "training.batch_size", "must be >= 1")
    _require(t.lr_weights > 0, "training.lr_weights", "must be > 0")
    _require(t.lr_alpha > 0, "training.lr_alpha", "must be > 0")
    _require(_in_unit(t.val_fraction), "training.val_fraction", "must be in (0, 1)")
    _require(t.val_bn_mode in ("eval", "train"), "training.val_bn_mode", "must be eval or train")
    _require(len(m.hidden) >= 1 and min(m.hidden) >= 1, "model.hidden", "need at least one layer, sizes >= 1")
    _require(m.importance in IMPORTANCE_KINDS, "model.importance", f"must be one of {', '.join(IMPORTANCE_KINDS)}")
    _require(s.epsilon_init > 0, "sampling.epsilon_init", "must be > 0")
    _require(0 < s.epsilon_decay <= 1, "sampling.epsilon_decay", "must be in (0, 1]")
    _require(_in_unit(s.alpha_min), "sampling.alpha_min", "must be in (0, 1)")
    _require(s.alpha_min <= s.alpha_init <= 1, "sampling.alpha_init", "must be in [alpha_min, 1]")
    _require(s.root_tolerance > 0, "sampling.root_tolerance", "must be > 0")
    _require(s.lambda_mode in LAMBDA_MODES, "sampling.lambda_mode", f"must be one of {', '.join(LAMBDA_MODES)}")
    _require(s.lambda_value >= 0, "sampling.lambda_value", "must be >= 0")
    _require(0 < cfg.feddrop.keep_fraction <= 1, "feddrop.keep_fraction", "must be in (0, 1]")
    _require(d.source in ("blobs", "csv"), "data.source", "must be blobs or csv")
    if d.source == "csv":
        _require(bool(d.path), "data.path", "required when source = csv")
    else:
        for key in ("num_classes", "samples_per_class", "dim"):
            _require(getattr(d, key) >= 1, f"data.{key}", "must be >= 1")
        _require(d.spread > 0, "data.spread", "must be > 0")
        _require(d.center_scale > 0, "data.center_scale", "must be > 0")
    _require(p.method in ("dirichlet", "shards"), "partition.method", "must be dirichlet or shards")
    _require(p.concentration > 0, "partition.concentration", "must be > 0")
    _require(p.min_samples >= 1, "partition.min_samples", "must be >= 1")
    _require(p.shards_per_client >= 1, "partition.shards_per_client", "must be >= 1")
