"""
Run configuration: frozen dataclasses for each section of the JSON config file,
validated through the serializers in `precision.serializers`.
"""
import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .exceptions import ConfigError
from .serializers import (
    DataSpecSerializer,
    ModelSpecSerializer,
    RunConfigSerializer,
    SchedulerSpecSerializer,
    flatten_errors,
)

logger = logging.getLogger(__name__)


def _tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(_tuple(v) for v in value)
    return value


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


class _Section:
    """from_dict/to_dict shared by the section dataclasses."""

    # {kind: keys} for sections whose keys depend on `kind`
    kind_keys = None

    @classmethod
    def from_dict(cls, data):
        names = {f.name for f in fields(cls)}
        return cls(**{k: _tuple(v) for k, v in data.items() if k in names})

    def to_dict(self):
        data = {f.name: _plain(getattr(self, f.name)) for f in fields(self)}
        if self.kind_keys is not None:
            keep = set(self.kind_keys[data['kind']]) | {'kind'}
            data = {k: v for k, v in data.items() if k in keep}
        return data


@dataclass(frozen=True)
class ModelSpec(_Section):
    kind: str = 'mlp'
    widths: tuple = (2, 64, 64, 2)
    stem_channels: int = 16
    blocks: tuple = (1, 1, 1)
    classes: int = 10
    quantize_first_last: bool = False
    n: int = 8
    b_min: int = 3
    b_max: int = 8

    kind_keys = ModelSpecSerializer.kind_keys


@dataclass(frozen=True)
class DataSpec(_Section):
    kind: str = 'synthetic'
    classes: int = 2
    dims: int = 2
    per_class: int = 500
    radius: float = 3.0
    image_shape: Optional[tuple] = None
    seed: Optional[int] = None
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    test_labels: Optional[str] = None
    normalize: bool = True
    limit_train: Optional[int] = None
    limit_test: Optional[int] = None

    kind_keys = DataSpecSerializer.kind_keys


@dataclass(frozen=True)
class TrainSpec(_Section):
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    milestones: tuple = (0.5, 0.75)
    gamma: float = 0.1
    seed: int = 0
    output_dir: str = 'runs/default'
    freeze_precision_after_epoch: Optional[int] = None


@dataclass(frozen=True)
class SchedulerSpec(_Section):
    kind: str = 'learned'
    bits: Optional[int] = None
    k: Optional[int] = 10
    choices: tuple = (4, 6, 8)
    active_epochs: Optional[int] = None
    fallback_bits: int = 8
    per_layer: bool = False
    boundaries: Optional[tuple] = None
    stage_bits: Optional[tuple] = None
    b_start: Optional[int] = None
    b_end: Optional[int] = None
    num_stages: Optional[int] = None
    b_min: Optional[int] = None
    b_max: Optional[int] = None
    cycle_len: Optional[int] = None

    kind_keys = SchedulerSpecSerializer.kind_keys


@dataclass(frozen=True)
class PrecisionSpec(_Section):
    lr: float = 0.1
    t_frac: float = 0.6
    alpha: float = 1.0
    epsilon: float = 1e-12
    bw_bits: int = 8
    b_static: int = 8
    beta_init: float = 1.0
    scheduler: SchedulerSpec = field(default_factory=SchedulerSpec)

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        scheduler = SchedulerSpec.from_dict(data.pop('scheduler', {}))
        return replace(super().from_dict(data), scheduler=scheduler)

    def to_dict(self):
        data = {f.name: _plain(getattr(self, f.name)) for f in fields(self) if f.name != 'scheduler'}
        data['scheduler'] = self.scheduler.to_dict()
        return data


SECTIONS = {
    'model': ModelSpec,
    'data': DataSpec,
    'train': TrainSpec,
    'precision': PrecisionSpec,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)
    train: TrainSpec = field(default_factory=TrainSpec)
    precision: PrecisionSpec = field(default_factory=PrecisionSpec)

    @classmethod
    def from_dict(cls, validated):
        return cls(**{name: spec.from_dict(validated.get(name, {})) for name, spec in SECTIONS.items()})

    def to_dict(self):
        return {name: getattr(self, name).to_dict() for name in SECTIONS}

    @property
    def output_dir(self):
        return Path(self.train.output_dir)

    def with_output_dir(self, output_dir):
        return replace(self, train=replace(self.train, output_dir=str(output_dir)))

    def with_scheduler(self, **changes):
        scheduler = SchedulerSpec.from_dict({**asdict(self.precision.scheduler), **changes})
        return replace(self, precision=replace(self.precision, scheduler=scheduler))


def validate_config_dict(data, source='config') -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be a JSON object", paths=['config'])
    serializer = RunConfigSerializer(data=data)
    if not serializer.is_valid():
        lines = flatten_errors(serializer.errors)
        raise ConfigError(f"{source} is invalid:\n  " + "\n  ".join(lines), paths=lines)
    return RunConfig.from_dict(serializer.validated_data)


def parse_and_validate(path) -> RunConfig:
    """Load a JSON config file and validate every section strictly."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", paths=['config']) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}",
                          paths=['config']) from exc
    cfg = validate_config_dict(data, source=str(path))
    logger.debug(f"Loaded config {path}: {cfg.to_dict()}")
    return cfg


def get_dotted(data, path):
    node = data
    for key in path.split('.'):
        if not isinstance(node, dict) or key not in node:
            raise ConfigError(f"config has no parameter '{path}'", paths=[path])
        node = node[key]
    return node


def set_dotted(data, path, value):
    """Return a copy of `data` with the numeric parameter at `path` replaced."""
    current = get_dotted(data, path)
    if isinstance(current, bool) or not isinstance(current, (int, float)):
        raise ConfigError(f"parameter '{path}' is not numeric (current value {current!r})", paths=[path])
    if isinstance(current, int) and float(value).is_integer():
        value = int(value)
    updated = copy.deepcopy(data)
    *parents, leaf = path.split('.')
    node = updated
    for key in parents:
        node = node[key]
    node[leaf] = value
    return updated
