""" Run configuration: a tree of frozen dataclasses.

    Defaults are the full-size published settings. The 'desk' profile, the
    CLI default, scales some of them down; those keys are listed in
    DESK_OVERRIDES and marked as such by RunConfig.describe().
"""

import dataclasses
import json
import pathlib
import types
import typing

from .events import REPRESENTATIONS, channels

import selftest
test = selftest.get_tester(__name__)


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class SensorConfig:
    width: int = 346
    height: int = 260
    threshold: float = 0.15
    frame_period_us: int = 40_000
    sim_step_us: int = 1_000
    exposure_us: int = 20_000
    exposure_samples: int = 8
    jitter_us: float = 0.0
    noise_sigma: float = 0.02
    background_rate_hz: float = 0.0
    refractory_us: int = 0
    threshold_mismatch: float = 0.0


@dataclasses.dataclass(frozen=True)
class RepresentationConfig:
    kind: str = 'event_image'
    voxel_bins: int = 5
    tau: float = 10_000.0
    normalize: bool = False
    window_us: int = 40_000


@dataclasses.dataclass(frozen=True)
class BackboneConfig:
    frame_channels: int = 1
    widths: tuple = (64, 128, 256)
    d: int = 256

    @property
    def stride(self):
        return 2 ** len(self.widths)


@dataclasses.dataclass(frozen=True)
class AttentionConfig:
    heads: int = 8
    points: int = 4
    aggregation: int = 9
    encoder_layers: int = 6
    decoder_layers: int = 6
    dropout: float = 0.1
    ffn_ratio: int = 4
    temporal_norm: str = 'joint'
    offset_spread: float = 0.05


@dataclasses.dataclass(frozen=True)
class FusionConfig:
    mode: str = 'attention'
    modality: str = 'both'
    cache_capacity: int = 2


@dataclasses.dataclass(frozen=True)
class DecoderConfig:
    queries: int = 300
    classes: int = 3


@dataclasses.dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    decay_epoch: int = 20
    decay_factor: float = 0.1


@dataclasses.dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 25
    steps_per_epoch: int = 1000
    seed: int = 0
    window: int | None = None
    loss_all_timestamps: bool = False
    checkpoint_every: int = 500
    cls_weight: float = 2.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    resize: bool = True
    resize_min: int = 256
    resize_max: int = 576
    resize_step: int = 32


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    small_height: float = 20.0
    large_height: float = 80.0
    confidence: float = 0.5
    cadence_hz: float = 25.0
    frame_rate: float = 25.0
    resize: int | None = None


@dataclasses.dataclass(frozen=True)
class PathsConfig:
    dataset: str = 'data/desk-small'
    out: str = 'runs/latest'


SECTIONS = {
    'sensor': SensorConfig,
    'representation': RepresentationConfig,
    'backbone': BackboneConfig,
    'attention': AttentionConfig,
    'fusion': FusionConfig,
    'decoder': DecoderConfig,
    'optimizer': OptimizerConfig,
    'training': TrainingConfig,
    'eval': EvalConfig,
    'paths': PathsConfig,
}


DESK_OVERRIDES = {
    'sensor.width': 128,
    'sensor.height': 96,
    'backbone.widths': (16, 32, 64),
    'backbone.d': 64,
    'attention.encoder_layers': 2,
    'attention.decoder_layers': 2,
    'decoder.queries': 25,
    'training.steps_per_epoch': 200,
    'training.resize': False,
}


@dataclasses.dataclass(frozen=True)
class RunConfig:
    sensor: SensorConfig = SensorConfig()
    representation: RepresentationConfig = RepresentationConfig()
    backbone: BackboneConfig = BackboneConfig()
    attention: AttentionConfig = AttentionConfig()
    fusion: FusionConfig = FusionConfig()
    decoder: DecoderConfig = DecoderConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    training: TrainingConfig = TrainingConfig()
    eval: EvalConfig = EvalConfig()
    paths: PathsConfig = PathsConfig()
    profile: str = 'full'

    @property
    def event_channels(self):
        return channels(self.representation.kind, self.representation.voxel_bins)

    @property
    def history(self):
        """ Number of prior maps temporal attention reads. """
        return self.attention.aggregation - 1

    @property
    def window(self):
        return self.training.window or self.attention.aggregation

    def get(self, dotted):
        section, key = _split_key(dotted)
        return getattr(getattr(self, section), key)

    def with_values(self, values):
        """ Copy with {'section.key': value} applied; values are coerced to the field types. """
        config = self
        for dotted, value in values.items():
            section, key = _split_key(dotted)
            current = getattr(config, section)
            field = {f.name: f for f in dataclasses.fields(current)}[key]
            value = coerce(value, field.type, dotted)
            config = dataclasses.replace(config, **{section: dataclasses.replace(current, **{key: value})})
        return config

    def describe(self):
        lines = []
        for section in SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                dotted = f"{section}.{f.name}"
                mark = "  [desk-override]" if self.profile == 'desk' and dotted in DESK_OVERRIDES else ""
                lines.append(f"{dotted} = {self.get(dotted)!r}{mark}")
        return '\n'.join(lines)

    def to_dict(self):
        return {'profile': self.profile, **{s: dataclasses.asdict(getattr(self, s)) for s in SECTIONS}}

    def validate(self):
        s, a, b, r = self.sensor, self.attention, self.backbone, self.representation
        checks = [
            (s.threshold > 0, f"sensor.threshold must be positive, got {s.threshold}"),
            (0 < s.sim_step_us < s.frame_period_us, "sensor.sim_step_us must be positive and below sensor.frame_period_us"),
            (s.width > 0 and s.height > 0, "sensor resolution must be positive"),
            (r.kind in REPRESENTATIONS, f"representation.kind must be one of {', '.join(REPRESENTATIONS)}, got {r.kind!r}"),
            (r.voxel_bins >= 1, "representation.voxel_bins must be at least 1"),
            (r.tau > 0, "representation.tau must be positive"),
            (r.window_us > 0, "representation.window_us must be positive"),
            (len(b.widths) >= 1, "backbone.widths needs at least one stage"),
            (b.d % a.heads == 0, f"backbone.d {b.d} must be divisible by attention.heads {a.heads}"),
            (b.d % 4 == 0, f"backbone.d {b.d} must be divisible by 4"),
            (a.points >= 1, "attention.points must be at least 1"),
            (a.aggregation >= 1, "attention.aggregation must be at least 1"),
            (a.encoder_layers >= 1 and a.decoder_layers >= 1, "attention layer counts must be at least 1"),
            (0 <= a.dropout < 1, f"attention.dropout must be in [0, 1), got {a.dropout}"),
            (a.temporal_norm in ('joint', 'per_frame'), f"attention.temporal_norm must be joint or per_frame, got {a.temporal_norm!r}"),
            (self.fusion.mode in ('attention', 'averaging', 'concatenation'), f"fusion.mode unknown: {self.fusion.mode!r}"),
            (self.fusion.modality in ('both', 'frames', 'events'), f"fusion.modality unknown: {self.fusion.modality!r}"),
            (self.fusion.cache_capacity >= 1, "fusion.cache_capacity must be at least 1"),
            (self.decoder.queries >= 1 and self.decoder.classes >= 1, "decoder.queries and decoder.classes must be at least 1"),
            (self.optimizer.lr > 0, "optimizer.lr must be positive"),
            (self.training.steps_per_epoch >= 1, "training.steps_per_epoch must be at least 1"),
            (self.window >= 1, "training.window must be at least 1"),
            (_increasing(self.eval.iou_thresholds), "eval.iou_thresholds must be strictly increasing within (0, 1)"),
            (0 <= self.eval.confidence <= 1, "eval.confidence must be in [0, 1]"),
            (self.eval.cadence_hz > 0 and self.eval.frame_rate > 0, "eval rates must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self


def _increasing(values):
    return len(values) > 0 and all(0 < v < 1 for v in values) and all(a < b for a, b in zip(values, values[1:]))


def _split_key(dotted):
    section, _, key = dotted.partition('.')
    if section not in SECTIONS or key not in {f.name for f in dataclasses.fields(SECTIONS[section])}:
        raise ConfigError(f"unknown config key: {dotted}")
    return section, key


def coerce(value, kind, dotted):
    """ Converts JSON values and --set strings to the declared field type. """
    try:
        if isinstance(kind, types.UnionType):
            if value is None or (isinstance(value, str) and value.lower() in ('none', 'null', '')):
                return None
            kind = next(k for k in typing.get_args(kind) if k is not type(None))
        if kind is bool:
            if isinstance(value, str):
                if value.lower() not in ('true', 'false', '1', '0', 'yes', 'no'):
                    raise ValueError(value)
                return value.lower() in ('true', '1', 'yes')
            return bool(value)
        if kind is tuple:
            if isinstance(value, str):
                value = [v for v in value.split(',') if v.strip()]
            return tuple(_number(v) for v in value)
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(float(value)) if isinstance(value, str) else int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (ValueError, TypeError):
        raise ConfigError(f"{dotted}: cannot use {value!r} as {getattr(kind, '__name__', kind)}") from None


def _number(v):
    f = float(v)
    return int(f) if f.is_integer() and not (isinstance(v, str) and '.' in v) and not isinstance(v, float) else f


def load_config(profile='desk', path=None, overrides=()):
    """ Builds and validates a RunConfig: profile, then JSON file, then 'key=value' overrides. """
    if profile not in ('desk', 'full'):
        raise ConfigError(f"unknown profile {profile!r}")
    config = RunConfig(profile=profile)
    if profile == 'desk':
        config = config.with_values(DESK_OVERRIDES)
    if path is not None:
        path = pathlib.Path(path)
        if not path.exists():
            raise FileNotFoundError(f"no config file {path}")
        try:
            data = json.loads(path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            err = ConfigError(f"config file {path} is not valid JSON: {e.msg}")
            err.add_note(f"line {e.lineno}, column {e.colno}")
            raise err from None
        config = config.with_values(flatten(data))
    pairs = {}
    for item in overrides:
        key, sep, value = item.partition('=')
        if not sep:
            raise ConfigError(f"override must be key=value, got {item!r}")
        pairs[key.strip()] = value.strip()
    return config.with_values(pairs).validate()


def flatten(data, prefix=''):
    out = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            if prefix:
                raise ConfigError(f"unknown config key: {dotted}")
            out.update(flatten(value, f"{dotted}."))
        elif not prefix:
            if key == 'profile':
                continue
            raise ConfigError(f"unknown config key: {dotted}")
        else:
            out[dotted] = value
    return out


@test
def published_defaults():
    c = RunConfig()
    test.eq((8, 4, 9, 6, 6), (c.attention.heads, c.attention.points, c.attention.aggregation,
                               c.attention.encoder_layers, c.attention.decoder_layers))
    test.eq((2.0, 5.0, 2.0), (c.training.cls_weight, c.training.l1_weight, c.training.giou_weight))
    test.eq((2e-4, 1e-4, 25, 20, 0.1), (c.optimizer.lr, c.optimizer.weight_decay, c.training.epochs,
                                        c.optimizer.decay_epoch, c.optimizer.decay_factor))
    test.eq(300, c.decoder.queries)
    test.eq((346, 260), (c.sensor.width, c.sensor.height))
    test.eq(8, c.history)
    test.eq(9, c.window)
    test.eq((0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95), c.eval.iou_thresholds)
    c.validate()


@test
def desk_profile_marks_overrides():
    c = load_config('desk')
    test.eq((128, 96, 64, 25), (c.sensor.width, c.sensor.height, c.backbone.d, c.decoder.queries))
    text = c.describe()
    test.contains(text, "sensor.width = 128  [desk-override]")
    test.contains(text, "attention.heads = 8\n")
    test.eq(2, c.event_channels)


@test
def set_overrides_are_coerced():
    c = load_config('desk', overrides=['attention.aggregation=3', 'fusion.mode=averaging',
                                       'representation.normalize=true', 'backbone.widths=8,16',
                                       'training.window=none', 'sensor.threshold=0.2'])
    test.eq(3, c.attention.aggregation)
    test.eq('averaging', c.fusion.mode)
    test.eq(True, c.representation.normalize)
    test.eq((8, 16), c.backbone.widths)
    test.eq(None, c.training.window)
    test.eq(0.2, c.sensor.threshold)


@test
def unknown_keys_rejected(tmp_path):
    with test.raises(ConfigError, "unknown config key: attention.head"):
        load_config(overrides=['attention.head=4'])
    (tmp_path/'c.json').write_text('{"training": {"seed": 4}, "decoder": {"slots": 3}}')
    with test.raises(ConfigError, "unknown config key: decoder.slots"):
        load_config(path=tmp_path/'c.json')
    (tmp_path/'d.json').write_text('{"seed": 4}')
    with test.raises(ConfigError, "unknown config key: seed"):
        load_config(path=tmp_path/'d.json')


@test
def json_file_applies(tmp_path):
    (tmp_path/'c.json').write_text('{"profile": "desk", "training": {"seed": 4}, "eval": {"iou_thresholds": [0.5]}}')
    c = load_config(path=tmp_path/'c.json')
    test.eq(4, c.training.seed)
    test.eq((0.5,), c.eval.iou_thresholds)


@test
def invariants_checked():
    with test.raises(ConfigError, "sensor.threshold must be positive, got 0.0"):
        load_config(overrides=['sensor.threshold=0'])
    with test.raises(ConfigError, "backbone.d 60 must be divisible by attention.heads 8"):
        load_config(overrides=['backbone.d=60'])
    with test.raises(ConfigError, "attention.dropout must be in [0, 1), got 1.0"):
        load_config(overrides=['attention.dropout=1'])
    with test.raises(ConfigError, "eval.iou_thresholds must be strictly increasing within (0, 1)"):
        load_config(overrides=['eval.iou_thresholds=0.7,0.5'])
    with test.raises(ConfigError, "attention.heads: cannot use 'x' as int"):
        load_config(overrides=['attention.heads=x'])
    with test.raises(ConfigError, "override must be key=value, got 'seed'"):
        load_config(overrides=['seed'])
