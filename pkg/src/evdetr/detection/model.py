""" The streaming detector: backbones, temporal encoders, fusion, decoder and heads.

    All parameters live in one ParamStore. Per-sequence state (the two
    encoder histories and the frame feature cache) lives in a StreamState,
    created fresh for every sequence or training window.
"""

import copy
import dataclasses
import functools
import logging

import numpy as np

from ..tensorcore import (Tensor, ParamStore, RngStream, init_linear, dense, maximum, minimum, concat,
                          grad_check, no_grad, perturb)
from ..events import TemporalBin, represent
from ..backbone import init_backbone, extract, frame_input, positional_encoding, resize_input
from ..attention import init_encoder, temporal_encoder, init_decoder, decode, FrameHistory
from ..fusion import init_fusion, FrameFeatureCache, NoPriorFrameError, fuse_async, align
from .boxes import to_pixels

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


PRIOR_PROBABILITY = 0.01


@dataclasses.dataclass(frozen=True)
class Detection:
    box: tuple              # normalized (cx, cy, w, h)
    class_id: int
    confidence: float
    t: int

    def pixel_box(self, width, height):
        return to_pixels(self.box, width, height)


def branches(config):
    """ Modalities with their own backbone and encoder. """
    return {'both': ('frame', 'event'), 'frames': ('frame',), 'events': ('event',)}[config.fusion.modality]


def init_model(config, seed=0):
    store = ParamStore()
    rng = RngStream(seed)
    d = config.backbone.d
    for modality in branches(config):
        channels = config.backbone.frame_channels if modality == 'frame' else config.event_channels
        init_backbone(store, modality, channels, config.backbone, rng)
        init_encoder(store, modality, d, config.attention, rng)
    if config.fusion.modality == 'both':
        init_fusion(store, d, config.fusion.mode, rng)
    init_decoder(store, d, config.attention, config.decoder, rng)
    init_heads(store, d, config.decoder.classes, rng)
    logger.debug("model with %d parameters in %d arrays", store.size(), len(store))
    return store


def init_heads(store, d, classes, rng):
    init_linear(store, "head.class", d, classes, rng)
    store["head.class.bias"].values[...] = -np.log((1 - PRIOR_PROBABILITY) / PRIOR_PROBABILITY)
    init_linear(store, "head.box.0", d, d, rng)
    init_linear(store, "head.box.1", d, d, rng)
    store.add("head.box.2.weight", np.zeros((d, 4)))
    store.add("head.box.2.bias", np.zeros(4))


def inverse_sigmoid(x, eps=1e-5):
    x = minimum(maximum(x, eps), 1.0 - eps)
    return x.log() - (1.0 - x).log()


def predict_heads(store, hs, ref):
    """ Class logits [queries, C] and normalized boxes [queries, 4]; box centers are offsets from ref. """
    logits = dense(store, "head.class", hs)
    h = dense(store, "head.box.1", dense(store, "head.box.0", hs).gelu()).gelu()
    delta = dense(store, "head.box.2", h)
    centers = (delta[:, :2] + inverse_sigmoid(ref)).sigmoid()
    sizes = delta[:, 2:].sigmoid()
    return logits, concat([centers, sizes], axis=1)


def to_detections(logits, boxes, t):
    """ One Detection per query: class is the argmax, confidence its sigmoid. """
    prob = 1.0 / (1.0 + np.exp(-np.asarray(logits.values if isinstance(logits, Tensor) else logits)))
    boxes = boxes.values if isinstance(boxes, Tensor) else np.asarray(boxes)
    classes = prob.argmax(-1)
    return [Detection(tuple(float(v) for v in box), int(c), float(p[c]), t)
            for box, c, p in zip(boxes, classes, prob)]


@functools.lru_cache(maxsize=16)
def _position(height, width, d):
    return positional_encoding(height, width, d)


@dataclasses.dataclass
class StreamState:
    frame_history: FrameHistory
    event_history: FrameHistory
    cache: FrameFeatureCache
    frames_encoded: int = 0
    events_encoded: int = 0
    event_only: int = 0

    @classmethod
    def new(cls, config):
        k = config.history
        return cls(FrameHistory(k, 'frame'), FrameHistory(k, 'event'), FrameFeatureCache(config.fusion.cache_capacity))


def _encode(store, config, history, x, modality, t, rng, training):
    fmap = extract(store, x, modality, t)
    pos = _position(*fmap.size, fmap.d)
    return temporal_encoder(store, fmap, history, config.attention, pos, rng, training)


def encode_frame(store, config, state, image, t, rng=None, training=False, height=None):
    """ Frame branch: run once per frame, the result is cached for fusion. """
    x = frame_input(image, config.backbone.frame_channels)
    if height is not None:
        x = resize_input(x, height)
    encoded = _encode(store, config, state.frame_history, x, 'frame', t, rng, training)
    state.cache.put(encoded)
    state.frames_encoded += 1
    return encoded


def encode_events(store, config, state, tensor, t, rng=None, training=False, height=None):
    x = tensor if height is None else resize_input(tensor, height)
    state.events_encoded += 1
    return _encode(store, config, state.event_history, x, 'event', t, rng, training)


def fused_map(store, config, state, event_encoded, t):
    """ The map the decoder reads at t for the configured modality. """
    modality = config.fusion.modality
    if modality == 'frames':
        return align(t, state.cache).tensor
    if modality == 'events':
        return event_encoded.tensor
    try:
        return fuse_async(store, event_encoded, state.cache, config.fusion.mode).tensor
    except NoPriorFrameError:
        # event map alone until the first frame arrives
        state.event_only += 1
        return event_encoded.tensor


def forward(store, config, state, t, event_tensor=None, frame=None, rng=None, training=False, height=None):
    """ One query timestamp. frame is a new uint8 image taken at t (or None);
        event_tensor is the representation of the bin ending at t. """
    if frame is not None and config.fusion.modality != 'events':
        encode_frame(store, config, state, frame, t, rng, training, height)
    encoded = None
    if config.fusion.modality != 'frames':
        encoded = encode_events(store, config, state, event_tensor, t, rng, training, height)
    hs, ref = decode(store, fused_map(store, config, state, encoded, t), config.attention, rng, training)
    return predict_heads(store, hs, ref)


def event_input(events, geometry, t, representation):
    """ The representation of the events in [t - window, t). """
    t0 = t - representation.window_us
    return represent(TemporalBin(0, t0, t, events.between(t0, t)), geometry, representation).tensor


MICRO = {
    'sensor.width': 16, 'sensor.height': 16,
    'backbone.widths': '2,2', 'backbone.d': 4,
    'attention.heads': 2, 'attention.points': 1, 'attention.aggregation': 2,
    'attention.encoder_layers': 1, 'attention.decoder_layers': 1,
    'attention.dropout': 0.0, 'attention.ffn_ratio': 1,
    'decoder.queries': 3, 'representation.window_us': 10_000,
}


def micro_config(**overrides):
    """ 16x16 sensor, d = 4, one layer each: small enough for gradient checks. """
    from ..config import load_config
    values = {**MICRO, **overrides}
    return load_config('desk', overrides=[f"{k}={v}" for k, v in values.items()])


def micro_inputs(seed, steps=2):
    rng = np.random.default_rng(seed)
    frames = [rng.integers(0, 256, (16, 16)).astype(np.uint8) for _ in range(steps)]
    events = [rng.poisson(0.5, (2, 16, 16)).astype(np.float64) for _ in range(steps)]
    return frames, events


@test
def zero_heads_sit_on_reference_points():
    store = ParamStore()
    rng = RngStream(1)
    init_heads(store, 4, 3, rng)
    for p in store:
        p.values[...] = 0.0
    hs = Tensor(np.random.default_rng(1).normal(size=(5, 4)))
    ref = Tensor(np.random.default_rng(2).uniform(0.1, 0.9, (5, 2)))
    logits, boxes = predict_heads(store, hs, ref)
    test.lt(np.abs(boxes.values[:, :2] - ref.values).max(), 1e-12)
    test.eq([0.5] * 10, boxes.values[:, 2:].ravel().tolist())
    detections = to_detections(logits, boxes, 40_000)
    test.eq(5, len(detections))
    test.eq({0.5}, {d.confidence for d in detections})


@test
def fixed_number_of_predictions():
    config = micro_config()
    store = init_model(config, seed=2)
    frames, events = micro_inputs(2, steps=3)
    state = StreamState.new(config)
    for k in range(3):
        logits, boxes = forward(store, config, state, 10_000 * (k + 1), events[k], frames[k])
        test.eq((3, 3), logits.shape)
        test.eq((3, 4), boxes.shape)
    test.eq(3, state.frames_encoded)
    empty = forward(store, config, state, 40_000, np.zeros((2, 16, 16)))
    test.eq((3, 4), empty[1].shape)


@test
def fresh_heads_predict_prior_probability():
    config = micro_config()
    store = init_model(config, seed=3)
    frames, events = micro_inputs(3, steps=1)
    logits, _ = forward(store, config, StreamState.new(config), 10_000, events[0], frames[0])
    conf = {round(d.confidence, 12) for d in to_detections(logits, _, 0)}
    test.gt(min(conf), 0.0)
    test.lt(max(conf), 0.2)


@test
def event_only_before_first_frame():
    config = micro_config()
    store = init_model(config, seed=4)
    _, events = micro_inputs(4, steps=1)
    state = StreamState.new(config)
    forward(store, config, state, 10_000, events[0])
    test.eq(1, state.event_only)
    test.eq(0, state.frames_encoded)


@test
def modality_modes_own_their_parameters():
    names = {}
    for modality in ('both', 'frames', 'events'):
        config = micro_config(**{'fusion.modality': modality})
        names[modality] = {n.split('.')[0] for n in init_model(config).names()}
    test.eq({'frame', 'event', 'fusion', 'decoder', 'head'}, names['both'])
    test.eq({'frame', 'decoder', 'head'}, names['frames'])
    test.eq({'event', 'decoder', 'head'}, names['events'])
    config = micro_config(**{'fusion.modality': 'frames'})
    store = init_model(config)
    frames, _ = micro_inputs(5, steps=1)
    logits, _ = forward(store, config, StreamState.new(config), 0, frame=frames[0])
    test.eq((3, 3), logits.shape)


def pipeline_gradcheck(seed, **overrides):
    """ Gradient audit of backbones, both encoders, fusion, decoder, heads and
        loss on the micro configuration, one warm-up timestamp then one
        supervised timestamp. Matches are fixed before differentiating. """
    from .losses import set_loss, detection_loss
    config = micro_config(**overrides)
    store = init_model(config, seed=seed)
    rng = RngStream(seed + 1000)
    for prefix in ('decoder.0.cross.offset', 'frame.encoder.0.temporal.offset',
                   'event.encoder.0.temporal.offset', 'head.box.2'):
        perturb(store, rng, scale=0.3, prefix=prefix)
    frames, events = micro_inputs(seed, steps=2)
    gt_classes, gt_boxes = [1], np.array([[0.4, 0.5, 0.3, 0.2]])

    warm = StreamState.new(config)
    with no_grad():
        forward(store, config, warm, 10_000, events[0], frames[0])

    def run():
        # history is detached, so it stays fixed under perturbation
        return forward(store, config, copy.deepcopy(warm), 20_000, events[1], frames[1])

    logits, boxes = run()
    _, matches = set_loss(logits, boxes, gt_classes, gt_boxes, config.training)
    report = grad_check(lambda: detection_loss(*run(), gt_classes, gt_boxes, matches, config.training).total, store)
    return store, report


@test
def full_pipeline_gradients_match_differences():
    store, report = pipeline_gradcheck(6)
    test.truth(report.ok)
    test.eq(store.size(), report.checked)
