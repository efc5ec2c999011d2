""" Modality-specific convolutional feature extraction and positional encodings.

    Each modality ('frame', 'event') owns one parameter set under
    '<modality>.backbone.'; every timestamp of that modality runs through the
    same parameters.
"""

import dataclasses
import logging

import cv2
import numpy as np

from .tensorcore import Tensor, conv2d, linear, grad_check, RngStream, ParamStore, init_linear

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


MODALITIES = ('frame', 'event')
TEMPERATURE = 10_000.0


class BackboneConfigError(ValueError):
    pass


@dataclasses.dataclass
class FeatureMap:
    tensor: Tensor          # [d, H', W']
    t_stamp: int
    modality: str

    @property
    def d(self):
        return self.tensor.shape[0]

    @property
    def size(self):
        return self.tensor.shape[1:]

    def sequence(self):
        """ [H'W', d], pixels in row-major order """
        d, h, w = self.tensor.shape
        return self.tensor.reshape(d, h * w).T


def init_backbone(store, modality, in_channels, config, rng):
    """ Conv stages (3x3, stride 2) with the widths of config, then a 1x1 projection to config.d. """
    if modality not in MODALITIES:
        raise BackboneConfigError(f"unknown modality {modality!r}")
    prefix = f"{modality}.backbone"
    c_in = in_channels
    for s, width in enumerate(config.widths):
        bound = 1.0 / np.sqrt(c_in * 9)
        store.add(f"{prefix}.conv{s}.weight", rng.uniform(-bound, bound, (width, c_in, 3, 3)))
        store.add(f"{prefix}.conv{s}.bias", rng.uniform(-bound, bound, width))
        c_in = width
    init_linear(store, f"{prefix}.proj", c_in, config.d, rng)


def output_size(height, width, stages):
    for _ in range(stages):
        height, width = (height + 1) // 2, (width + 1) // 2
    return height, width


def pad_edge(h):
    """ Replicates the border pixels of [C, H, W] once on every side. """
    _, height, width = h.shape
    rows = np.clip(np.arange(-1, height + 1), 0, height - 1)
    cols = np.clip(np.arange(-1, width + 1), 0, width - 1)
    return h[:, rows[:, None], cols[None, :]]


def extract(store, x, modality, t_stamp=0):
    """ FeatureMap [d, ceil(H/stride), ceil(W/stride)] of input x [C, H, W]. """
    prefix = f"{modality}.backbone"
    first = f"{prefix}.conv0.weight"
    if first not in store:
        raise BackboneConfigError(f"no backbone for modality {modality!r}")
    expected = store[first].shape[1]
    if x.shape[0] != expected:
        raise BackboneConfigError(f"{modality} backbone expects {expected} input channels, got {x.shape[0]}")
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    s = 0
    while f"{prefix}.conv{s}.weight" in store:
        h = conv2d(pad_edge(h), store[f"{prefix}.conv{s}.weight"], store[f"{prefix}.conv{s}.bias"], stride=2).gelu()
        s += 1
    c, height, width = h.shape
    projected = linear(h.reshape(c, height * width).T, store[f"{prefix}.proj.weight"], store[f"{prefix}.proj.bias"])
    return FeatureMap(projected.T.reshape(-1, height, width), t_stamp, modality)


def frame_input(image, channels=1):
    """ uint8 [H, W] frame as float [channels, H, W] in [0, 1]. """
    x = np.asarray(image, dtype=np.float64) / 255.0
    if x.ndim == 2:
        x = np.repeat(x[None], channels, axis=0)
    return x


def resize_input(x, height):
    """ Resizes [C, H, W] to the given height keeping the aspect ratio. """
    c, h, w = x.shape
    width = max(1, round(w * height / h))
    return np.stack([cv2.resize(x[k], (width, height), interpolation=cv2.INTER_LINEAR) for k in range(c)])


def random_height(rng, training):
    """ One of resize_min, resize_min + step, ..., resize_max """
    choices = list(range(training.resize_min, training.resize_max + 1, training.resize_step))
    return choices[rng.choice(len(choices))]


def positional_encoding(height, width, d):
    """ 2D sinusoidal encoding [d, H, W].

        Channels [0, d/2) encode the column, [d/2, d) the row; within each half
        channel 2i is sin(pos / T^(2i/(d/2))) and 2i+1 the matching cosine.
    """
    if d % 4:
        raise BackboneConfigError(f"positional encoding needs d divisible by 4, got {d}")
    half = d // 2
    freq = TEMPERATURE ** (2 * np.arange(half // 2) / half)

    def encode(positions):
        angles = positions[:, None] / freq
        out = np.empty((len(positions), half))
        out[:, 0::2], out[:, 1::2] = np.sin(angles), np.cos(angles)
        return out

    cols, rows = encode(np.arange(width, dtype=np.float64)), encode(np.arange(height, dtype=np.float64))
    pe = np.empty((d, height, width))
    pe[:half] = cols.T[:, None, :]
    pe[half:] = rows.T[:, :, None]
    return Tensor(pe)


def tiny_config(widths=(2, 3), d=4):
    from .config import BackboneConfig
    return BackboneConfig(frame_channels=1, widths=widths, d=d)


@test
def zero_input_gives_bias_response():
    store = ParamStore()
    init_backbone(store, 'event', 2, tiny_config(), RngStream(1))
    fm = extract(store, np.zeros((2, 12, 10)), 'event', t_stamp=40_000)
    test.eq((4, 3, 3), fm.tensor.shape)
    flat = fm.tensor.values.reshape(4, -1)
    test.lt(np.abs(flat - flat[:, :1]).max(), 1e-15)
    test.eq(40_000, fm.t_stamp)
    test.eq((9, 4), fm.sequence().shape)


@test
def output_is_input_over_stride_rounded_up():
    store = ParamStore()
    init_backbone(store, 'frame', 1, tiny_config(widths=(2, 2, 2)), RngStream(2))
    fm = extract(store, np.ones((1, 13, 11)), 'frame')
    test.eq((2, 2), fm.size)
    test.eq((2, 2), output_size(13, 11, 3))
    test.eq((12, 16), output_size(96, 128, 3))
    test.eq(8, tiny_config(widths=(2, 2, 2)).stride)


@test
def bins_share_modality_parameters():
    store = ParamStore()
    rng = RngStream(3)
    init_backbone(store, 'frame', 1, tiny_config(), rng)
    init_backbone(store, 'event', 2, tiny_config(), rng)
    touched = []
    for t in (0, 10_000):
        with store.tracking() as names:
            extract(store, np.random.default_rng(t).random((2, 8, 8)), 'event', t)
        touched.append(names)
    test.eq(touched[0], touched[1])
    test.truth(all(n.startswith('event.backbone.') for n in touched[0]))
    test.eq(len(store.with_prefix('event.')), len(touched[0]))
    test.eq(set(), {p.name for p in store.with_prefix('frame.')} & touched[0])


@test
def channel_mismatch_is_config_error():
    store = ParamStore()
    init_backbone(store, 'event', 5, tiny_config(), RngStream(4))
    with test.raises(BackboneConfigError, "event backbone expects 5 input channels, got 2"):
        extract(store, np.zeros((2, 8, 8)), 'event')
    with test.raises(BackboneConfigError, "no backbone for modality 'frame'"):
        extract(store, np.zeros((1, 8, 8)), 'frame')


@test
def backbone_gradients_match_differences():
    for seed in range(10):
        store = ParamStore()
        init_backbone(store, 'event', 2, tiny_config(), RngStream(seed))
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 6, 6))
        weights = Tensor(rng.normal(size=(4, 2, 2)))
        report = grad_check(lambda: (extract(store, x, 'event').tensor * weights).sum(), store)
        test.truth(report.ok)
        test.eq(38 + 57 + 16, report.checked)


@test
def positional_encoding_formula():
    pe = positional_encoding(5, 7, 8).values
    test.eq((8, 5, 7), pe.shape)
    test.le(np.abs(pe).max(), 1.0)
    for c in range(7):
        test.eq(np.sin(c), pe[0, 2, c])
        test.eq(np.cos(c), pe[1, 2, c])
    test.eq(np.sin(3 / 100.0), pe[2, 0, 3])
    test.eq(np.sin(4), pe[4, 4, 0])
    vectors = pe.reshape(8, -1).T
    test.eq(35, len({tuple(v) for v in vectors}))
    test.truth(np.array_equal(pe, positional_encoding(5, 7, 8).values))
    with test.raises(BackboneConfigError, "positional encoding needs d divisible by 4, got 6"):
        positional_encoding(2, 2, 6)


@test
def resize_keeps_aspect():
    x = np.random.default_rng(0).random((2, 260, 346))
    y = resize_input(x, 256)
    test.eq((2, 256, 341), y.shape)
    from .config import TrainingConfig
    heights = {random_height(RngStream(s), TrainingConfig()) for s in range(200)}
    test.eq(set(range(256, 577, 32)), heights)


@test
def frame_input_scales():
    x = frame_input(np.array([[0, 255]], dtype=np.uint8))
    test.eq((1, 1, 2), x.shape)
    test.eq([0.0, 1.0], x[0, 0].tolist())
