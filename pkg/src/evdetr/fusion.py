""" Asynchronous fusion of encoded frame and event maps.

    Each event timestamp is paired with the most recent encoded frame at or
    before it. Both maps get a per-pixel weight from an attention map without
    softmax; a two-way softmax per pixel turns the weights into masks that sum
    to one and the fused map is the mask-weighted sum of the two maps.
"""

import bisect
import collections
import dataclasses
import logging

import numpy as np

from .tensorcore import Tensor, softmax, stack, concat, linear, init_linear, grad_check, ParamStore, RngStream
from .tensorcore.tensor import as_tensor
from .backbone import FeatureMap

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


FUSION_MODES = ('attention', 'averaging', 'concatenation')


class NoPriorFrameError(LookupError):
    pass


class FusionShapeError(ValueError):
    pass


@dataclasses.dataclass
class ModalityMasks:
    frame: Tensor       # [H'W']
    event: Tensor


def init_fusion(store, d, mode, rng):
    if mode not in FUSION_MODES:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if mode == 'attention':
        bound = 1.0 / np.sqrt(d)
        for branch in ('event', 'frame'):
            for proj in ('q', 'k'):
                store.add(f"fusion.{branch}.{proj}", rng.uniform(-bound, bound, (d, d)))
    elif mode == 'concatenation':
        init_linear(store, "fusion.concat", 2 * d, d, rng)


def weight_mask(x, q_proj, k_proj):
    """ W[x] = sum over pixels y of <q_x, k_y> / sqrt(d) for the map x [d, H, W]. """
    x = as_tensor(x)
    d = x.shape[0]
    if q_proj.shape != (d, d) or k_proj.shape != (d, d):
        raise FusionShapeError(f"projections {q_proj.shape} and {k_proj.shape} do not match d={d}")
    seq = x.reshape(d, -1).T
    q, k = seq @ q_proj, seq @ k_proj
    return (q * k.sum(axis=0)).sum(axis=1) * (1.0 / np.sqrt(d))


def normalize_masks(w_frame, w_event):
    if w_frame.shape != w_event.shape:
        raise FusionShapeError(f"weight masks differ in length: {w_frame.shape} and {w_event.shape}")
    masks = softmax(stack([w_frame, w_event]), axis=0)
    return ModalityMasks(masks[0], masks[1])


def fuse(x_frame, x_event, masks):
    """ Per pixel convex combination, masks broadcast over channels. """
    x_frame, x_event = as_tensor(x_frame), as_tensor(x_event)
    if x_frame.shape != x_event.shape:
        raise FusionShapeError(f"frame map {x_frame.shape} and event map {x_event.shape} differ")
    d, h, w = x_frame.shape
    if masks.frame.shape != (h * w,):
        raise FusionShapeError(f"masks of length {masks.frame.shape[0]} for {h}x{w} maps")
    return x_frame * masks.frame.reshape(1, h, w) + x_event * masks.event.reshape(1, h, w)


class FrameFeatureCache:
    """ The last `capacity` encoded frames, keyed by increasing timestamps. """

    def __init__(self, capacity=2):
        if capacity < 1:
            raise ValueError(f"frame cache capacity must be at least 1, got {capacity}")
        self.capacity = capacity
        self.times = []
        self.maps = []
        self.inserts = 0
        self.lookups = 0
        self.reuse = collections.Counter()     # fusions per frame timestamp

    def __len__(self):
        return len(self.times)

    def put(self, fmap):
        if self.times and fmap.t_stamp <= self.times[-1]:
            raise ValueError(f"frame timestamps must increase, got {fmap.t_stamp} after {self.times[-1]}")
        self.times.append(fmap.t_stamp)
        self.maps.append(fmap)
        del self.times[:-self.capacity], self.maps[:-self.capacity]
        self.inserts += 1

    def latest_at(self, t_event):
        i = bisect.bisect_right(self.times, t_event)
        if i == 0:
            raise NoPriorFrameError("no prior frame")
        self.lookups += 1
        self.reuse[self.times[i - 1]] += 1
        return self.maps[i - 1]

    def clear(self):
        self.times.clear()
        self.maps.clear()


def align(t_event, cache):
    """ The cached frame map with the largest t_j <= t_event. """
    return cache.latest_at(t_event)


def fuse_maps(store, x_frame, x_event, mode='attention'):
    """ Fused [d, H, W] map of two encoded maps with the selected strategy. """
    if mode == 'attention':
        masks = normalize_masks(weight_mask(x_frame, store["fusion.frame.q"], store["fusion.frame.k"]),
                                weight_mask(x_event, store["fusion.event.q"], store["fusion.event.k"]))
        return fuse(x_frame, x_event, masks)
    if x_frame.shape != x_event.shape:
        raise FusionShapeError(f"frame map {x_frame.shape} and event map {x_event.shape} differ")
    if mode == 'averaging':
        return (x_frame + x_event) * 0.5
    if mode == 'concatenation':
        d, h, w = x_frame.shape
        both = concat([x_frame.reshape(d, h * w).T, x_event.reshape(d, h * w).T], axis=1)
        return linear(both, store["fusion.concat.weight"], store["fusion.concat.bias"]).T.reshape(d, h, w)
    raise ValueError(f"unknown fusion mode {mode!r}")


def fuse_async(store, event_map, cache, mode='attention'):
    """ Fuses the event map at t_i with the latest cached frame; the result carries t_i. """
    frame_map = align(event_map.t_stamp, cache)
    fused = fuse_maps(store, frame_map.tensor, event_map.tensor, mode)
    return FeatureMap(fused, event_map.t_stamp, 'fused')


def fusion_store(d, mode='attention', seed=0):
    store = ParamStore()
    init_fusion(store, d, mode, RngStream(seed))
    return store


@test
def align_picks_latest_prior_frame():
    cache = FrameFeatureCache()
    for t in (0, 40_000):
        cache.put(FeatureMap(Tensor(np.full((1, 1, 1), t)), t, 'frame'))
    test.eq(40_000, align(50_000, cache).t_stamp)
    test.eq(40_000, align(40_000, cache).t_stamp)
    test.eq(0, align(39_999, cache).t_stamp)
    with test.raises(NoPriorFrameError, "no prior frame"):
        align(-1, cache)
    cache.put(FeatureMap(Tensor(np.zeros((1, 1, 1))), 80_000, 'frame'))
    test.eq([40_000, 80_000], cache.times)
    with test.raises(NoPriorFrameError, "no prior frame"):
        align(20_000, cache)
    with test.raises(ValueError, "frame timestamps must increase, got 80000 after 80000"):
        cache.put(FeatureMap(Tensor(np.zeros((1, 1, 1))), 80_000, 'frame'))


@test
def weight_mask_closed_forms():
    rng = np.random.default_rng(1)
    q, k = Tensor(rng.normal(size=(8, 8))), Tensor(rng.normal(size=(8, 8)))
    test.eq([0.0] * 12, weight_mask(np.zeros((8, 3, 4)), q, k).values.tolist())
    x = rng.normal(size=(8, 1, 1))
    single = weight_mask(x, q, k).values
    test.lt(abs(single[0] - (x[:, 0, 0] @ q.values) @ (x[:, 0, 0] @ k.values) / np.sqrt(8)), 1e-12)


@test
def weight_mask_matches_pixel_pairs():
    rng = np.random.default_rng(2)
    q, k = rng.normal(size=(8, 8)), rng.normal(size=(8, 8))
    x = rng.normal(size=(8, 3, 4))
    seq = x.reshape(8, 12).T
    loop = [sum((seq[a] @ q) @ (seq[b] @ k) for b in range(12)) / np.sqrt(8) for a in range(12)]
    test.lt(np.abs(weight_mask(x, Tensor(q), Tensor(k)).values - loop).max(), 1e-10)
    with test.raises(FusionShapeError, "projections (4, 4) and (8, 8) do not match d=8"):
        weight_mask(x, Tensor(np.zeros((4, 4))), Tensor(k))


@test
def masks_are_two_way_softmax():
    m = normalize_masks(Tensor(np.array([1.0, -2.0, np.log(3.0)])), Tensor(np.array([1.0, -2.0, 0.0])))
    test.eq([0.5, 0.5], m.frame.values[:2].tolist())
    test.lt(abs(m.frame.values[2] - 0.75), 1e-12)
    rng = np.random.default_rng(3)
    m = normalize_masks(Tensor(rng.normal(size=50) * 30), Tensor(rng.normal(size=50) * 30))
    test.lt(np.abs(m.frame.values + m.event.values - 1.0).max(), 1e-12)
    with test.raises(FusionShapeError, "weight masks differ in length: (3,) and (2,)"):
        normalize_masks(Tensor(np.zeros(3)), Tensor(np.zeros(2)))


@test
def fuse_is_convex():
    rng = np.random.default_rng(4)
    xi, xs = rng.normal(size=(5, 3, 4)), rng.normal(size=(5, 3, 4))
    ones = ModalityMasks(Tensor(np.ones(12)), Tensor(np.zeros(12)))
    test.eq(xi.tolist(), fuse(xi, xs, ones).values.tolist())
    m = normalize_masks(Tensor(rng.normal(size=12)), Tensor(rng.normal(size=12)))
    test.lt(np.abs(fuse(xi, xi, m).values - xi).max(), 1e-12)
    f = fuse(xi, xs, m).values
    test.truth((f >= np.minimum(xi, xs) - 1e-12).all())
    test.truth((f <= np.maximum(xi, xs) + 1e-12).all())
    with test.raises(FusionShapeError, "frame map (5, 3, 4) and event map (5, 4, 3) differ"):
        fuse(xi, xs.reshape(5, 4, 3), m)


@test
def identical_branches_split_evenly():
    store = fusion_store(4)
    store["fusion.frame.q"].values[...] = store["fusion.event.q"].values
    store["fusion.frame.k"].values[...] = store["fusion.event.k"].values
    x = Tensor(np.random.default_rng(5).normal(size=(4, 2, 3)))
    masks = normalize_masks(weight_mask(x, store["fusion.frame.q"], store["fusion.frame.k"]),
                            weight_mask(x, store["fusion.event.q"], store["fusion.event.k"]))
    test.eq([0.5] * 6, masks.frame.values.tolist())
    test.lt(np.abs(fuse_maps(store, x, x).values - x.values).max(), 1e-15)


@test
def frame_features_reused_between_frames():
    store = fusion_store(4)
    rng = np.random.default_rng(6)
    cache = FrameFeatureCache()
    fused_times = []
    for t in range(0, 80_000, 10_000):
        if t % 40_000 == 0:
            cache.put(FeatureMap(Tensor(rng.normal(size=(4, 2, 2))), t, 'frame'))
        inserts = cache.inserts
        fused = fuse_async(store, FeatureMap(Tensor(rng.normal(size=(4, 2, 2))), t, 'event'), cache)
        test.eq(inserts, cache.inserts)
        fused_times.append(fused.t_stamp)
    test.eq(2, cache.inserts)
    test.eq(8, cache.lookups)
    test.eq({0: 4, 40_000: 4}, dict(cache.reuse))
    test.eq(list(range(0, 80_000, 10_000)), fused_times)
    with test.raises(NoPriorFrameError, "no prior frame"):
        fuse_async(store, FeatureMap(Tensor(np.zeros((4, 2, 2))), 0, 'event'), FrameFeatureCache())


@test
def coincident_timestamps_fuse_synchronously():
    store = fusion_store(4)
    rng = np.random.default_rng(7)
    xi, xs = Tensor(rng.normal(size=(4, 2, 2))), Tensor(rng.normal(size=(4, 2, 2)))
    cache = FrameFeatureCache()
    cache.put(FeatureMap(xi, 40_000, 'frame'))
    fused = fuse_async(store, FeatureMap(xs, 40_000, 'event'), cache)
    test.eq(fuse_maps(store, xi, xs).values.tolist(), fused.tensor.values.tolist())


@test
def baseline_variants():
    rng = np.random.default_rng(8)
    xi, xs = Tensor(rng.normal(size=(4, 2, 3))), Tensor(rng.normal(size=(4, 2, 3)))
    test.lt(np.abs(fuse_maps(None, xi, xs, 'averaging').values - (xi.values + xs.values) / 2).max(), 1e-15)
    store = fusion_store(4, 'concatenation')
    test.eq(['fusion.concat.weight', 'fusion.concat.bias'], store.names())
    test.eq((4, 2, 3), fuse_maps(store, xi, xs, 'concatenation').shape)
    test.eq([], fusion_store(4, 'averaging').names())
    with test.raises(ValueError, "unknown fusion mode 'sum'"):
        fusion_store(4, 'sum')


@test
def fusion_gradients_match_differences():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for mode in ('attention', 'concatenation'):
            store = fusion_store(4, mode, seed=seed)
            xi = store.add('input.frame', rng.normal(size=(4, 2, 3)))
            xs = store.add('input.event', rng.normal(size=(4, 2, 3)))
            weights = Tensor(rng.normal(size=(4, 2, 3)))
            report = grad_check(lambda: (fuse_maps(store, xi, xs, mode) * weights).sum(), store)
            test.truth(report.ok)
