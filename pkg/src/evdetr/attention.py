""" Multi-head, deformable and temporal deformable attention, and the
    encoder and decoder blocks built from them.

    Sequences are [N, d] Tensors. Maps are [d, H, W] Tensors. Reference points
    are (u, v) in [0, 1]^2, sampled with grid_sample: u = 0 is the first
    column, u = 1 the last one.
"""

import collections
import logging

import numpy as np

from .tensorcore import (Tensor, DimensionError, softmax, layer_norm, dropout, grid_sample,
                         init_linear, init_layer_norm, dense, bilinear_sample, grad_check,
                         ParamStore, RngStream, perturb)
from .tensorcore.tensor import as_tensor
from .backbone import FeatureMap

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


class TemporalContextError(LookupError):
    pass


def _split_heads(x, heads):
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x):
    m, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, m * dh)


def init_attention(store, name, d, rng):
    for proj in ('q', 'k', 'v', 'out'):
        init_linear(store, f"{name}.{proj}", d, d, rng)


def attend(store, name, query, key, heads, value=None, trace=None):
    """ Scaled dot-product attention per head, heads merged by the output projection. """
    value = key if value is None else value
    if query.shape[-1] != key.shape[-1] or value.shape != key.shape:
        raise DimensionError(f"attention: query {query.shape}, key {key.shape} and value {value.shape} do not fit")
    d = query.shape[-1]
    q = _split_heads(dense(store, f"{name}.q", query), heads)
    k = _split_heads(dense(store, f"{name}.k", key), heads)
    v = _split_heads(dense(store, f"{name}.v", value), heads)
    weights = softmax(q @ k.transpose(0, 2, 1) * (1.0 / np.sqrt(d // heads)), axis=-1)
    if trace is not None:
        trace['weights'] = weights.values
    return dense(store, f"{name}.out", _merge_heads(weights @ v))


def radial_offsets(heads, slots, points, spread):
    """ Head m looks along angle 2 pi m / heads, point l at distance (l + 1) * spread. """
    theta = np.arange(heads) * 2 * np.pi / heads
    grid = np.stack([np.cos(theta), np.sin(theta)], -1)
    grid = grid / np.abs(grid).max(-1, keepdims=True)
    scale = (np.arange(points) + 1.0)[None, None, :, None] * spread
    return np.broadcast_to(grid[:, None, None, :] * scale, (heads, slots, points, 2)).copy()


def init_deformable(store, name, d, heads, points, rng, slots=1, spread=0.05):
    """ Value and output projections plus offset and weight heads for `slots` maps. """
    init_linear(store, f"{name}.value", d, d, rng)
    init_linear(store, f"{name}.out", d, d, rng)
    store.add(f"{name}.offset.weight", np.zeros((d, heads * slots * points * 2)))
    store.add(f"{name}.offset.bias", radial_offsets(heads, slots, points, spread).ravel())
    store.add(f"{name}.attn.weight", np.zeros((d, heads * slots * points)))
    store.add(f"{name}.attn.bias", np.zeros(heads * slots * points))


def _deformable(store, name, query, maps, ref, heads, points, normalization='joint', trace=None):
    nq, d = query.shape
    dh = d // heads
    slots = store[f"{name}.attn.weight"].shape[1] // (heads * points)
    frames = len(maps)
    if frames > slots:
        raise DimensionError(f"{name}: {frames} maps for {slots} temporal slots")
    offsets = dense(store, f"{name}.offset", query).reshape(nq, heads, slots, points, 2)
    logits = dense(store, f"{name}.attn", query).reshape(nq, heads, slots, points)[:, :, :frames]
    if normalization == 'joint':
        weights = softmax(logits.reshape(nq, heads, frames * points)).reshape(nq, heads, frames, points)
    else:
        weights = softmax(logits) * (1.0 / frames)
    if trace is not None:
        trace['weights'] = weights.values
    ref = as_tensor(ref).reshape(nq, 1, 1, 2)
    total = None
    for j, fmap in enumerate(maps):
        if fmap.shape[0] != d:
            raise DimensionError(f"{name}: map {fmap.shape} does not match query dim {d}")
        _, h, w = fmap.shape
        values = dense(store, f"{name}.value", fmap.reshape(d, h * w).T).T.reshape(heads, dh, h, w)
        loc = (ref + offsets[:, :, j]).transpose(1, 0, 2, 3).reshape(heads, nq * points, 2)
        sampled = grid_sample(values, loc).reshape(heads, nq, points, dh)
        wj = weights[:, :, j].transpose(1, 0, 2).reshape(heads, nq, points, 1)
        part = (sampled * wj).sum(axis=2)
        total = part if total is None else total + part
    return dense(store, f"{name}.out", _merge_heads(total))


def deformable_attention(store, name, query, fmap, ref, heads, points, trace=None):
    """ Each query attends `points` bilinear samples per head around its reference point. """
    return _deformable(store, name, query, [fmap], ref, heads, points, trace=trace)


def temporal_attention(store, name, query, history, ref, heads, points, normalization='joint', trace=None):
    """ deformable attention over the prior maps in history, most recent first; one softmax
        over all points of all maps per head unless normalization is 'per_frame'. """
    if len(history) == 0:
        raise TemporalContextError("temporal context required")
    return _deformable(store, name, query, list(history), ref, heads, points, normalization, trace)


def grid_reference_points(height, width):
    """ [H*W, 2] pixel positions in row-major order """
    v, u = np.meshgrid(np.linspace(0.0, 1.0, height), np.linspace(0.0, 1.0, width), indexing='ij')
    return Tensor(np.stack([u.ravel(), v.ravel()], -1))


def init_ffn(store, name, d, hidden, rng):
    init_linear(store, f"{name}.lin1", d, hidden, rng)
    init_linear(store, f"{name}.lin2", hidden, d, rng)


def ffn(store, name, x):
    return dense(store, f"{name}.lin2", dense(store, f"{name}.lin1", x).gelu())


def _norm(store, name, x):
    return layer_norm(x, store[f"{name}.gamma"], store[f"{name}.beta"])


def init_encoder(store, prefix, d, config, rng):
    for layer in range(config.encoder_layers):
        name = f"{prefix}.encoder.{layer}"
        init_attention(store, f"{name}.self", d, rng)
        init_layer_norm(store, f"{name}.norm1", d)
        if config.aggregation > 1:
            init_deformable(store, f"{name}.temporal", d, config.heads, config.points, rng,
                            slots=config.aggregation - 1, spread=config.offset_spread)
            init_layer_norm(store, f"{name}.norm2", d)
        init_ffn(store, f"{name}.ffn", d, d * config.ffn_ratio, rng)
        init_layer_norm(store, f"{name}.norm3", d)


def encoder_block(store, name, x, pos, history, ref, config, rng=None, training=False):
    """ Post-norm self-attention, temporal attention and FFN sublayers; without history or temporal
        parameters the temporal sublayer is skipped. """
    p = config.dropout
    q = x + pos
    z = _norm(store, f"{name}.norm1", x + dropout(attend(store, f"{name}.self", q, q, config.heads, value=x), p, rng, training))
    if len(history) and f"{name}.temporal.attn.weight" in store:
        t = temporal_attention(store, f"{name}.temporal", z + pos, history, ref, config.heads, config.points, config.temporal_norm)
        z = _norm(store, f"{name}.norm2", z + dropout(t, p, rng, training))
    return _norm(store, f"{name}.norm3", z + dropout(ffn(store, f"{name}.ffn", z), p, rng, training))


class FrameHistory:
    """ Ring of the most recent encoder outputs of one modality. """

    def __init__(self, capacity, modality):
        self.capacity = capacity
        self.modality = modality
        self.entries = collections.deque(maxlen=max(capacity, 0))

    def __len__(self):
        return len(self.entries)

    def push(self, fmap):
        if fmap.modality != self.modality:
            raise ValueError(f"{fmap.modality} map pushed into {self.modality} history")
        if self.entries and fmap.t_stamp <= max(e.t_stamp for e in self.entries):
            raise ValueError(f"history timestamps must increase, got {fmap.t_stamp}")
        if self.capacity > 0:
            self.entries.append(FeatureMap(fmap.tensor.detach(), fmap.t_stamp, fmap.modality))

    def recent(self):
        """ Stored maps, most recent first. """
        return sorted(self.entries, key=lambda e: e.t_stamp, reverse=True)

    def clear(self):
        self.entries.clear()


def temporal_encoder(store, fmap, history, config, pos, rng=None, training=False):
    """ Runs the encoder stack of fmap's modality and registers the result in history. """
    d, h, w = fmap.tensor.shape
    maps = [e.tensor for e in history.recent()]
    if any(m.shape != fmap.tensor.shape for m in maps):
        raise DimensionError(f"history maps do not match current map {fmap.tensor.shape}")
    x = fmap.sequence()
    pos = as_tensor(pos).reshape(d, h * w).T
    ref = grid_reference_points(h, w)
    layer = 0
    while f"{fmap.modality}.encoder.{layer}.norm1.gamma" in store:
        x = encoder_block(store, f"{fmap.modality}.encoder.{layer}", x, pos, maps, ref, config, rng, training)
        layer += 1
    out = FeatureMap(x.T.reshape(d, h, w), fmap.t_stamp, fmap.modality)
    history.push(out)
    return out


def init_decoder(store, d, attention, decoder, rng):
    store.add("decoder.query_embed", rng.normal((decoder.queries, d)))
    store.add("decoder.query_pos", rng.normal((decoder.queries, d)))
    init_linear(store, "decoder.reference", d, 2, rng)
    for layer in range(attention.decoder_layers):
        name = f"decoder.{layer}"
        init_attention(store, f"{name}.self", d, rng)
        init_layer_norm(store, f"{name}.norm1", d)
        init_deformable(store, f"{name}.cross", d, attention.heads, attention.points, rng, spread=attention.offset_spread)
        init_layer_norm(store, f"{name}.norm2", d)
        init_ffn(store, f"{name}.ffn", d, d * attention.ffn_ratio, rng)
        init_layer_norm(store, f"{name}.norm3", d)


def decoder_block(store, name, queries, query_pos, fused, ref, config, rng=None, training=False):
    """ Self attention among queries, deformable cross attention into the fused map, FFN. """
    p = config.dropout
    q = queries + query_pos
    x = _norm(store, f"{name}.norm1", queries + dropout(attend(store, f"{name}.self", q, q, config.heads, value=queries), p, rng, training))
    cross = deformable_attention(store, f"{name}.cross", x + query_pos, fused, ref, config.heads, config.points)
    x = _norm(store, f"{name}.norm2", x + dropout(cross, p, rng, training))
    return _norm(store, f"{name}.norm3", x + dropout(ffn(store, f"{name}.ffn", x), p, rng, training))


def decode(store, fused, config, rng=None, training=False):
    """ Query embeddings [queries, d] and their reference points [queries, 2] for a fused map. """
    query_pos = store["decoder.query_pos"]
    ref = dense(store, "decoder.reference", query_pos).sigmoid()
    hs = store["decoder.query_embed"]
    layer = 0
    while f"decoder.{layer}.norm1.gamma" in store:
        hs = decoder_block(store, f"decoder.{layer}", hs, query_pos, fused, ref, config, rng, training)
        layer += 1
    return hs, ref


def micro_config(**overrides):
    from .config import AttentionConfig
    values = dict(heads=2, points=2, aggregation=3, encoder_layers=2, decoder_layers=1, dropout=0.0, ffn_ratio=2)
    values.update(overrides)
    return AttentionConfig(**values)


def naive_attention(store, name, query, key, heads):
    P = {n: store[f"{name}.{n}.weight"].values for n in ('q', 'k', 'v', 'out')}
    B = {n: store[f"{name}.{n}.bias"].values for n in ('q', 'k', 'v', 'out')}
    d = query.shape[1]
    dh = d // heads
    out = np.zeros((len(query), d))
    for i, xq in enumerate(query):
        merged = np.zeros(d)
        for m in range(heads):
            sl = slice(m * dh, (m + 1) * dh)
            q = (xq @ P['q'] + B['q'])[sl]
            scores = np.array([q @ (xk @ P['k'] + B['k'])[sl] / np.sqrt(dh) for xk in key])
            a = np.exp(scores - scores.max())
            a /= a.sum()
            for j, xk in enumerate(key):
                merged[sl] += a[j] * (xk @ P['v'] + B['v'])[sl]
        out[i] = merged @ P['out'] + B['out']
    return out


@test
def attention_single_key_ignores_query():
    store = ParamStore()
    init_attention(store, 'a', 4, RngStream(1))
    key = Tensor(np.random.default_rng(1).normal(size=(1, 4)))
    queries = Tensor(np.random.default_rng(2).normal(size=(3, 4)))
    out = attend(store, 'a', queries, key, heads=2).values
    expected = dense(store, 'a.out', dense(store, 'a.v', key)).values
    for row in out:
        test.lt(np.abs(row - expected[0]).max(), 1e-12)


@test
def attention_identical_keys_equal_single_key():
    store = ParamStore()
    init_attention(store, 'a', 4, RngStream(2))
    k = np.random.default_rng(3).normal(size=(1, 4))
    q = Tensor(np.random.default_rng(4).normal(size=(2, 4)))
    one = attend(store, 'a', q, Tensor(k), heads=2).values
    many = attend(store, 'a', q, Tensor(np.repeat(k, 5, axis=0)), heads=2).values
    test.lt(np.abs(one - many).max(), 1e-12)


@test
def attention_matches_double_loop():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        heads = int(rng.integers(1, 5))
        d = heads * int(rng.integers(1, 4))
        store = ParamStore()
        init_attention(store, 'a', d, RngStream(seed))
        perturb(store, RngStream(seed + 1000), scale=0.3)
        q, k = rng.normal(size=(int(rng.integers(1, 5)), d)), rng.normal(size=(int(rng.integers(1, 7)), d))
        trace = {}
        out = attend(store, 'a', Tensor(q), Tensor(k), heads=heads, trace=trace).values
        test.lt(np.abs(out - naive_attention(store, 'a', q, k, heads)).max(), 1e-10)
        test.lt(np.abs(trace['weights'].sum(-1) - 1.0).max(), 1e-12)
    store = ParamStore()
    init_attention(store, 'a', 4, RngStream(1))
    with test.raises(DimensionError, "attention: query (2, 4), key (3, 8) and value (3, 8) do not fit"):
        attend(store, 'a', Tensor(np.zeros((2, 4))), Tensor(np.zeros((3, 8))), heads=1)


def identity_deformable(store, name, d):
    store[f"{name}.value.weight"].values[...] = np.eye(d)
    store[f"{name}.out.weight"].values[...] = np.eye(d)
    store[f"{name}.value.bias"].values[...] = 0.0
    store[f"{name}.out.bias"].values[...] = 0.0
    store[f"{name}.offset.bias"].values[...] = 0.0


@test
def deformable_attention_collapses_to_bilinear_sample():
    d, heads, points = 4, 2, 3
    store = ParamStore()
    init_deformable(store, 'x', d, heads, points, RngStream(5))
    identity_deformable(store, 'x', d)
    one_hot = np.full((heads, points), -1000.0)
    one_hot[:, 0] = 0.0
    store['x.attn.bias'].values[...] = one_hot.ravel()
    rng = np.random.default_rng(5)
    fmap = Tensor(rng.normal(size=(d, 5, 6)))
    ref = rng.uniform(0.05, 0.95, (7, 2))
    out = deformable_attention(store, 'x', Tensor(rng.normal(size=(7, d))), fmap, ref, heads, points).values
    test.lt(np.abs(out - bilinear_sample(fmap, ref).values).max(), 1e-12)
    store['x.attn.bias'].values[...] = 0.0
    trace = {}
    out = deformable_attention(store, 'x', Tensor(rng.normal(size=(7, d))), fmap, ref, heads, points, trace=trace).values
    test.lt(np.abs(out - bilinear_sample(fmap, ref).values).max(), 1e-12)
    test.lt(np.abs(trace['weights'] - 1 / points).max(), 1e-15)


def naive_deformable(store, name, query, maps, ref, heads, points):
    """ Per query, head, map and point loop using bilinear_sample. """
    d = query.shape[1]
    dh = d // heads
    W = lambda n: store[f"{name}.{n}.weight"].values
    B = lambda n: store[f"{name}.{n}.bias"].values
    slots = W('attn').shape[1] // (heads * points)
    out = np.zeros((len(query), d))
    for i, xq in enumerate(query):
        offsets = (xq @ W('offset') + B('offset')).reshape(heads, slots, points, 2)
        logits = (xq @ W('attn') + B('attn')).reshape(heads, slots, points)[:, :len(maps)]
        merged = np.zeros(d)
        for m in range(heads):
            a = np.exp(logits[m] - logits[m].max())
            a /= a.sum()
            sl = slice(m * dh, (m + 1) * dh)
            for j, fmap in enumerate(maps):
                values = np.einsum('chw,ce->ehw', fmap, W('value')) + B('value')[:, None, None]
                for l in range(points):
                    sample = bilinear_sample(values, ref[i] + offsets[m, j, l]).values
                    merged[sl] += a[j, l] * sample[sl]
        out[i] = merged @ W('out') + B('out')
    return out


@test
def deformable_attentions_match_point_loop():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        heads, points = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        slots = int(rng.integers(1, 4))
        d = heads * int(rng.integers(1, 3))
        h, w, nq = int(rng.integers(1, 6)), int(rng.integers(1, 6)), int(rng.integers(1, 4))
        maps = [rng.normal(size=(d, h, w)) for _ in range(int(rng.integers(1, slots + 1)))]
        q, ref = rng.normal(size=(nq, d)), rng.uniform(0, 1, (nq, 2))

        spatial = ParamStore()
        init_deformable(spatial, 's', d, heads, points, RngStream(seed))
        perturb(spatial, RngStream(seed + 1000), scale=0.3)
        out = deformable_attention(spatial, 's', Tensor(q), Tensor(maps[0]), ref, heads, points).values
        test.lt(np.abs(out - naive_deformable(spatial, 's', q, maps[:1], ref, heads, points)).max(), 1e-10)

        temporal = ParamStore()
        init_deformable(temporal, 't', d, heads, points, RngStream(seed + 2000), slots=slots)
        perturb(temporal, RngStream(seed + 3000), scale=0.3)
        out = temporal_attention(temporal, 't', Tensor(q), [Tensor(m) for m in maps], ref, heads, points).values
        test.lt(np.abs(out - naive_deformable(temporal, 't', q, maps, ref, heads, points)).max(), 1e-10)


def slot_zero(store, name, heads, points, slots, d):
    """ A single-map parameter set equal to slot 0 of a temporal one. """
    single = ParamStore()
    for proj in ('value', 'out'):
        single.add(f"{name}.{proj}.weight", store[f"{name}.{proj}.weight"].values.copy())
        single.add(f"{name}.{proj}.bias", store[f"{name}.{proj}.bias"].values.copy())
    for head, width in (('offset', 2), ('attn', 1)):
        w = store[f"{name}.{head}.weight"].values.reshape(d, heads, slots, points * width)[:, :, 0]
        b = store[f"{name}.{head}.bias"].values.reshape(heads, slots, points * width)[:, 0]
        single.add(f"{name}.{head}.weight", w.reshape(d, -1).copy())
        single.add(f"{name}.{head}.bias", b.ravel().copy())
    return single


@test
def one_prior_map_is_spatial_attention():
    for seed in range(100):
        rng = np.random.default_rng(seed)
        heads, points, slots = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 5))
        d = 2 * heads
        store = ParamStore()
        init_deformable(store, 't', d, heads, points, RngStream(seed), slots=slots)
        perturb(store, RngStream(seed + 1000), scale=0.4)
        fmap = Tensor(rng.normal(size=(d, int(rng.integers(1, 5)), int(rng.integers(1, 5)))))
        q, ref = Tensor(rng.normal(size=(3, d))), rng.uniform(0, 1, (3, 2))
        temporal = temporal_attention(store, 't', q, [fmap], ref, heads, points).values
        spatial = deformable_attention(slot_zero(store, 't', heads, points, slots, d), 't', q, fmap, ref, heads, points).values
        test.lt(np.abs(temporal - spatial).max(), 1e-10)


@test
def identical_history_maps_give_same_output():
    store = ParamStore()
    init_deformable(store, 't', 4, 2, 2, RngStream(7), slots=4)
    perturb(store, RngStream(8), scale=0.4)
    store['t.offset.weight'].values[...] = 0.0
    store['t.offset.bias'].values[...] = 0.0
    rng = np.random.default_rng(7)
    fmap, q, ref = Tensor(rng.normal(size=(4, 3, 3))), Tensor(rng.normal(size=(2, 4))), rng.uniform(0, 1, (2, 2))
    outs = []
    for k in (1, 2, 4):
        trace = {}
        outs.append(temporal_attention(store, 't', q, [fmap] * k, ref, 2, 2, trace=trace).values)
        test.lt(np.abs(trace['weights'].sum(axis=(2, 3)) - 1.0).max(), 1e-12)
    test.lt(np.abs(outs[0] - outs[1]).max(), 1e-12)
    test.lt(np.abs(outs[0] - outs[2]).max(), 1e-12)


@test
def per_frame_normalization_also_sums_to_one():
    store = ParamStore()
    init_deformable(store, 't', 4, 2, 3, RngStream(9), slots=3)
    perturb(store, RngStream(10))
    rng = np.random.default_rng(9)
    maps = [Tensor(rng.normal(size=(4, 3, 3))) for _ in range(3)]
    trace = {}
    temporal_attention(store, 't', Tensor(rng.normal(size=(2, 4))), maps, rng.uniform(0, 1, (2, 2)), 2, 3, 'per_frame', trace)
    test.lt(np.abs(trace['weights'].sum(axis=(2, 3)) - 1.0).max(), 1e-12)
    test.lt(np.abs(trace['weights'].sum(axis=3) - 1 / 3).max(), 1e-12)


@test
def temporal_attention_needs_history():
    store = ParamStore()
    init_deformable(store, 't', 4, 2, 2, RngStream(1), slots=2)
    with test.raises(TemporalContextError, "temporal context required"):
        temporal_attention(store, 't', Tensor(np.zeros((1, 4))), [], np.zeros((1, 2)), 2, 2)
    with test.raises(DimensionError, "t: 3 maps for 2 temporal slots"):
        temporal_attention(store, 't', Tensor(np.zeros((1, 4))), [Tensor(np.zeros((4, 2, 2)))] * 3, np.zeros((1, 2)), 2, 2)


def encoder_fixture(seed, **overrides):
    config = micro_config(**overrides)
    store = ParamStore()
    init_encoder(store, 'event', 4, config, RngStream(seed))
    perturb(store, RngStream(seed + 1), scale=0.4)
    rng = np.random.default_rng(seed)
    fmap = FeatureMap(Tensor(rng.normal(size=(4, 2, 3))), 40_000, 'event')
    pos = Tensor(0.1 * rng.normal(size=(4, 2, 3)))
    return config, store, fmap, pos


@test
def cold_start_block_is_attention_and_ffn():
    config, store, fmap, pos = encoder_fixture(11)
    x, p = fmap.sequence(), pos.reshape(4, 6).T
    out = encoder_block(store, 'event.encoder.0', x, p, [], grid_reference_points(2, 3), config).values
    q = x + p
    z = _norm(store, 'event.encoder.0.norm1', x + attend(store, 'event.encoder.0.self', q, q, 2, value=x))
    manual = _norm(store, 'event.encoder.0.norm3', z + ffn(store, 'event.encoder.0.ffn', z)).values
    test.lt(np.abs(out - manual).max(), 1e-12)
    warm = encoder_block(store, 'event.encoder.0', x, p, [fmap.tensor], grid_reference_points(2, 3), config).values
    test.gt(np.abs(out - warm).max(), 1e-6)


@test
def zero_parameters_stay_finite():
    config, store, fmap, pos = encoder_fixture(12)
    for param in store:
        if not param.name.endswith(('gamma', 'beta')):
            param.values[...] = 0.0
    history = FrameHistory(2, 'event')
    a = temporal_encoder(store, fmap, history, config, pos).tensor.values
    b = temporal_encoder(store, fmap, FrameHistory(2, 'event'), config, pos).tensor.values
    c = temporal_encoder(store, FeatureMap(fmap.tensor, 80_000, 'event'), history, config, pos).tensor.values
    test.truth(np.isfinite(a).all())
    test.truth(np.isfinite(c).all())
    test.eq(a.tolist(), b.tolist())


@test
def encoder_gradients_match_differences():
    for seed in range(10):
        config, store, fmap, pos = encoder_fixture(100 + seed)
        rng = np.random.default_rng(seed)
        prior = [Tensor(rng.normal(size=(4, 2, 3)))]
        weights = Tensor(rng.normal(size=(6, 4)))
        ref = grid_reference_points(2, 3)

        def loss():
            x, p = fmap.sequence(), pos.reshape(4, 6).T
            for layer in range(2):
                x = encoder_block(store, f"event.encoder.{layer}", x, p, prior, ref, config)
            return (x * weights).sum()

        test.truth(grad_check(loss, store).ok)


@test
def history_ring_is_bounded():
    config, store, fmap, pos = encoder_fixture(16, aggregation=9, encoder_layers=1)
    history = FrameHistory(config.aggregation - 1, 'event')
    first = temporal_encoder(store, fmap, history, config, pos)
    test.eq(1, len(history))
    test.eq((4, 2, 3), first.tensor.shape)
    for k in range(2, 13):
        temporal_encoder(store, FeatureMap(fmap.tensor, 40_000 * k, 'event'), history, config, pos)
        test.le(len(history), 8)
    test.eq(8, len(history))
    test.eq(480_000, history.recent()[0].t_stamp)
    test.eq(200_000, history.recent()[-1].t_stamp)
    with test.raises(ValueError, "history timestamps must increase, got 40000"):
        history.push(first)
    with test.raises(ValueError, "frame map pushed into event history"):
        history.push(FeatureMap(fmap.tensor, 1_000_000, 'frame'))


@test
def encoder_is_deterministic_and_order_independent():
    config, store, fmap, pos = encoder_fixture(17)
    h1, h2 = FrameHistory(2, 'event'), FrameHistory(2, 'event')
    rng = np.random.default_rng(17)
    priors = [FeatureMap(Tensor(rng.normal(size=(4, 2, 3))), t, 'event') for t in (0, 20_000)]
    for p in priors:
        h1.push(p)
        h2.push(p)
    h2.entries.reverse()
    a = temporal_encoder(store, fmap, h1, config, pos).tensor.values
    b = temporal_encoder(store, fmap, h2, config, pos).tensor.values
    test.eq(a.tolist(), b.tolist())


@test
def aggregation_one_has_no_temporal_sublayer():
    config, store, fmap, pos = encoder_fixture(18, aggregation=1)
    test.eq([], [n for n in store.names() if '.temporal.' in n])
    history = FrameHistory(0, 'event')
    temporal_encoder(store, fmap, history, config, pos)
    test.eq(0, len(history))


def decoder_fixture(seed, queries=3):
    from .config import DecoderConfig
    config = micro_config()
    store = ParamStore()
    init_decoder(store, 4, config, DecoderConfig(queries=queries, classes=3), RngStream(seed))
    perturb(store, RngStream(seed + 1), scale=0.4, prefix='decoder.0.cross.offset')
    return config, store


@test
def single_query_self_attention_is_value_path():
    config, store = decoder_fixture(21, queries=1)
    x = store['decoder.query_embed']
    q = x + store['decoder.query_pos']
    out = attend(store, 'decoder.0.self', q, q, config.heads, value=x).values
    test.lt(np.abs(out - dense(store, 'decoder.0.self.out', dense(store, 'decoder.0.self.v', x)).values).max(), 1e-12)


@test
def zero_fused_map_leaves_bias_terms():
    config, store = decoder_fixture(22)
    store['decoder.0.cross.offset.weight'].values[...] = 0.0
    store['decoder.0.cross.offset.bias'].values[...] = 0.0
    ref = np.random.default_rng(22).uniform(0.1, 0.9, (3, 2))
    q = Tensor(np.random.default_rng(23).normal(size=(3, 4)))
    out = deformable_attention(store, 'decoder.0.cross', q, Tensor(np.zeros((4, 3, 3))), ref, config.heads, config.points).values
    bias_only = dense(store, 'decoder.0.cross.out', store['decoder.0.cross.value.bias']).values
    test.lt(np.abs(out - bias_only).max(), 1e-12)


@test
def decoder_gradients_match_differences():
    for seed in range(10):
        config, store = decoder_fixture(200 + seed)
        perturb(store, RngStream(300 + seed), scale=0.4)
        rng = np.random.default_rng(seed)
        fused = Tensor(rng.normal(size=(4, 3, 3)))
        weights = Tensor(rng.normal(size=(3, 4)))

        def loss():
            hs, ref = decode(store, fused, config)
            return (hs * weights).sum() + ref.sum()

        hs, ref = decode(store, fused, config)
        test.eq((3, 4), hs.shape)
        test.truth(((ref.values > 0) & (ref.values < 1)).all())
        test.truth(grad_check(loss, store).ok)
