""" Event streams: parsing, storage, temporal binning and dense representations.

    An event is (x, y, t, p): pixel column and row, timestamp in microseconds,
    polarity +1 or -1. A stream keeps its events as column arrays sorted by t.

    Text format: one "t x y p" line per event.
    Binary format "evt1": a 16 byte header (magic "EVT1", u16 width, u16 height,
    u64 count) followed by count 16 byte little-endian records
    (i64 t, u16 x, u16 y, i8 p, 3 pad bytes).
"""

import dataclasses
import io
import logging

import numpy as np

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


MAGIC = b'EVT1'
HEADER = np.dtype([('magic', 'S4'), ('width', '<u2'), ('height', '<u2'), ('count', '<u8')])
RECORD = np.dtype({'names': ['t', 'x', 'y', 'p'],
                   'formats': ['<i8', '<u2', '<u2', 'i1'],
                   'offsets': [0, 8, 10, 12],
                   'itemsize': 16})


class EventParseError(ValueError):
    pass


class EventValidationError(ValueError):
    pass


class BinningError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class Geometry:
    width: int
    height: int

    def __str__(self):
        return f"{self.width}x{self.height}"


@dataclasses.dataclass
class EventStream:
    geometry: Geometry
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray

    @classmethod
    def empty(cls, geometry):
        return cls.from_arrays(geometry, [], [], [], [])

    @classmethod
    def from_arrays(cls, geometry, t, x, y, p):
        """ Builds a sorted, validated stream; input order is kept for equal timestamps. """
        t = np.asarray(t, dtype=np.int64)
        x, y = np.asarray(x, dtype=np.int64), np.asarray(y, dtype=np.int64)
        p = np.asarray(p, dtype=np.int8)
        validate(geometry, x, y, p)
        order = np.argsort(t, kind='stable')
        return cls(geometry, t[order], x[order], y[order], p[order])

    def __len__(self):
        return len(self.t)

    def between(self, t0, t1):
        """ Events with t0 <= t < t1, as a view. """
        lo, hi = np.searchsorted(self.t, [t0, t1], side='left')
        return EventStream(self.geometry, self.t[lo:hi], self.x[lo:hi], self.y[lo:hi], self.p[lo:hi])

    def merge(self, other):
        if other.geometry != self.geometry:
            raise EventValidationError(f"cannot merge {other.geometry} events into {self.geometry} stream")
        return EventStream.from_arrays(self.geometry,
                *(np.concatenate([getattr(self, f), getattr(other, f)]) for f in 'txyp'))

    def shifted(self, dt):
        return EventStream(self.geometry, self.t + dt, self.x, self.y, self.p)


def validate(geometry, x, y, p, offsets=None):
    bad = (x < 0) | (x >= geometry.width) | (y < 0) | (y >= geometry.height)
    if bad.any():
        i = int(np.argmax(bad))
        where = f" at byte {offsets[i]}" if offsets is not None else ""
        raise EventValidationError(
                f"event{where} outside {geometry} geometry: x={x[i]} y={y[i]}")
    bad = (p != 1) & (p != -1)
    if bad.any():
        i = int(np.argmax(bad))
        raise EventValidationError(f"polarity must be 1 or -1, got {p[i]}")


def parse_events(source, format='text', geometry=None):
    """ Parses text or evt1 bytes into a sorted EventStream. The text format
        carries no geometry, so it must be given. """
    if format == 'binary':
        return _parse_binary(source, geometry)
    if format != 'text':
        raise ValueError(f"unknown event format: {format}")
    if geometry is None:
        raise EventValidationError("text events need a sensor geometry")
    t, x, y, p, offsets = [], [], [], [], []
    offset = 0
    for line in source.splitlines(keepends=True):
        fields = line.split()
        if fields:
            try:
                if len(fields) != 4:
                    raise ValueError
                ti, xi, yi, pi = map(int, fields)
                if pi not in (1, -1):
                    raise ValueError
            except ValueError:
                raise EventParseError(f"malformed event at byte {offset}: {line.decode(errors='replace').strip()!r}") from None
            t.append(ti); x.append(xi); y.append(yi); p.append(pi)
            offsets.append(offset)
        offset += len(line)
    validate(geometry, np.asarray(x, dtype=np.int64), np.asarray(y, dtype=np.int64),
             np.asarray(p, dtype=np.int8), offsets)
    return EventStream.from_arrays(geometry, t, x, y, p)


def _parse_binary(source, geometry):
    if len(source) < HEADER.itemsize:
        raise EventParseError(f"truncated evt1 header at byte 0: {len(source)} bytes")
    header = np.frombuffer(source, HEADER, count=1)[0]
    if header['magic'] != MAGIC:
        raise EventParseError(f"bad evt1 magic at byte 0: {bytes(header['magic'])!r}")
    found = Geometry(int(header['width']), int(header['height']))
    if geometry is not None and geometry != found:
        raise EventValidationError(f"evt1 geometry {found} differs from expected {geometry}")
    count = int(header['count'])
    body = len(source) - HEADER.itemsize
    if body != count * RECORD.itemsize:
        complete = min(count, body // RECORD.itemsize)
        raise EventParseError(
                f"truncated evt1 record at byte {HEADER.itemsize + complete * RECORD.itemsize}:"
                f" header says {count} events")
    records = np.frombuffer(source, RECORD, count=count, offset=HEADER.itemsize)
    x, y, p = records['x'].astype(np.int64), records['y'].astype(np.int64), records['p'].astype(np.int8)
    bad = (p != 1) & (p != -1)
    if bad.any():
        i = int(np.argmax(bad))
        raise EventParseError(f"bad polarity {p[i]} at byte {HEADER.itemsize + i * RECORD.itemsize + 12}")
    offsets = HEADER.itemsize + np.arange(count) * RECORD.itemsize
    validate(found, x, y, p, offsets)
    return EventStream.from_arrays(found, records['t'], x, y, p)


def write_events(stream, format='text'):
    if format == 'text':
        out = io.BytesIO()
        np.savetxt(out, np.stack([stream.t, stream.x, stream.y, stream.p.astype(np.int64)], axis=1)
                   .reshape(-1, 4), fmt='%d')
        return out.getvalue()
    if format != 'binary':
        raise ValueError(f"unknown event format: {format}")
    header = np.array([(MAGIC, stream.geometry.width, stream.geometry.height, len(stream))], HEADER)
    records = np.zeros(len(stream), RECORD)
    records['t'], records['x'], records['y'], records['p'] = stream.t, stream.x, stream.y, stream.p
    return header.tobytes() + records.tobytes()


@dataclasses.dataclass(frozen=True)
class BinningSpec:
    window: int
    stride: int
    t_start: int
    t_end: int

    def __post_init__(self):
        if self.window <= 0 or self.stride <= 0:
            raise BinningError(f"window and stride must be positive, got {self.window} and {self.stride}")
        if self.t_end <= self.t_start:
            raise BinningError(f"empty time range [{self.t_start}, {self.t_end})")

    def starts(self):
        """ Bin starts: every stride while a whole window fits, at least one bin. """
        span = self.t_end - self.t_start
        n = (span - self.window) // self.stride + 1 if span >= self.window else 1
        return [self.t_start + k * self.stride for k in range(n)]


@dataclasses.dataclass
class TemporalBin:
    index: int
    t_begin: int
    t_end: int
    events: EventStream

    @property
    def t_stamp(self):
        return self.t_end


def slice_bins(stream, spec):
    bins = []
    for k, start in enumerate(spec.starts()):
        end = min(start + spec.window, spec.t_end)
        bins.append(TemporalBin(k, start, end, stream.between(start, end)))
    empty = sum(1 for b in bins if len(b.events) == 0)
    if empty:
        logger.debug("%d of %d bins are empty", empty, len(bins))
    return bins


@dataclasses.dataclass
class EventTensor:
    kind: str
    tensor: np.ndarray
    t_stamp: int
    bin_index: int


def event_image(bin, geometry, normalize=False):
    """ Channel 0 counts positive events per pixel, channel 1 negative ones. """
    ev = bin.events
    image = np.zeros((2, geometry.height, geometry.width))
    np.add.at(image, ((ev.p < 0).astype(np.int64), ev.y, ev.x), 1.0)
    if normalize and image.max() > 0:
        image /= image.max()
    return EventTensor('event_image', image, bin.t_stamp, bin.index)


def voxel_grid(bin, geometry, B=5):
    """ Polarity deposited linearly between the two nearest of B channel
        centers spread uniformly from t_begin (channel 0) towards t_end. """
    if B < 1:
        raise BinningError(f"voxel grid needs B >= 1, got {B}")
    duration = bin.t_end - bin.t_begin
    if duration <= 0:
        raise BinningError(f"voxel grid of zero-duration bin at {bin.t_begin}")
    ev = bin.events
    grid = np.zeros((B, geometry.height, geometry.width))
    ts = (B - 1) * (ev.t - bin.t_begin) / duration
    lower = np.clip(np.floor(ts).astype(np.int64), 0, B - 1)
    frac = ts - lower
    upper = np.minimum(lower + 1, B - 1)
    pol = ev.p.astype(np.float64)
    np.add.at(grid, (lower, ev.y, ev.x), pol * (1.0 - frac))
    np.add.at(grid, (upper, ev.y, ev.x), pol * frac)
    return EventTensor('voxel_grid', grid, bin.t_stamp, bin.index)


def timestamp_sigmoid(bin, geometry, tau):
    """ Per pixel and polarity: logistic((t_last - t_end) / tau) of the latest event, 0 without events. """
    if tau <= 0:
        raise BinningError(f"time constant must be positive, got {tau}")
    ev = bin.events
    latest = np.full((2, geometry.height, geometry.width), np.iinfo(np.int64).min)
    np.maximum.at(latest, ((ev.p < 0).astype(np.int64), ev.y, ev.x), ev.t)
    seen = latest != np.iinfo(np.int64).min
    out = np.zeros(latest.shape)
    z = (latest[seen] - bin.t_end) / tau
    out[seen] = 0.5 * (1.0 + np.tanh(0.5 * z))
    return EventTensor('timestamp_sigmoid', out, bin.t_stamp, bin.index)


REPRESENTATIONS = ('event_image', 'voxel_grid', 'timestamp_sigmoid')


def channels(kind, voxel_bins=5):
    return {'event_image': 2, 'voxel_grid': voxel_bins, 'timestamp_sigmoid': 2}[kind]


def represent(bin, geometry, config):
    """ Rasterizes a bin with the representation selected in a RepresentationConfig. """
    kind = config.kind
    if kind == 'event_image':
        return event_image(bin, geometry, normalize=config.normalize)
    if kind == 'voxel_grid':
        return voxel_grid(bin, geometry, B=config.voxel_bins)
    if kind == 'timestamp_sigmoid':
        return timestamp_sigmoid(bin, geometry, tau=config.tau)
    raise ValueError(f"unknown representation: {kind}")


G = Geometry(346, 260)


@test
def parse_single_text_event():
    s = parse_events(b"1000 5 7 1\n", geometry=G)
    test.eq(1, len(s))
    test.eq((5, 7, 1000, 1), (s.x[0], s.y[0], s.t[0], s.p[0]))
    test.eq(0, len(parse_events(b"", geometry=G)))


@test
def parse_sorts_stably():
    s = parse_events(b"30 1 1 1\n10 2 2 -1\n30 3 3 -1\n20 4 4 1\n", geometry=G)
    test.eq([10, 20, 30, 30], s.t.tolist())
    test.eq([2, 4, 1, 3], s.x.tolist())


@test
def parse_errors_carry_offsets():
    with test.raises(EventParseError, "malformed event at byte 11: '12 3 x 1'"):
        parse_events(b"1000 5 7 1\n12 3 x 1\n", geometry=G)
    with test.raises(EventParseError, "malformed event at byte 0: '1 2 3 0'"):
        parse_events(b"1 2 3 0\n", geometry=G)
    with test.raises(EventValidationError, "event at byte 9 outside 346x260 geometry: x=346 y=0"):
        parse_events(b"1 0 0 -1\n2 346 0 1\n", geometry=G)


@test
def binary_errors():
    good = write_events(EventStream.from_arrays(G, [5, 6], [1, 2], [3, 4], [1, -1]), 'binary')
    test.eq(16 + 2 * 16, len(good))
    with test.raises(EventParseError, "truncated evt1 record at byte 32: header says 2 events"):
        parse_events(good[:-1], 'binary')
    with test.raises(EventParseError, "bad evt1 magic at byte 0: b'EVT2'"):
        parse_events(b'EVT2' + good[4:], 'binary')
    with test.raises(EventValidationError, "evt1 geometry 346x260 differs from expected 10x10"):
        parse_events(good, 'binary', geometry=Geometry(10, 10))


@test
def round_trip_random_events():
    rng = np.random.default_rng(11)
    n = 100_000
    s = EventStream.from_arrays(G, rng.integers(0, 10**6, n), rng.integers(0, 346, n),
                                rng.integers(0, 260, n), rng.choice([-1, 1], n))
    for format in ('binary', 'text'):
        back = parse_events(write_events(s, format), format, geometry=G)
        for f in 'txyp':
            test.eq(getattr(s, f).tolist(), getattr(back, f).tolist())


@test
def partition_bins_conserve_events():
    rng = np.random.default_rng(12)
    s = EventStream.from_arrays(G, rng.integers(0, 120_000, 500), rng.integers(0, 346, 500),
                                rng.integers(0, 260, 500), rng.choice([-1, 1], 500))
    bins = slice_bins(s, BinningSpec(40_000, 40_000, 0, 120_000))
    test.eq(3, len(bins))
    test.eq([(0, 40_000), (40_000, 80_000), (80_000, 120_000)], [(b.t_begin, b.t_end) for b in bins])
    test.eq(500, sum(len(b.events) for b in bins))
    for b in bins:
        test.truth(((b.events.t >= b.t_begin) & (b.events.t < b.t_end)).all())


@test
def sliding_bins_at_hundred_hertz():
    bins = slice_bins(EventStream.empty(G), BinningSpec(40_000, 10_000, 0, 1_000_000))
    test.eq(97, len(bins))
    test.eq(40_000, bins[0].t_stamp)
    test.eq(1_000_000, bins[-1].t_stamp)
    test.truth(all(len(b.events) == 0 for b in bins))


@test
def binning_spec_checks():
    with test.raises(BinningError, "empty time range [10, 10)"):
        BinningSpec(1, 1, 10, 10)
    with test.raises(BinningError, "window and stride must be positive, got 0 and 1"):
        BinningSpec(0, 1, 0, 10)


@test
def event_image_counts():
    s = EventStream.from_arrays(G, [1, 2], [3, 3], [4, 4], [1, 1])
    image = event_image(TemporalBin(0, 0, 10, s), G).tensor
    test.eq(2.0, image[0, 4, 3])
    test.eq(2.0, image.sum())
    test.eq((2, 260, 346), image.shape)


@test
def event_image_matches_scalar_loop():
    rng = np.random.default_rng(13)
    geometry = Geometry(8, 6)
    s = EventStream.from_arrays(geometry, rng.integers(0, 100, 100), rng.integers(0, 8, 100),
                                rng.integers(0, 6, 100), rng.choice([-1, 1], 100))
    image = event_image(TemporalBin(0, 0, 100, s), geometry).tensor
    expect = np.zeros((2, 6, 8))
    for i in range(len(s)):
        expect[0 if s.p[i] > 0 else 1, s.y[i], s.x[i]] += 1
    test.eq(expect.tolist(), image.tolist())
    normalized = event_image(TemporalBin(0, 0, 100, s), geometry, normalize=True).tensor
    test.eq(1.0, normalized.max())


@test
def voxel_grid_weights():
    geometry = Geometry(4, 4)
    # B=5 over [0, 400): channel centers at 0, 100, 200, 300, 400
    s = EventStream.from_arrays(geometry, [100, 250], [1, 2], [1, 2], [1, -1])
    grid = voxel_grid(TemporalBin(0, 0, 400, s), geometry, B=5).tensor
    test.eq(1.0, grid[1, 1, 1])
    test.eq(-0.5, grid[2, 2, 2])
    test.eq(-0.5, grid[3, 2, 2])
    test.eq(0.0, grid.sum())


@test
def voxel_grid_conserves_polarity():
    rng = np.random.default_rng(14)
    s = EventStream.from_arrays(G, rng.integers(0, 40_000, 1000), rng.integers(0, 346, 1000),
                                rng.integers(0, 260, 1000), rng.choice([-1, 1], 1000))
    grid = voxel_grid(TemporalBin(0, 0, 40_000, s), G).tensor
    test.lt(abs(grid.sum() - s.p.sum()), 1e-9)
    with test.raises(BinningError, "voxel grid of zero-duration bin at 5"):
        voxel_grid(TemporalBin(0, 5, 5, s), G)


@test
def timestamp_sigmoid_values():
    geometry = Geometry(3, 1)
    tau = 1000.0
    t_end = 10_000
    t_quarter = t_end - tau * np.log(3)
    s = EventStream(geometry, np.array([int(t_quarter), t_end]), np.array([0, 1]),
                    np.array([0, 0]), np.array([1, -1], dtype=np.int8))
    out = timestamp_sigmoid(TemporalBin(0, 0, t_end, s), geometry, tau).tensor
    test.eq(0.0, out[0, 0, 2])
    test.eq(0.5, out[1, 0, 1])
    expect = 1 / (1 + np.exp(-(int(t_quarter) - t_end) / tau))
    test.lt(abs(out[0, 0, 0] - expect), 1e-12)
    test.lt(abs(expect - 0.25), 1e-3)


@test
def representations_ignore_same_time_order():
    geometry = Geometry(4, 4)
    t, x, y, p = [5, 5, 5], [1, 2, 1], [1, 1, 1], [1, -1, -1]
    a = EventStream.from_arrays(geometry, t, x, y, p)
    b = EventStream.from_arrays(geometry, t[::-1], x[::-1], y[::-1], p[::-1])
    for rep in (lambda bin: event_image(bin, geometry), lambda bin: voxel_grid(bin, geometry, 3),
                lambda bin: timestamp_sigmoid(bin, geometry, 10.0)):
        test.eq(rep(TemporalBin(0, 0, 10, a)).tensor.tolist(), rep(TemporalBin(0, 0, 10, b)).tensor.tolist())


@test
def merge_keeps_order():
    a = EventStream.from_arrays(G, [1, 5], [0, 0], [0, 0], [1, 1])
    b = EventStream.from_arrays(G, [3], [1], [1], [-1])
    test.eq([1, 3, 5], a.merge(b).t.tolist())
    test.eq([3], a.merge(b).between(2, 5).t.tolist())
