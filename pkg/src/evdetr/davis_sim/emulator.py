""" DVS pixel model: events from log-intensity threshold crossings.

    Every pixel memorizes a reference log intensity. The sharp scene is
    sampled every sim_step_us; whenever the log intensity moved n >= 1
    thresholds away from the reference, n events with the sign of the change
    are emitted at the linearly interpolated crossing times and the reference
    advances by n thresholds.
"""

import logging

import numpy as np

from ..events import EventStream, Geometry
from .scene import SceneError, CameraModel, SceneObject, SceneScript, render_sharp

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


class DvsEmulator:

    def __init__(self, camera, rng=None):
        self.camera = camera
        self.rng = rng
        shape = camera.height, camera.width
        self.thresholds = np.full(shape, camera.threshold)
        if camera.threshold_mismatch > 0:
            spread = rng.normal(shape, scale=camera.threshold_mismatch)
            self.thresholds = camera.threshold * np.maximum(0.01, 1.0 + spread)
        self.reference = None
        self.previous = None
        self.last_event = np.full(shape, np.iinfo(np.int64).min // 2)

    def reset(self, log_frame):
        self.reference = log_frame.copy()
        self.previous = log_frame.copy()

    def step(self, log_frame, t_prev, t_now):
        """ Advances the pixel model from t_prev to t_now (us); returns (t, x, y, p) arrays. """
        diff = log_frame - self.reference
        counts = np.floor(np.abs(diff) / self.thresholds + 1e-9).astype(np.int64)
        ys, xs = np.nonzero(counts)
        if len(ys) == 0:
            self.previous = log_frame.copy()
            return _no_events()
        n = counts[ys, xs]
        sign = np.sign(diff[ys, xs])
        theta = self.thresholds[ys, xs]
        start, ref = self.previous[ys, xs], self.reference[ys, xs]
        change = log_frame[ys, xs] - start
        rep = np.repeat(np.arange(len(n)), n)
        k = np.arange(len(rep)) - np.repeat(np.cumsum(n) - n, n) + 1
        level = ref[rep] + sign[rep] * k * theta[rep]
        with np.errstate(divide='ignore', invalid='ignore'):
            frac = np.where(change[rep] != 0, (level - start[rep]) / change[rep], 1.0)
        dt = t_now - t_prev
        t = t_prev + np.clip(np.ceil(np.clip(frac, 0.0, 1.0) * dt - 1e-6), 1, dt).astype(np.int64)
        x, y, p = xs[rep], ys[rep], sign[rep].astype(np.int8)
        self.reference[ys, xs] += sign * n * theta
        self.previous = log_frame.copy()
        if self.camera.refractory_us > 0:
            t, x, y, p = self._refractory(t, x, y, p)
        order = np.argsort(t, kind='stable')
        return t[order], x[order], y[order], p[order]

    def _refractory(self, t, x, y, p):
        keep = np.zeros(len(t), dtype=bool)
        for i in np.argsort(t, kind='stable'):
            if t[i] - self.last_event[y[i], x[i]] >= self.camera.refractory_us:
                keep[i] = True
                self.last_event[y[i], x[i]] = t[i]
        return t[keep], x[keep], y[keep], p[keep]

    def background_noise(self, t_prev, t_now):
        """ Poisson background events, uniform in time over the step, random sign. """
        rate = self.camera.background_rate_hz
        if rate <= 0:
            return _no_events()
        counts = self.rng.poisson(rate * (t_now - t_prev) * 1e-6, self.thresholds.shape)
        ys, xs = np.nonzero(counts)
        rep = np.repeat(np.arange(len(ys)), counts[ys, xs])
        t = self.rng.integers(t_prev + 1, t_now + 1, len(rep)).astype(np.int64)
        p = np.where(self.rng.random(len(rep)) < 0.5, -1, 1).astype(np.int8)
        return t, xs[rep], ys[rep], p


def _no_events():
    return (np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int8))


def log_intensity(scene, camera, t_us):
    image = render_sharp(scene, camera, t_us * 1e-6)
    if image.min() <= 0:
        raise SceneError(f"non-positive intensity at t={t_us} us")
    return np.log(image)


def step_times(t0, t1, step):
    return list(range(t0, t1, step)) + [t1]


def generate_events(scene, camera, t0, t1, rng=None):
    """ Events in (t0, t1] microseconds from the unblurred, illuminated scene. """
    if not t0 < t1:
        raise SceneError(f"empty event interval [{t0}, {t1}]")
    emulator = DvsEmulator(camera, rng)
    times = step_times(t0, t1, camera.sim_step_us)
    emulator.reset(log_intensity(scene, camera, times[0]))
    parts = []
    for t_prev, t_now in zip(times[:-1], times[1:]):
        parts.append(emulator.step(log_intensity(scene, camera, t_now), t_prev, t_now))
        parts.append(emulator.background_noise(t_prev, t_now))
    t, x, y, p = (np.concatenate(c) for c in zip(*parts))
    if camera.jitter_us > 0:
        t = np.clip(t + np.rint(rng.normal(len(t), scale=camera.jitter_us)).astype(np.int64), t0 + 1, t1)
    stream = EventStream.from_arrays(Geometry(camera.width, camera.height), t, x, y, p)
    logger.debug("%d events in (%d, %d] us", len(stream), t0, t1)
    return stream


def run_frames(camera, frames, times):
    emulator = DvsEmulator(camera)
    emulator.reset(np.log(frames[0]))
    out = [emulator.step(np.log(f), a, b) for f, a, b in zip(frames[1:], times[:-1], times[1:])]
    return [np.concatenate(c) for c in zip(*out)]


tiny = CameraModel(width=2, height=1, threshold=0.15, frame_period_us=40_000, sim_step_us=1_000)


@test
def static_scene_is_silent():
    scene = SceneScript(0.2, 0.4, (SceneObject(0, (40.0, 30.0), (10.0, 8.0)),))
    stream = generate_events(scene, CameraModel(width=64, height=48), 0, 200_000)
    test.eq(0, len(stream))


@test
def two_thresholds_give_two_events():
    theta = 0.15
    frames = [np.array([[1.0, 1.0]]), np.array([[np.exp(2 * theta), 1.0]])]
    t, x, y, p = run_frames(tiny, frames, [0, 1000])
    test.eq([0, 0], x.tolist())
    test.eq([1, 1], p.tolist())
    test.eq([500, 1000], t.tolist())


@test
def darkening_gives_negative_event():
    frames = [np.array([[1.0, 1.0]]), np.array([[1.0, np.exp(-0.15)]])]
    t, x, y, p = run_frames(tiny, frames, [0, 1000])
    test.eq([1], x.tolist())
    test.eq([-1], p.tolist())


@test
def reference_advances_by_thresholds():
    frames = [np.array([[1.0, 1.0]]), np.array([[np.exp(0.2), 1.0]]), np.array([[np.exp(0.32), 1.0]])]
    t, x, y, p = run_frames(tiny, frames, [0, 1000, 2000])
    test.eq([1, 1], p.tolist())
    test.eq(1, int((t <= 1000).sum()))


def moving_scene(rng, duration=0.1):
    objects = []
    for z in range(3):
        objects.append(SceneObject(
            int(rng.integers(0, 3)),
            tuple(rng.uniform(10, 50, 2)),
            tuple(rng.uniform(4, 16, 2)),
            motion=((0.0, *rng.uniform(-150, 150, 2)),),
            intensity=float(rng.uniform(0.05, 1.0)),
            z=z))
    illumination = ((0.0, 1.0), (duration, float(rng.uniform(0.5, 1.5))))
    return SceneScript(duration, float(rng.uniform(0.1, 0.9)), tuple(objects), illumination)


@test
def reconstruction_invariant_on_random_scenes():
    camera = CameraModel(width=24, height=18)
    for seed in range(20):
        rng = np.random.default_rng(seed)
        scene = moving_scene(rng, duration=0.03)
        stream = generate_events(scene, camera, 0, 30_000)
        base = log_intensity(scene, camera, 0)
        signed = np.zeros_like(base)
        cursor = 0
        for t_now in step_times(0, 30_000, camera.sim_step_us)[1:]:
            upto = np.searchsorted(stream.t, t_now, side='right')
            np.add.at(signed, (stream.y[cursor:upto], stream.x[cursor:upto]), stream.p[cursor:upto])
            cursor = upto
            residual = camera.threshold * signed - (log_intensity(scene, camera, t_now) - base)
            test.le(np.abs(residual).max(), camera.threshold + 1e-9)
        test.truth((np.diff(stream.t) >= 0).all())
        test.truth(((stream.t > 0) & (stream.t <= 30_000)).all())


@test
def background_noise_rate():
    from ..tensorcore import RngStream
    camera = CameraModel(width=32, height=32, background_rate_hz=10.0)
    stream = generate_events(SceneScript(1.0), camera, 0, 1_000_000, rng=RngStream(5))
    test.truth(8_000 < len(stream) < 12_500)
    test.truth(0.4 < (stream.p > 0).mean() < 0.6)


@test
def refractory_period_thins_events():
    camera = CameraModel(width=2, height=1, refractory_us=800)
    frames = [np.array([[1.0, 1.0]]), np.array([[np.exp(0.45), 1.0]])]
    emulator = DvsEmulator(camera)
    emulator.reset(np.log(frames[0]))
    t, x, y, p = emulator.step(np.log(frames[1]), 0, 1000)
    test.eq(1, len(t))


@test
def non_positive_intensity_rejected():
    scene = SceneScript(0.1, 0.5, illumination=((0.0, 1.0), (0.1, 1.0)))
    object.__setattr__(scene, 'background', 0.0)
    with test.raises(SceneError, "non-positive intensity at t=0 us"):
        generate_events(scene, tiny, 0, 1000)
