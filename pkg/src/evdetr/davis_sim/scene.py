""" Scripted scenes of moving rectangles and the frames and labels a DAVIS sees of them.

    Continuous image coordinates: pixel (row i, column j) covers [j, j+1) x [i, i+1).
    Scene time is in seconds, camera periods in microseconds.
"""

import dataclasses
import logging

import numpy as np

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


CLASSES = ('car', 'pedestrian', 'two-wheeler')


class SceneError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class SceneObject:
    """ A rectangle with piecewise constant velocity.

        motion: ((t_from, vx, vy), ...) in seconds and pixels/s, first t_from is 0.
    """
    class_id: int
    center: tuple
    size: tuple
    motion: tuple = ((0.0, 0.0, 0.0),)
    intensity: float = 0.8
    z: int = 0

    def __post_init__(self):
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise SceneError(f"object size must be positive, got {self.size}")
        if self.intensity <= 0:
            raise SceneError(f"object intensity must be positive, got {self.intensity}")
        if self.class_id not in range(len(CLASSES)):
            raise SceneError(f"unknown class id {self.class_id}")

    def position(self, t):
        cx, cy = self.center
        for k, (t_from, vx, vy) in enumerate(self.motion):
            if t <= t_from:
                break
            t_to = self.motion[k + 1][0] if k + 1 < len(self.motion) else np.inf
            dt = min(t, t_to) - t_from
            cx, cy = cx + vx * dt, cy + vy * dt
        return cx, cy

    def box(self, t):
        """ Unclipped (x, y, w, h) with upper-left corner. """
        (cx, cy), (w, h) = self.position(t), self.size
        return cx - w / 2, cy - h / 2, w, h


@dataclasses.dataclass(frozen=True)
class SceneScript:
    duration: float
    background: float = 0.5
    objects: tuple = ()
    illumination: tuple = ()
    blur_windows: tuple = ()
    scenario: str = 'normal'

    def __post_init__(self):
        if self.duration <= 0:
            raise SceneError(f"scene duration must be positive, got {self.duration}")
        if self.background <= 0:
            raise SceneError(f"background intensity must be positive, got {self.background}")
        if any(m <= 0 for _, m in self.illumination):
            raise SceneError("illumination multiplier must be positive")

    def illumination_at(self, t):
        if not self.illumination:
            return 1.0
        ts, ms = zip(*self.illumination)
        return float(np.interp(t, ts, ms))

    def blurred_at(self, t):
        return any(t0 <= t <= t1 for t0, t1 in self.blur_windows)


@dataclasses.dataclass(frozen=True)
class CameraModel:
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

    def __post_init__(self):
        if self.threshold <= 0:
            raise SceneError(f"contrast threshold must be positive, got {self.threshold}")
        if not 0 < self.sim_step_us < self.frame_period_us:
            raise SceneError(f"simulation step {self.sim_step_us} us must be below frame period {self.frame_period_us} us")

    @classmethod
    def from_config(cls, sensor):
        return cls(**{f.name: getattr(sensor, f.name) for f in dataclasses.fields(cls)})

    def frame_times(self, duration):
        """ Frame timestamps k * period < duration, in microseconds. """
        duration_us = round(duration * 1e6)
        return list(range(0, duration_us, self.frame_period_us))


@dataclasses.dataclass(frozen=True)
class LabelBox:
    obj_idx: int
    x: float
    y: float
    w: float
    h: float
    class_id: int


@dataclasses.dataclass(frozen=True)
class GroundTruthLabel:
    t: int
    boxes: tuple


def coverage(lo, hi, n):
    """ Overlap of [lo, hi) with each unit cell [j, j+1), j < n. """
    j = np.arange(n)
    return np.clip(np.minimum(j + 1, hi) - np.maximum(j, lo), 0.0, 1.0)


def render_sharp(scene, camera, t):
    """ Scene intensity at t without blur, illumination applied. """
    image = np.full((camera.height, camera.width), float(scene.background))
    for obj in sorted(scene.objects, key=lambda o: o.z):
        x, y, w, h = obj.box(t)
        cover = np.outer(coverage(y, y + h, camera.height), coverage(x, x + w, camera.width))
        image = image * (1.0 - cover) + obj.intensity * cover
    return image * scene.illumination_at(t)


def render_frame(scene, camera, t):
    """ Noise-free intensity image at t seconds: painter's algorithm by z-order,
        averaged over the trailing exposure window where blur is active. """
    if not 0 <= t <= scene.duration:
        raise SceneError(f"time {t} outside scene [0, {scene.duration}]")
    if not scene.blurred_at(t):
        return render_sharp(scene, camera, t)
    start = max(0.0, t - camera.exposure_us * 1e-6)
    times = np.linspace(start, t, camera.exposure_samples)
    return np.mean([render_sharp(scene, camera, s) for s in times], axis=0)


def capture_frame(scene, camera, t, rng):
    """ 8-bit grayscale frame: rendered intensity plus Gaussian pixel noise. """
    image = render_frame(scene, camera, t)
    if camera.noise_sigma > 0:
        image = image + rng.normal(image.shape, scale=camera.noise_sigma)
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def emit_labels(scene, camera):
    """ One label per frame timestamp; boxes clipped to the image, invisible objects left out. """
    labels = []
    for t_us in camera.frame_times(scene.duration):
        boxes = []
        for idx, obj in enumerate(scene.objects):
            x, y, w, h = obj.box(t_us * 1e-6)
            x0, y0 = max(0.0, x), max(0.0, y)
            x1, y1 = min(float(camera.width), x + w), min(float(camera.height), y + h)
            if x1 > x0 and y1 > y0:
                boxes.append(LabelBox(idx, x0, y0, x1 - x0, y1 - y0, obj.class_id))
        labels.append(GroundTruthLabel(t_us, tuple(boxes)))
    return labels


small = CameraModel(width=8, height=6, frame_period_us=40_000)


@test
def object_pixel_takes_object_intensity():
    scene = SceneScript(1.0, 0.3, (SceneObject(0, (4.0, 3.0), (4.0, 2.0), intensity=0.8),))
    image = render_frame(scene, small, 0.0)
    test.eq(0.8, image[2, 3])
    test.eq(0.3, image[0, 0])
    test.eq((6, 8), image.shape)


@test
def empty_scene_is_uniform():
    image = render_frame(SceneScript(1.0, 0.42), small, 0.5)
    test.eq({0.42}, set(image.ravel().tolist()))


@test
def higher_z_wins_overlap():
    low = SceneObject(0, (3.0, 3.0), (4.0, 4.0), intensity=0.2, z=0)
    high = SceneObject(1, (5.0, 3.0), (4.0, 4.0), intensity=0.9, z=1)
    for objects in ((low, high), (high, low)):
        image = render_frame(SceneScript(1.0, 0.5, objects), small, 0.0)
        test.eq(0.9, image[3, 4])
        test.eq(0.2, image[3, 2])


@test
def partial_coverage_blends():
    obj = SceneObject(0, (2.0, 3.0), (3.0, 6.0), intensity=1.0)
    image = render_frame(SceneScript(1.0, 0.5, (obj,)), small, 0.0)
    test.eq([0.75, 1.0, 1.0, 0.75, 0.5], image[0, :5].tolist())


@test
def illumination_scales_everything():
    scene = SceneScript(1.0, 0.5, illumination=((0.0, 1.0), (1.0, 0.2)))
    test.lt(abs(render_frame(scene, small, 0.5)[0, 0] - 0.3), 1e-12)


@test
def blur_averages_exposure():
    obj = SceneObject(0, (2.0, 3.0), (2.0, 6.0), motion=((0.0, 100.0, 0.0),), intensity=1.0)
    sharp = SceneScript(1.0, 0.5, (obj,))
    blurred = SceneScript(1.0, 0.5, (obj,), blur_windows=((0.0, 1.0),))
    camera = CameraModel(width=8, height=6, exposure_us=20_000, exposure_samples=5)
    a, b = render_frame(sharp, camera, 0.02), render_frame(blurred, camera, 0.02)
    test.eq(1.0, a[0, 3])
    test.eq(0.5, a[0, 1])
    test.lt(b[0, 3], 1.0)
    test.gt(b[0, 1], 0.5)


@test
def render_time_checked():
    with test.raises(SceneError, "time 1.5 outside scene [0, 1.0]"):
        render_frame(SceneScript(1.0), small, 1.5)


@test
def scene_validation():
    with test.raises(SceneError, "object intensity must be positive, got 0.0"):
        SceneObject(0, (1, 1), (1, 1), intensity=0.0)
    with test.raises(SceneError, "contrast threshold must be positive, got 0.0"):
        CameraModel(threshold=0.0)
    with test.raises(SceneError, "simulation step 40000 us must be below frame period 40000 us"):
        CameraModel(sim_step_us=40_000)


@test
def label_geometry():
    camera = CameraModel()
    scene = SceneScript(1.0, objects=(SceneObject(2, (100.0, 100.0), (20.0, 10.0)),))
    labels = emit_labels(scene, camera)
    test.eq(25, len(labels))
    test.eq(LabelBox(0, 90.0, 95.0, 20.0, 10.0, 2), labels[0].boxes[0])


@test
def labels_clip_and_omit():
    obj = SceneObject(0, (2.0, 3.0), (4.0, 2.0), motion=((0.0, -100.0, 0.0),))
    labels = emit_labels(SceneScript(0.2, objects=(obj,)), small)
    test.eq([0, 40_000, 80_000, 120_000, 160_000], [l.t for l in labels])
    test.eq(LabelBox(0, 0.0, 2.0, 4.0, 2.0, 0), labels[0].boxes[0])
    test.eq(0, len(labels[1].boxes))


@test
def label_centers_follow_velocity():
    obj = SceneObject(1, (20.0, 20.0), (6.0, 6.0), motion=((0.0, 50.0, 25.0), (0.1, -50.0, 0.0)))
    labels = emit_labels(SceneScript(0.2, objects=(obj,)), CameraModel(width=128, height=96))
    centers = [(b.x + b.w / 2, b.y + b.h / 2) for l in labels for b in l.boxes]
    test.eq((20.0, 20.0), centers[0])
    test.lt(abs(centers[1][0] - centers[0][0] - 50.0 * 0.04), 1e-9)
    test.lt(abs(centers[2][1] - centers[1][1] - 25.0 * 0.04), 1e-9)
    test.eq(obj.position(0.1), (25.0, 22.5))
    test.eq(obj.position(0.2), (20.0, 22.5))
