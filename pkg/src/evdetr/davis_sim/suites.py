""" Built-in scene suites with normal, motion_blur and low_light scenarios. """

import dataclasses
import logging

import numpy as np

from .scene import SceneObject, SceneScript, CLASSES
from .dataset import write_dataset

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


SCENARIOS = ('normal', 'motion_blur', 'low_light')

# width, height ranges in pixels at 128 columns; scaled with the sensor width
SHAPES = {
    0: ((24, 40), (12, 18)),     # car: wide
    1: ((6, 10), (16, 26)),      # pedestrian: tall
    2: ((14, 20), (12, 16)),     # two-wheeler: in between
}


@dataclasses.dataclass(frozen=True)
class Suite:
    name: str
    splits: tuple               # ((split, count), ...)
    duration: float = 1.0
    max_objects: int = 3
    scenarios: tuple = SCENARIOS

    def names(self):
        return {split: [f"{split}{k:03d}" for k in range(count)] for split, count in self.splits}


SUITES = {
    'desk-small': Suite('desk-small', (('train', 40), ('val', 10), ('test', 10))),
    'desk-tiny': Suite('desk-tiny', (('train', 3), ('val', 1), ('test', 3)), duration=0.4, max_objects=2),
    'desk-empty': Suite('desk-empty', (('test', 5),), max_objects=0, scenarios=('normal',)),
}


def random_scene(rng, camera, scenario, duration, max_objects):
    """ A scene of up to max_objects rectangles crossing a uniform background. """
    scale = camera.width / 128
    speed = (15.0, 45.0) if scenario != 'motion_blur' else (90.0, 160.0)
    background = float(rng.uniform(0.25, 0.6))
    objects = []
    for z in range(int(rng.integers(1, max_objects + 1)) if max_objects else 0):
        class_id = int(rng.integers(0, len(CLASSES)))
        (w0, w1), (h0, h1) = SHAPES[class_id]
        w, h = rng.uniform(w0, w1) * scale, rng.uniform(h0, h1) * scale
        cx = rng.uniform(0.15, 0.85) * camera.width
        cy = rng.uniform(0.2, 0.8) * camera.height
        vx = rng.uniform(*speed) * scale * (1 if rng.random() < 0.5 else -1)
        vy = rng.uniform(-0.2, 0.2) * abs(vx)
        turn = float(rng.uniform(0.3, 0.7) * duration)
        motion = ((0.0, vx, vy), (turn, -vx * rng.uniform(0.5, 1.0), vy))
        contrast = rng.uniform(0.5, 1.2) * (1 if rng.random() < 0.5 else -1)
        intensity = float(np.clip(background * np.exp(contrast), 0.05, 1.0))
        objects.append(SceneObject(class_id, (cx, cy), (w, h), motion, intensity, z))
    illumination, blur = (), ()
    if scenario == 'low_light':
        level = float(rng.uniform(0.08, 0.15))
        illumination = ((0.0, level), (duration, level * float(rng.uniform(0.8, 1.2))))
    if scenario == 'motion_blur':
        blur = ((0.0, duration),)
    return SceneScript(duration, background, tuple(objects), illumination, blur, scenario)


def build_suite(suite, camera, seed):
    """ Deterministic scene list and splits; scenarios cycle within each split. """
    from ..tensorcore import RngStream
    master = RngStream(seed)
    scenes, splits = [], suite.names()
    i = 0
    for split, names in splits.items():
        for k, name in enumerate(names):
            scenario = suite.scenarios[k % len(suite.scenarios)]
            rng = np.random.default_rng(master.spawn(1000 + i).seed)
            scenes.append((name, random_scene(rng, camera, scenario, suite.duration, suite.max_objects)))
            i += 1
    return scenes, splits


def simulate_suite(name, camera, seed, out_dir):
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}, choose from {', '.join(SUITES)}")
    suite = SUITES[name]
    scenes, splits = build_suite(suite, camera, seed)
    logger.info("simulating suite %s: %d sequences into %s", name, len(scenes), out_dir)
    return write_dataset(scenes, out_dir, camera, seed, splits=splits, suite=name)


@test
def desk_small_shape():
    from .scene import CameraModel
    scenes, splits = build_suite(SUITES['desk-small'], CameraModel(width=128, height=96), seed=7)
    test.eq(60, len(scenes))
    test.eq({'train': 40, 'val': 10, 'test': 10}, {k: len(v) for k, v in splits.items()})
    test.eq(['normal', 'motion_blur', 'low_light', 'normal'], [s.scenario for _, s in scenes[40:44]])
    test.eq(4, sum(1 for name, s in scenes if name.startswith('test') and s.scenario == 'normal'))


@test
def suite_deterministic():
    from .scene import CameraModel
    camera = CameraModel(width=128, height=96)
    a, _ = build_suite(SUITES['desk-small'], camera, seed=7)
    b, _ = build_suite(SUITES['desk-small'], camera, seed=7)
    c, _ = build_suite(SUITES['desk-small'], camera, seed=8)
    test.eq(a, b)
    test.ne(a, c)


@test
def scenarios_set_light_blur_and_objects():
    from .scene import CameraModel
    camera = CameraModel(width=128, height=96)
    rng = np.random.default_rng(1)
    dark = random_scene(rng, camera, 'low_light', 1.0, 2)
    test.lt(dark.illumination_at(0.5), 0.2)
    fast = random_scene(rng, camera, 'motion_blur', 1.0, 2)
    test.truth(fast.blurred_at(0.3))
    test.eq(0, len(random_scene(rng, camera, 'normal', 1.0, 0).objects))


@test
def motion_blur_leaves_events_unchanged():
    from .scene import CameraModel
    from .emulator import generate_events
    camera = CameraModel(width=32, height=24)
    blurred = random_scene(np.random.default_rng(2), camera, 'motion_blur', 0.1, 2)
    sharp = dataclasses.replace(blurred, blur_windows=())
    a = generate_events(blurred, camera, 0, 100_000)
    b = generate_events(sharp, camera, 0, 100_000)
    test.gt(len(a), 0)
    for field in ('t', 'x', 'y', 'p'):
        test.eq(getattr(a, field).tolist(), getattr(b, field).tolist())


@test
def tiny_suite_on_disk(tmp_path):
    from .scene import CameraModel
    from .dataset import load_split
    index = simulate_suite('desk-tiny', CameraModel(width=32, height=24), 3, tmp_path)
    test.eq(['test000', 'test001', 'test002'], index['splits']['test'])
    test.eq('low_light', index['scenarios']['test002'])
    lows = load_split(tmp_path, 'test', scenario='low_light')
    test.eq(['test002'], [s.name for s in lows])
    with test.raises(ValueError, "unknown suite 'big', choose from desk-small, desk-tiny, desk-empty"):
        simulate_suite('big', CameraModel(), 1, tmp_path)
