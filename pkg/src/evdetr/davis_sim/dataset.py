""" Simulated sequences on disk.

    <out>/dataset.json                  suite, seed, splits, scenario per sequence
    <out>/<seq>/frames/%06d.pgm         8-bit grayscale frames
    <out>/<seq>/events.evt1             binary events
    <out>/<seq>/labels.csv              t_us,obj_idx,x,y,w,h,class
    <out>/<seq>/manifest.json           geometry, threshold, frame period, counts, scenario
"""

import csv
import dataclasses
import json
import logging
import pathlib

import cv2
import numpy as np

from ..events import EventStream, Geometry, parse_events, write_events
from .scene import CameraModel, GroundTruthLabel, LabelBox, SceneObject, SceneScript, capture_frame, emit_labels
from .emulator import generate_events

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


LABEL_COLUMNS = ['t_us', 'obj_idx', 'x', 'y', 'w', 'h', 'class']


class MissingInputError(FileNotFoundError):
    pass


@dataclasses.dataclass
class Sequence:
    name: str
    geometry: Geometry
    frame_times: list
    frames: list
    events: EventStream
    labels: list
    scenario: str
    manifest: dict

    def labels_at(self, t_us):
        for label in self.labels:
            if label.t == t_us:
                return label
        return GroundTruthLabel(t_us, ())


def _write_pgm(path, image):
    if not cv2.imwrite(str(path), image):
        raise OSError(f"could not write frame {path}")


def write_sequence(out_dir, name, scene, camera, rng):
    """ Simulates one scene and writes it; returns its manifest. """
    seq_dir = pathlib.Path(out_dir)/name
    (seq_dir/'frames').mkdir(parents=True, exist_ok=True)
    frame_times = camera.frame_times(scene.duration)
    for k, t_us in enumerate(frame_times):
        _write_pgm(seq_dir/'frames'/f"{k:06d}.pgm", capture_frame(scene, camera, t_us * 1e-6, rng))
    duration_us = round(scene.duration * 1e6)
    events = generate_events(scene, camera, 0, duration_us, rng)
    (seq_dir/'events.evt1').write_bytes(write_events(events, 'binary'))
    labels = emit_labels(scene, camera)
    rows = 0
    with open(seq_dir/'labels.csv', 'w', newline='') as f:
        writer = csv.writer(f)
        writer.writerow(LABEL_COLUMNS)
        for label in labels:
            for b in label.boxes:
                writer.writerow([label.t, b.obj_idx, repr(b.x), repr(b.y), repr(b.w), repr(b.h), b.class_id])
                rows += 1
    manifest = {
        'name': name,
        'geometry': [camera.width, camera.height],
        'threshold': camera.threshold,
        'frame_period_us': camera.frame_period_us,
        'duration_us': duration_us,
        'scenario': scene.scenario,
        'counts': {'frames': len(frame_times), 'events': len(events), 'labels': rows},
    }
    (seq_dir/'manifest.json').write_text(json.dumps(manifest, indent=1, sort_keys=True))
    logger.info("sequence %s: %d frames, %d events, %d label rows", name, len(frame_times), len(events), rows)
    return manifest


def write_dataset(scenes, out_dir, camera, seed, splits=None, suite=None):
    """ scenes: [(name, SceneScript)]; splits: {split: [names]} (default: all in 'test'). """
    from ..tensorcore import RngStream
    out_dir = pathlib.Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    master = RngStream(seed)
    scenarios = {}
    for i, (name, scene) in enumerate(scenes):
        try:
            write_sequence(out_dir, name, scene, camera, master.spawn(i))
        except OSError as e:
            e.add_note(f"while writing sequence {out_dir/name}")
            raise
        scenarios[name] = scene.scenario
    index = {
        'suite': suite,
        'seed': seed,
        'splits': splits or {'test': [name for name, _ in scenes]},
        'scenarios': scenarios,
    }
    (out_dir/'dataset.json').write_text(json.dumps(index, indent=1, sort_keys=True))
    return index


def load_index(data_dir):
    path = pathlib.Path(data_dir)/'dataset.json'
    if not path.exists():
        raise MissingInputError(f"no dataset at {data_dir}")
    return json.loads(path.read_text())


def load_sequence(seq_dir):
    seq_dir = pathlib.Path(seq_dir)
    manifest_path = seq_dir/'manifest.json'
    if not manifest_path.exists():
        raise MissingInputError(f"no sequence at {seq_dir}")
    manifest = json.loads(manifest_path.read_text())
    geometry = Geometry(*manifest['geometry'])
    period = manifest['frame_period_us']
    frames = []
    for k in range(manifest['counts']['frames']):
        path = seq_dir/'frames'/f"{k:06d}.pgm"
        image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if image is None:
            raise MissingInputError(f"missing frame {path}")
        frames.append(image)
    events = parse_events((seq_dir/'events.evt1').read_bytes(), 'binary', geometry)
    by_time = {k * period: [] for k in range(len(frames))}
    with open(seq_dir/'labels.csv', newline='') as f:
        for row in csv.DictReader(f):
            by_time.setdefault(int(row['t_us']), []).append(LabelBox(
                int(row['obj_idx']), float(row['x']), float(row['y']),
                float(row['w']), float(row['h']), int(row['class'])))
    labels = [GroundTruthLabel(t, tuple(boxes)) for t, boxes in sorted(by_time.items())]
    return Sequence(manifest['name'], geometry, [k * period for k in range(len(frames))],
                    frames, events, labels, manifest['scenario'], manifest)


def load_split(data_dir, split, scenario=None):
    """ Sequences of one split, optionally only those tagged with scenario. """
    index = load_index(data_dir)
    if split not in index['splits']:
        raise MissingInputError(f"dataset {data_dir} has no split {split!r}")
    names = [n for n in index['splits'][split] if scenario is None or index['scenarios'][n] == scenario]
    return [load_sequence(pathlib.Path(data_dir)/n) for n in names]


def one_object_scene():
    obj = SceneObject(0, (30.0, 20.0), (16.0, 8.0), motion=((0.0, 40.0, 5.0),), intensity=0.9)
    return SceneScript(1.0, 0.3, (obj,))


@test
def one_second_layout(tmp_path):
    camera = CameraModel(width=64, height=48)
    write_dataset([('seq0', one_object_scene())], tmp_path, camera, seed=3)
    seq_dir = tmp_path/'seq0'
    test.eq(25, len(list((seq_dir/'frames').glob('*.pgm'))))
    test.truth((seq_dir/'events.evt1').exists())
    rows = (seq_dir/'labels.csv').read_text().splitlines()
    test.eq('t_us,obj_idx,x,y,w,h,class', rows[0])
    test.eq(26, len(rows))
    manifest = json.loads((seq_dir/'manifest.json').read_text())
    test.eq([64, 48], manifest['geometry'])
    test.eq('normal', manifest['scenario'])
    seq = load_sequence(seq_dir)
    test.eq(manifest['counts']['events'], len(seq.events))
    test.gt(len(seq.events), 0)
    test.eq((48, 64), seq.frames[0].shape)
    test.eq(np.uint8, seq.frames[0].dtype)
    test.eq(25, len(seq.labels))
    test.eq(LabelBox(0, 22.0, 16.0, 16.0, 8.0, 0), seq.labels[0].boxes[0])


@test
def same_seed_same_bytes(tmp_path):
    camera = CameraModel(width=32, height=24)
    scene = SceneScript(0.2, 0.3, one_object_scene().objects)
    for out in ('a', 'b'):
        write_dataset([('s', scene)], tmp_path/out, camera, seed=9)
    for rel in ('s/events.evt1', 's/labels.csv', 's/manifest.json', 's/frames/000003.pgm', 'dataset.json'):
        test.eq((tmp_path/'a'/rel).read_bytes(), (tmp_path/'b'/rel).read_bytes())


@test
def missing_inputs(tmp_path):
    with test.raises(MissingInputError, f"no dataset at {tmp_path}"):
        load_index(tmp_path)
    with test.raises(MissingInputError, f"no sequence at {tmp_path/'x'}"):
        load_sequence(tmp_path/'x')
