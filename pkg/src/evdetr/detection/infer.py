""" Streaming inference at event-bin timestamps, independent of the frame rate.

    Frames are encoded once when they arrive and cached; every query
    timestamp encodes its event bin and fuses it with the latest cached frame.
"""

import csv
import dataclasses
import json
import logging
import pathlib
import time

from ..tensorcore import no_grad
from ..events import BinningSpec, slice_bins, represent
from ..fusion import NoPriorFrameError
from .model import StreamState, encode_frame, forward, to_detections, init_model

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


DETECTION_COLUMNS = ['t_us', 'x', 'y', 'w', 'h', 'class', 'confidence']


@dataclasses.dataclass
class QueryResult:
    t: int
    detections: list        # one raw detection per query
    runtime_ms: float

    def confident(self, threshold=0.5):
        return [d for d in self.detections if d.confidence >= threshold]


def duration_us(sequence):
    if 'duration_us' in sequence.manifest:
        return sequence.manifest['duration_us']
    period = sequence.manifest.get('frame_period_us', 40_000)
    return (sequence.frame_times[-1] + period) if sequence.frame_times else 0


def stride_us(cadence_hz):
    return round(1e6 / cadence_hz)


def query_bins(sequence, cadence_hz, representation):
    """ Event bins of one window each, every 1/cadence seconds; stamped at their end. """
    end = duration_us(sequence)
    if end <= 0:
        return []
    spec = BinningSpec(representation.window_us, stride_us(cadence_hz), 0, end)
    return slice_bins(sequence.events, spec)


def kept_frames(sequence, frame_keep=1):
    """ (t, image) of every frame_keep-th frame. """
    return [(t, image) for k, (t, image) in enumerate(zip(sequence.frame_times, sequence.frames))
            if k % frame_keep == 0]


def run_stream(store, config, sequence, bins=None, frame_keep=1, state=None, height=None):
    """ QueryResults for each bin. Of several frames arriving before one
        query only the last history + 1 are encoded. """
    if not sequence.frames and not len(sequence.events):
        return []
    bins = query_bins(sequence, config.eval.cadence_hz, config.representation) if bins is None else bins
    state = state or StreamState.new(config)
    frames = kept_frames(sequence, frame_keep) if config.fusion.modality != 'events' else []
    results, f = [], 0
    with no_grad():
        for b in bins:
            t = b.t_stamp
            start = time.perf_counter()
            arrived = []
            while f < len(frames) and frames[f][0] <= t:
                arrived.append(frames[f])
                f += 1
            for t_frame, image in arrived[-(config.history + 1):]:
                encode_frame(store, config, state, image, t_frame, height=height)
            event_tensor = represent(b, sequence.geometry, config.representation).tensor
            try:
                logits, boxes = forward(store, config, state, t, event_tensor, height=height)
            except NoPriorFrameError:
                # frame-only detector before the first frame
                results.append(QueryResult(t, [], (time.perf_counter() - start) * 1e3))
                continue
            detections = to_detections(logits, boxes, t)
            results.append(QueryResult(t, detections, (time.perf_counter() - start) * 1e3))
    logger.debug("%s: %d queries, %d frames encoded, %d event-only",
                 sequence.name, len(results), state.frames_encoded, state.event_only)
    return results


def infer_at(store, config, sequence, t_us, frame_keep=1):
    """ One query at t_us, after history warm-up queries at the configured cadence. """
    stride = stride_us(config.eval.cadence_hz)
    times = [t_us - j * stride for j in range(config.history, 0, -1) if t_us - j * stride > 0] + [t_us]
    window = config.representation.window_us
    bins = [slice_bins(sequence.events, BinningSpec(window, 1, t - window, t))[0] for t in times]
    return run_stream(store, config, sequence, bins, frame_keep)[-1:]


def export_rows(results, geometry, threshold=0.5):
    for result in results:
        for d in result.confident(threshold):
            x, y, w, h = d.pixel_box(geometry.width, geometry.height)
            yield [result.t, x, y, w, h, d.class_id, d.confidence]


def write_detections(path, results, geometry, threshold=0.5):
    """ CSV or, for a .json path, JSON with one record set per query. """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == '.json':
        records = [{'t_us': r.t, 'runtime_ms': r.runtime_ms, 'detections': [
                        dict(zip(DETECTION_COLUMNS[1:], row[1:])) for row in export_rows([r], geometry, threshold)]}
                   for r in results]
        path.write_text(json.dumps(records, indent=1))
    else:
        with open(path, 'w', newline='') as f:
            writer = csv.writer(f)
            writer.writerow(DETECTION_COLUMNS)
            writer.writerows(export_rows(results, geometry, threshold))
    logger.info("%d record sets written to %s", len(results), path)
    return path


def stream_fixture(seconds=1.0, **overrides):
    from .train import toy_config, toy_sequence
    config = toy_config(**{'eval.cadence_hz': 100, 'representation.window_us': 40_000,
                           'sensor.frame_period_us': 40_000, **overrides})
    sequence = toy_sequence(config, frames=round(seconds * 25), period=40_000)
    sequence.manifest['duration_us'] = round(seconds * 1e6)
    return config, init_model(config, seed=1), sequence


@test
def hundred_hertz_over_twenty_five_hertz_frames():
    config, store, sequence = stream_fixture()
    state = StreamState.new(config)
    results = run_stream(store, config, sequence, state=state)
    test.eq(97, len(results))
    test.eq(list(range(40_000, 1_000_001, 10_000)), [r.t for r in results])
    test.eq({config.decoder.queries}, {len(r.detections) for r in results})
    test.eq(25, state.frames_encoded)
    test.eq(97, state.events_encoded)
    test.eq({4}, {state.cache.reuse[t] for t in sequence.frame_times[1:-1]})
    test.eq(0, state.cache.reuse[0])
    test.eq(0, state.event_only)
    test.truth(all(r.runtime_ms >= 0 for r in results))


@test
def queries_at_frame_times_are_synchronous():
    config, store, sequence = stream_fixture(**{'eval.cadence_hz': 25})
    state = StreamState.new(config)
    results = run_stream(store, config, sequence, state=state)
    test.eq(sequence.frame_times[1:] + [1_000_000], [r.t for r in results])
    test.eq({1}, {state.cache.reuse[t] for t in sequence.frame_times[1:-1]})


@test
def subsampled_frames_are_encoded_once():
    config, store, sequence = stream_fixture()
    state = StreamState.new(config)
    run_stream(store, config, sequence, frame_keep=4, state=state)
    test.eq(7, state.frames_encoded)
    test.eq({16}, {state.cache.reuse[t] for t in (160_000, 320_000, 480_000, 640_000, 800_000)})


@test
def empty_streams_give_nothing():
    config, store, sequence = stream_fixture()
    empty = dataclasses.replace(sequence, frames=[], frame_times=[], events=sequence.events.between(0, 0))
    test.eq([], run_stream(store, config, empty))


@test
def frame_only_detector_waits_for_frames():
    config, store, sequence = stream_fixture(**{'fusion.modality': 'frames'})
    late = dataclasses.replace(sequence, frames=sequence.frames[2:], frame_times=sequence.frame_times[2:])
    results = run_stream(store, config, late)
    test.eq([[], []], [r.detections for r in results[:4:2]])
    test.eq(config.decoder.queries, len(results[4].detections))


@test
def single_query_after_warm_up():
    config, store, sequence = stream_fixture()
    results = infer_at(store, config, sequence, 123_000)
    test.eq(1, len(results))
    test.eq(123_000, results[0].t)
    stream = run_stream(store, config, sequence)
    test.eq(list(range(40_000, 130_000, 10_000)), [r.t for r in stream[:9]])


@test
def detections_export(tmp_path):
    from .model import Detection
    from ..events import Geometry
    results = [QueryResult(40_000, [Detection((0.5, 0.5, 0.25, 0.5), 1, 0.9, 40_000),
                                    Detection((0.2, 0.2, 0.1, 0.1), 0, 0.3, 40_000)], 1.5),
               QueryResult(50_000, [], 1.0)]
    write_detections(tmp_path/'d.csv', results, Geometry(16, 16))
    with open(tmp_path/'d.csv', newline='') as f:
        rows = list(csv.reader(f))
    test.eq([DETECTION_COLUMNS, ['40000', '6.0', '4.0', '4.0', '8.0', '1', '0.9']], rows)
    write_detections(tmp_path/'d.json', results, Geometry(16, 16))
    records = json.loads((tmp_path/'d.json').read_text())
    test.eq([40_000, 50_000], [r['t_us'] for r in records])
    test.eq([{'x': 6.0, 'y': 4.0, 'w': 4.0, 'h': 8.0, 'class': 1, 'confidence': 0.9}], records[0]['detections'])
    test.eq([], records[1]['detections'])
