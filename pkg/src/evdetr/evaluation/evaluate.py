""" Streaming evaluation: detectors run over sequences, scored at labeled timestamps.

    A detector is a callable (sequence, bins, frame_keep) -> [QueryResult].
    Event bins stay at the configured cadence when frames are subsampled.
"""

import logging
import time

import numpy as np

from ..events import BinningSpec, slice_bins
from ..detection.boxes import from_pixels
from ..detection.model import Detection
from ..detection.infer import QueryResult, run_stream, query_bins
from .metrics import Scored, Truth, compute_metrics

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


LABEL_RATE = 25.0


def frame_keep(frame_rate, label_rate=LABEL_RATE):
    """ Subsampling factor of the frames for a reduced frame rate. """
    keep = round(label_rate / frame_rate)
    if keep < 1 or not np.isclose(label_rate / keep, frame_rate, rtol=0.01):
        raise ValueError(f"frame rate {frame_rate} is not {label_rate} divided by a whole number")
    return keep


def model_detector(store, config):
    """ The streaming model as a detector. """
    def detect(sequence, bins, keep):
        return run_stream(store, config, sequence, bins, keep, height=config.eval.resize)
    return detect


def oracle_detector(sequence, bins, keep):
    """ Echoes the labels back with confidence one. """
    g = sequence.geometry
    results = []
    for b in bins:
        start = time.perf_counter()
        detections = [Detection(from_pixels((x.x, x.y, x.w, x.h), g.width, g.height), x.class_id, 1.0, b.t_stamp)
                      for x in sequence.labels_at(b.t_stamp).boxes]
        results.append(QueryResult(b.t_stamp, detections, (time.perf_counter() - start) * 1e3))
    return results


def random_detector(seed, count=25, classes=3):
    rng = np.random.default_rng(seed)

    def detect(sequence, bins, keep):
        results = []
        for b in bins:
            wh = rng.uniform(0.03, 0.4, (count, 2))
            centers = rng.uniform(wh / 2, 1 - wh / 2)
            detections = [Detection((*c, *s), int(k), float(p), b.t_stamp) for c, s, k, p in
                          zip(centers.tolist(), wh.tolist(), rng.integers(0, classes, count), rng.random(count))]
            results.append(QueryResult(b.t_stamp, detections, 0.0))
        return results
    return detect


def labeled_bins(sequence, cadence_hz, representation):
    """ Query bins at the cadence; labeled timestamps the cadence misses get a bin of their own. """
    bins = query_bins(sequence, cadence_hz, representation)
    have = {b.t_stamp for b in bins}
    window = representation.window_us
    extra = [slice_bins(sequence.events, BinningSpec(window, 1, t - window, t))[0]
             for t in (label.t for label in sequence.labels) if t not in have and t >= window]
    return sorted(bins + extra, key=lambda b: b.t_stamp)


def collect(detector, sequences, config, keep=1, cadence_hz=None):
    """ Scored detections and truths at labeled timestamps, plus per-query runtimes. """
    cadence_hz = cadence_hz or config.eval.cadence_hz
    detections, truths, runtimes, scenario_of = [], [], [], {}
    for sequence in sequences:
        g = sequence.geometry
        labeled = {label.t: label for label in sequence.labels}
        results = detector(sequence, labeled_bins(sequence, cadence_hz, config.representation), keep)
        runtimes.extend(r.runtime_ms for r in results)
        for r in results:
            if r.t not in labeled:
                continue
            key = (sequence.name, r.t)
            scenario_of[key] = sequence.scenario
            detections.extend(Scored(key, d.class_id, d.confidence, d.pixel_box(g.width, g.height))
                              for d in r.detections)
            truths.extend(Truth(key, b.class_id, (b.x, b.y, b.w, b.h)) for b in labeled[r.t].boxes)
    return detections, truths, runtimes, scenario_of


def evaluate(detector, sequences, config, frame_rate=None, cadence_hz=None):
    """ MetricsReport over all sequences, with one breakdown per scenario. """
    keep = 1 if frame_rate is None else frame_keep(frame_rate)
    detections, truths, runtimes, scenario_of = collect(detector, sequences, config, keep, cadence_hz)
    classes, max_dets = config.decoder.classes, config.decoder.queries
    report = compute_metrics(detections, truths, config.eval, classes, max_dets)
    for scenario in sorted(set(scenario_of.values())):
        sub = lambda items: [x for x in items if scenario_of.get(x.key) == scenario]
        report.scenarios[scenario] = compute_metrics(sub(detections), sub(truths), config.eval, classes, max_dets).summary()
    report.runtime_ms = float(np.median(runtimes)) if runtimes else None
    report.queries = len(runtimes)
    logger.info("evaluated %d sequences, %d queries: mAP50 %s", len(sequences), len(runtimes), report.mAP50)
    return report


def frame_rate_sweep(detector, sequences, config, rates=(25.0, 12.5, 8.33, 6.25)):
    """ One report per frame rate; event cadence and labels stay fixed. """
    return [(rate, evaluate(detector, sequences, config, frame_rate=rate)) for rate in rates]


def label_sequences(seed, count=20, labels=10, scenarios=('normal', 'motion_blur', 'low_light')):
    """ Sequences with random labels and no sensor data, for detector-independent checks. """
    from ..events import EventStream, Geometry
    from ..davis_sim.scene import LabelBox, GroundTruthLabel
    from ..davis_sim.dataset import Sequence
    rng = np.random.default_rng(seed)
    geometry = Geometry(128, 96)
    sequences = []
    for k in range(count):
        records = []
        for j in range(labels):
            boxes = []
            for i in range(int(rng.integers(1, 4))):
                w, h = rng.uniform(6, 40), rng.uniform(8, 30)
                boxes.append(LabelBox(i, float(rng.uniform(0, 128 - w)), float(rng.uniform(0, 96 - h)),
                                      float(w), float(h), int(rng.integers(0, 3))))
            records.append(GroundTruthLabel(j * 40_000, tuple(boxes)))
        times = [r.t for r in records]
        sequences.append(Sequence(f"s{k:02d}", geometry, times, [], EventStream.empty(geometry), records,
                                  scenarios[k % len(scenarios)], {'duration_us': labels * 40_000}))
    return sequences


def desk_config(**overrides):
    from ..config import load_config
    return load_config('desk', overrides=[f"{k}={v}" for k, v in overrides.items()])


@test
def frame_rates_map_to_subsampling():
    test.eq([1, 2, 3, 4], [frame_keep(r) for r in (25, 12.5, 8.33, 6.25)])
    with test.raises(ValueError, "frame rate 10 is not 25.0 divided by a whole number"):
        frame_keep(10)


@test
def oracle_scores_one():
    config = desk_config()
    report = evaluate(oracle_detector, label_sequences(1, count=6), config)
    test.eq(1.0, report.mAP50)
    test.eq(1.0, report.mAP)
    test.eq({'normal', 'motion_blur', 'low_light'}, set(report.scenarios))
    test.eq({1.0}, {s['mAP50'] for s in report.scenarios.values()})
    test.eq(6 * 10, report.queries)


@test
def random_boxes_score_near_zero():
    config = desk_config()
    report = evaluate(random_detector(2), label_sequences(2, count=20), config)
    test.lt(report.mAP50, 0.05)
    test.le(0.0, report.mAP50)


@test
def labeled_timestamps_only():
    config = desk_config(**{'eval.cadence_hz': 100})
    sequences = label_sequences(3, count=1)
    bins = labeled_bins(sequences[0], 100, config.representation)
    test.eq(list(range(40_000, 400_001, 10_000)), [b.t_stamp for b in bins])
    detections, truths, runtimes, _ = collect(oracle_detector, sequences, config)
    test.eq(len(bins), len(runtimes))
    test.eq({t for t in range(40_000, 400_000, 40_000)}, {d.key[1] for d in detections})


@test
def evaluation_is_deterministic():
    config = desk_config()
    sequences = label_sequences(4, count=3)
    a = evaluate(random_detector(5), sequences, config).to_dict()
    b = evaluate(random_detector(5), sequences, config).to_dict()
    a.pop('runtime_ms'), b.pop('runtime_ms')
    test.eq(a, b)


@test
def model_detector_runs_on_toy_stream():
    from ..detection.train import toy_config, toy_sequence
    from ..detection.model import init_model
    config = toy_config()
    sequence = toy_sequence(config, frames=4)
    sequence.manifest['duration_us'] = 40_000
    report = evaluate(model_detector(init_model(config), config), [sequence], config)
    test.eq(3, report.queries)
    test.truth(0.0 <= report.mAP50 <= 1.0)
    test.truth(report.runtime_ms > 0)
    sweep = frame_rate_sweep(model_detector(init_model(config), config), [sequence], config, rates=(25, 12.5))
    test.eq([25, 12.5], [rate for rate, _ in sweep])
