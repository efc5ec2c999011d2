""" COCO-style average precision over timestamped detections.

    A detection or ground-truth box belongs to a frame key (sequence name,
    timestamp). Boxes are pixel (x, y, w, h) with the upper-left corner.
    Size buckets go by box height, not area.
"""

import dataclasses
import json
import logging
import pathlib

import numpy as np

from ..detection.boxes import iou_xywh

import selftest
test = selftest.get_tester(__name__)


logger = logging.getLogger(__name__)


RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclasses.dataclass(frozen=True)
class Scored:
    key: tuple
    class_id: int
    confidence: float
    box: tuple


@dataclasses.dataclass(frozen=True)
class Truth:
    key: tuple
    class_id: int
    box: tuple


def height_range(size, eval_config):
    small, large = eval_config.small_height, eval_config.large_height
    return {'all': (0.0, np.inf), 'small': (0.0, small), 'medium': (small, large), 'large': (large, np.inf)}[size]


def in_range(height, bounds, size):
    lo, hi = bounds
    if size == 'small':
        return height < hi
    if size == 'medium':
        return lo <= height <= hi
    return height > lo if size == 'large' else True


def limit_per_key(detections, max_dets):
    """ The max_dets most confident detections of every key, over all classes. """
    if max_dets is None:
        return list(detections)
    by_key = {}
    for d in detections:
        by_key.setdefault(d.key, []).append(d)
    kept = []
    for ds in by_key.values():
        kept.extend(sorted(ds, key=lambda d: -d.confidence)[:max_dets])
    return kept


def interpolated_ap(tp, fp, n_gt):
    """ 101-point interpolated area under the precision/recall curve. """
    if not len(tp):
        return 0.0
    tp, fp = np.cumsum(tp), np.cumsum(fp)
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side='left')
    sampled = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(sampled.mean())


def ap_per_class(detections, truths, iou_threshold, class_id=None, size='all', eval_config=None):
    """ AP of one class at one IoU threshold; None when the class has no
        ground truth in the size bucket. Out-of-bucket ground truth is ignored. """
    if class_id is not None:
        detections = [d for d in detections if d.class_id == class_id]
        truths = [g for g in truths if g.class_id == class_id]
    bounds = height_range(size, eval_config) if size != 'all' else (0.0, np.inf)
    gts = {}
    for g in truths:
        gts.setdefault(g.key, []).append((g, not in_range(g.box[3], bounds, size)))
    n_gt = sum(1 for items in gts.values() for _, ignored in items if not ignored)
    if n_gt == 0:
        return None
    order = sorted(detections, key=lambda d: (-d.confidence, d.key[1], d.box[0]))
    taken = {key: np.zeros(len(items), dtype=bool) for key, items in gts.items()}
    tp, fp = [], []
    for d in order:
        items = gts.get(d.key, [])
        matched, ignored = None, False
        if items:
            ious = iou_xywh(d.box, [g.box for g, _ in items])[0]
            for want_ignored in (False, True):
                best, best_iou = None, iou_threshold
                for j, (_, ign) in enumerate(items):
                    if ign == want_ignored and not taken[d.key][j] and ious[j] >= iou_threshold \
                            and (best is None or ious[j] > best_iou):
                        best, best_iou = j, ious[j]
                if best is not None:
                    matched, ignored = best, want_ignored
                    break
        if matched is not None:
            taken[d.key][matched] = True
        elif not in_range(d.box[3], bounds, size):
            ignored = True
        if ignored:
            continue
        tp.append(matched is not None)
        fp.append(matched is None)
    return interpolated_ap(np.array(tp, dtype=np.float64), np.array(fp, dtype=np.float64), n_gt)


def mean_or_none(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


@dataclasses.dataclass
class MetricsReport:
    ap: dict                    # class -> {threshold: AP}
    mAP: float
    mAP50: float
    mAP75: float
    mAP_S: float
    mAP_M: float
    mAP_L: float
    scenarios: dict = dataclasses.field(default_factory=dict)
    runtime_ms: float = None
    queries: int = 0

    def summary(self):
        return {k: getattr(self, k) for k in ('mAP', 'mAP50', 'mAP75', 'mAP_S', 'mAP_M', 'mAP_L')}

    def to_dict(self):
        return {
            'ap': {str(c): {f"{t:.2f}": v for t, v in aps.items()} for c, aps in self.ap.items()},
            **self.summary(),
            'scenarios': self.scenarios,
            'runtime_ms': self.runtime_ms,
            'queries': self.queries,
        }

    def write(self, path):
        path = pathlib.Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path


def compute_metrics(detections, truths, eval_config, classes, max_dets=None):
    """ Per-class APs and their means; classes without ground truth are left out of every mean. """
    detections = limit_per_key(detections, max_dets)
    thresholds = list(eval_config.iou_thresholds)
    ap = {}
    for c in range(classes):
        per = {t: ap_per_class(detections, truths, t, c) for t in thresholds}
        if all(v is not None for v in per.values()):
            ap[c] = per

    def at(threshold):
        if not any(np.isclose(threshold, t) for t in thresholds):
            return None
        t = next(t for t in thresholds if np.isclose(threshold, t))
        return mean_or_none(aps[t] for aps in ap.values())

    def sized(size):
        return mean_or_none(mean_or_none(ap_per_class(detections, truths, t, c, size, eval_config) for t in thresholds)
                            for c in range(classes))

    return MetricsReport(
        ap=ap,
        mAP=mean_or_none(np.mean(list(aps.values())) for aps in ap.values()),
        mAP50=at(0.5), mAP75=at(0.75),
        mAP_S=sized('small'), mAP_M=sized('medium'), mAP_L=sized('large'))


def eval_config(**overrides):
    from ..config import EvalConfig
    return dataclasses.replace(EvalConfig(), **overrides)


K = ('seq', 0)


@test
def single_perfect_detection():
    g = [Truth(K, 0, (10, 10, 20, 30))]
    test.eq(1.0, ap_per_class([Scored(K, 0, 0.7, (10, 10, 20, 30))], g, 0.5))
    test.eq(0.0, ap_per_class([], g, 0.5))
    test.eq(None, ap_per_class([], [], 0.5))


@test
def hand_walked_precision_recall():
    g = [Truth(K, 0, (0, 0, 10, 10)), Truth(K, 0, (50, 50, 10, 10))]
    d = [Scored(K, 0, 0.9, (0, 0, 10, 10)), Scored(K, 0, 0.8, (20, 20, 10, 10))]
    test.lt(abs(ap_per_class(d, g, 0.5) - 51 / 101), 1e-12)
    test.eq(1.0, interpolated_ap(np.array([1.0, 1.0]), np.array([0.0, 0.0]), 2))


@test
def detections_only_match_their_key_and_class():
    g = [Truth(('a', 0), 0, (0, 0, 10, 10))]
    test.eq(0.0, ap_per_class([Scored(('a', 40_000), 0, 0.9, (0, 0, 10, 10))], g, 0.5))
    test.eq(0.0, ap_per_class([Scored(('b', 0), 0, 0.9, (0, 0, 10, 10))], g, 0.5))
    test.eq(0.0, ap_per_class([Scored(('a', 0), 1, 0.9, (0, 0, 10, 10))], g, 0.5, class_id=0))


def random_case(rng, n_gt=5, n_det=12):
    keys = [('s', t) for t in (0, 40_000)]
    gts = [Truth(keys[rng.integers(2)], 0, tuple(rng.uniform([0, 0, 5, 5], [80, 60, 40, 40]))) for _ in range(n_gt)]
    dets = []
    for _ in range(n_det):
        if rng.random() < 0.6:
            g = gts[rng.integers(len(gts))]
            box = tuple(np.array(g.box) + rng.normal(0, 2.5, 4) * [1, 1, 0.5, 0.5])
            dets.append(Scored(g.key, 0, float(rng.random()), box))
        else:
            dets.append(Scored(keys[rng.integers(2)], 0, float(rng.random()),
                               tuple(rng.uniform([0, 0, 5, 5], [80, 60, 40, 40]))))
    return dets, gts


@test
def ap_does_not_grow_with_iou_threshold():
    rng = np.random.default_rng(1)
    for _ in range(50):
        dets, gts = random_case(rng)
        aps = [ap_per_class(dets, gts, t) for t in np.linspace(0.5, 0.95, 10)]
        test.truth(all(a >= b - 1e-12 for a, b in zip(aps, aps[1:])))
        test.truth(all(0.0 <= a <= 1.0 for a in aps))


@test
def duplicates_never_help():
    rng = np.random.default_rng(2)
    for _ in range(50):
        dets, gts = random_case(rng)
        before = ap_per_class(dets, gts, 0.5)
        best = max(dets, key=lambda d: d.confidence)
        if (iou_xywh(best.box, [g.box for g in gts if g.key == best.key]) >= 0.5).sum() > 1:
            continue
        duplicate = dataclasses.replace(best, confidence=best.confidence / 2)
        test.le(ap_per_class(dets + [duplicate], gts, 0.5), before + 1e-12)


@test
def size_buckets_by_height():
    config = eval_config()
    g = [Truth(K, 0, (0, 0, 50, 10)), Truth(K, 0, (60, 0, 10, 50)), Truth(K, 0, (0, 20, 10, 100))]
    d = [Scored(K, 0, 0.9, (0, 0, 50, 10))]
    test.eq(1.0, ap_per_class(d, g, 0.5, size='small', eval_config=config))
    test.eq(0.0, ap_per_class(d, g, 0.5, size='medium', eval_config=config))
    test.eq(0.0, ap_per_class(d, g, 0.5, size='large', eval_config=config))
    test.eq(None, ap_per_class(d, g[:1], 0.5, size='large', eval_config=config))


@test
def report_excludes_classes_without_ground_truth(tmp_path):
    config = eval_config()
    g = [Truth(K, 0, (0, 0, 10, 30))]
    d = [Scored(K, 0, 0.9, (0, 0, 10, 30)), Scored(K, 2, 0.9, (40, 0, 10, 30))]
    report = compute_metrics(d, g, config, classes=3)
    test.eq([0], list(report.ap))
    test.eq((1.0, 1.0, 1.0), (report.mAP, report.mAP50, report.mAP75))
    test.eq((None, 1.0, None), (report.mAP_S, report.mAP_M, report.mAP_L))
    written = json.loads(report.write(tmp_path/'metrics.json').read_text())
    test.eq(1.0, written['ap']['0']['0.50'])
    test.eq(1.0, written['mAP50'])


@test
def max_detections_per_timestamp():
    g = [Truth(K, 0, (0, 0, 10, 10))]
    d = [Scored(K, 1, 0.9 - 0.01 * k, (50, 50, 10, 10)) for k in range(3)] + [Scored(K, 0, 0.1, (0, 0, 10, 10))]
    test.eq(1.0, compute_metrics(d, g, eval_config(), classes=2).mAP50)
    test.eq(0.0, compute_metrics(d, g, eval_config(), classes=2, max_dets=3).mAP50)
