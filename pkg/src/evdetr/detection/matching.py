""" One-to-one assignment of query predictions to ground-truth boxes. """

import dataclasses
import itertools

import numpy as np
from scipy.optimize import linear_sum_assignment

from .boxes import pairwise_giou

import selftest
test = selftest.get_tester(__name__)


@dataclasses.dataclass
class MatchResult:
    pairs: list             # [(query, gt)], sorted by query
    unmatched: list         # queries without a gt

    @property
    def queries(self):
        return [q for q, _ in self.pairs]

    @property
    def gts(self):
        return [g for _, g in self.pairs]


def hungarian(cost):
    """ Minimum total cost assignment of rows to columns; min(rows, columns) pairs. """
    cost = np.asarray(cost, dtype=np.float64)
    if not np.isfinite(cost).all():
        raise ValueError("assignment costs must be finite")
    n_q = cost.shape[0]
    if cost.size == 0:
        return MatchResult([], list(range(n_q)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    taken = set(rows.tolist())
    return MatchResult(pairs, [q for q in range(n_q) if q not in taken])


def focal_class_cost(logits, gt_classes, alpha=0.25, gamma=2.0):
    """ [queries, N_gt] focal cost of predicting each gt class. """
    prob = 1.0 / (1.0 + np.exp(-np.asarray(logits, dtype=np.float64)))
    neg = (1 - alpha) * prob ** gamma * -np.log(1 - prob + 1e-8)
    pos = alpha * (1 - prob) ** gamma * -np.log(prob + 1e-8)
    return (pos - neg)[:, gt_classes]


def match_cost(logits, boxes, gt_classes, gt_boxes, training):
    """ cls_weight * focal cost + l1_weight * L1 + giou_weight * (1 - GIoU) """
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    l1 = np.abs(boxes[:, None, :] - gt_boxes[None, :, :]).sum(-1)
    cls = focal_class_cost(logits, gt_classes, training.focal_alpha, training.focal_gamma)
    return (training.cls_weight * cls + training.l1_weight * l1
          + training.giou_weight * (1.0 - pairwise_giou(boxes, gt_boxes)))


def match(logits, boxes, gt_classes, gt_boxes, training):
    """ Hungarian matching of predictions (logits [queries, C], boxes [queries, 4]) to ground truth. """
    logits, boxes = np.asarray(logits, dtype=np.float64), np.asarray(boxes, dtype=np.float64)
    if len(gt_classes) == 0:
        return MatchResult([], list(range(len(boxes))))
    return hungarian(match_cost(logits, boxes, gt_classes, gt_boxes, training))


def brute_force(cost):
    n_q, n_gt = cost.shape
    if n_q >= n_gt:
        return min(cost[list(p), range(n_gt)].sum() for p in itertools.permutations(range(n_q), n_gt))
    return brute_force(cost.T)


def total(cost, result):
    return sum(cost[q, g] for q, g in result.pairs)


@test
def hungarian_small_cases():
    cost = np.full((3, 3), 5.0) - 5.0 * np.eye(3)
    test.eq([(0, 0), (1, 1), (2, 2)], hungarian(cost).pairs)
    r = hungarian([[1, 2], [2, 1]])
    test.eq([(0, 0), (1, 1)], r.pairs)
    test.eq(2.0, total(np.array([[1.0, 2.0], [2.0, 1.0]]), r))
    r = hungarian(np.zeros((4, 0)))
    test.eq(([], [0, 1, 2, 3]), (r.pairs, r.unmatched))
    with test.raises(ValueError, "assignment costs must be finite"):
        hungarian([[np.nan]])


@test
def hungarian_equals_exhaustive_minimum():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_q, n_gt = rng.integers(1, 8, 2)
        cost = rng.integers(0, 100, (n_q, n_gt)).astype(np.float64)
        r = hungarian(cost)
        test.eq(min(n_q, n_gt), len(r.pairs))
        test.eq(len(set(r.queries)), len(r.queries))
        test.eq(len(set(r.gts)), len(r.gts))
        test.eq(brute_force(cost), total(cost, r))


def random_predictions(rng, n_q, n_gt):
    from ..config import TrainingConfig
    logits = rng.normal(size=(n_q, 3))
    boxes = np.concatenate([rng.uniform(0.2, 0.8, (n_q, 2)), rng.uniform(0.05, 0.4, (n_q, 2))], 1)
    gt_boxes = np.concatenate([rng.uniform(0.2, 0.8, (n_gt, 2)), rng.uniform(0.05, 0.4, (n_gt, 2))], 1)
    return logits, boxes, rng.integers(0, 3, n_gt), gt_boxes, TrainingConfig()


@test
def match_with_empty_ground_truth():
    rng = np.random.default_rng(1)
    logits, boxes, _, _, training = random_predictions(rng, 5, 0)
    r = match(logits, boxes, [], np.zeros((0, 4)), training)
    test.eq([], r.pairs)
    test.eq([0, 1, 2, 3, 4], r.unmatched)


@test
def exact_prediction_is_chosen():
    rng = np.random.default_rng(2)
    logits, boxes, _, _, training = random_predictions(rng, 4, 0)
    logits[2] = [-20.0, 20.0, -20.0]
    gt_box = boxes[2].copy()
    r = match(logits, boxes, [1], [gt_box], training)
    test.eq([(2, 0)], r.pairs)


@test
def match_minimizes_weighted_cost():
    rng = np.random.default_rng(3)
    for _ in range(50):
        logits, boxes, classes, gt_boxes, training = random_predictions(rng, 5, 3)
        cost = match_cost(logits, boxes, classes, gt_boxes, training)
        r = match(logits, boxes, classes, gt_boxes, training)
        test.lt(abs(total(cost, r) - brute_force(cost)), 1e-9)


@test
def match_ignores_gt_order():
    rng = np.random.default_rng(4)
    logits, boxes, classes, gt_boxes, training = random_predictions(rng, 6, 4)
    order = np.array([2, 0, 3, 1])
    a = match(logits, boxes, classes, gt_boxes, training)
    b = match(logits, boxes, classes[order], gt_boxes[order], training)
    test.eq(set(a.pairs), {(q, int(order[g])) for q, g in b.pairs})


@test
def cost_weights_are_two_five_two():
    rng = np.random.default_rng(5)
    logits, boxes, classes, gt_boxes, training = random_predictions(rng, 2, 1)
    cost = match_cost(logits, boxes, classes, gt_boxes, training)
    l1 = np.abs(boxes - gt_boxes[0]).sum(-1)
    g = pairwise_giou(boxes, gt_boxes)[:, 0]
    cls = focal_class_cost(logits, classes)[:, 0]
    test.lt(np.abs(cost[:, 0] - (2 * cls + 5 * l1 + 2 * (1 - g))).max(), 1e-12)
