""" Set prediction loss: focal classification, L1 and GIoU on matched boxes. """

import dataclasses

import numpy as np

from ..tensorcore import Tensor, grad_check, ParamStore
from .boxes import giou_tensor
from .matching import match

import selftest
test = selftest.get_tester(__name__)


@dataclasses.dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    l1: float
    giou: float

    def row(self):
        return {'total': float(self.total.values), 'cls': self.cls, 'l1': self.l1, 'giou': self.giou}


def sigmoid_focal_loss(logits, targets, alpha=0.25, gamma=2.0):
    """ Summed focal loss of per-class sigmoid logits against 0/1 targets. """
    prob = logits.sigmoid()
    ce = logits.softplus() - logits * targets
    p_t = prob * targets + (1.0 - prob) * (1.0 - targets)
    alpha_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    return (ce * (1.0 - p_t) ** gamma * alpha_t).sum()


def detection_loss(logits, boxes, gt_classes, gt_boxes, matches, training):
    """ Weighted loss of one timestamp; every term is divided by max(1, number of gt boxes). """
    n_q, n_classes = logits.shape
    targets = np.zeros((n_q, n_classes))
    for q, g in matches.pairs:
        targets[q, gt_classes[g]] = 1.0
    norm = 1.0 / max(1, len(gt_classes))
    cls = sigmoid_focal_loss(logits, targets, training.focal_alpha, training.focal_gamma) * norm
    if matches.pairs:
        matched = boxes[np.array(matches.queries)]
        target_boxes = np.asarray(gt_boxes, dtype=np.float64)[np.array(matches.gts)]
        l1 = (matched - target_boxes).abs().sum() * norm
        giou = (1.0 - giou_tensor(matched, target_boxes)).sum() * norm
    else:
        l1 = giou = Tensor(0.0)
    total = training.cls_weight * cls + training.l1_weight * l1 + training.giou_weight * giou
    return LossBreakdown(total, float(cls.values), float(l1.values), float(giou.values))


def set_loss(logits, boxes, gt_classes, gt_boxes, training):
    """ Matches, then scores; the matching itself is not differentiated. """
    matches = match(logits.values, boxes.values, gt_classes, gt_boxes, training)
    return detection_loss(logits, boxes, gt_classes, gt_boxes, matches, training), matches


def training_config():
    from ..config import TrainingConfig
    return TrainingConfig()


@test
def perfect_prediction_has_no_box_loss():
    gt_boxes = np.array([[0.3, 0.4, 0.2, 0.1], [0.7, 0.6, 0.1, 0.3]])
    logits = Tensor(np.full((3, 3), -30.0))
    logits.values[0, 2] = logits.values[2, 0] = 30.0
    boxes = Tensor(np.array([gt_boxes[0], [0.5, 0.5, 0.2, 0.2], gt_boxes[1]]))
    loss, matches = set_loss(logits, boxes, [2, 0], gt_boxes, training_config())
    test.eq([(0, 0), (2, 1)], matches.pairs)
    test.eq(0.0, loss.l1)
    test.lt(abs(loss.giou), 1e-15)
    test.lt(loss.cls, 1e-20)


@test
def empty_ground_truth_is_pure_background():
    rng = np.random.default_rng(1)
    logits = Tensor(rng.normal(size=(4, 3)))
    boxes = Tensor(rng.uniform(0.1, 0.5, (4, 4)))
    training = training_config()
    loss, matches = set_loss(logits, boxes, [], np.zeros((0, 4)), training)
    test.eq((0.0, 0.0), (loss.l1, loss.giou))
    background = sigmoid_focal_loss(logits, np.zeros((4, 3))).values
    test.lt(abs(loss.total.values - 2.0 * background), 1e-12)


@test
def total_is_two_five_two():
    rng = np.random.default_rng(2)
    training = training_config()
    logits = Tensor(rng.normal(size=(5, 3)))
    boxes = Tensor(np.concatenate([rng.uniform(0.2, 0.8, (5, 2)), rng.uniform(0.1, 0.3, (5, 2))], 1))
    gt = np.concatenate([rng.uniform(0.2, 0.8, (2, 2)), rng.uniform(0.1, 0.3, (2, 2))], 1)
    loss, _ = set_loss(logits, boxes, [0, 2], gt, training)
    test.eq((2.0, 5.0, 2.0), (training.cls_weight, training.l1_weight, training.giou_weight))
    test.lt(abs(float(loss.total.values) - (2 * loss.cls + 5 * loss.l1 + 2 * loss.giou)), 1e-12)
    test.truth(min(loss.cls, loss.l1, loss.giou) >= 0)
    test.truth(np.isfinite(loss.total.values))


@test
def focal_loss_matches_scalar_formula():
    x, t = 0.7, 1.0
    p = 1 / (1 + np.exp(-x))
    expected = 0.25 * (1 - p) ** 2 * -np.log(p)
    test.lt(abs(sigmoid_focal_loss(Tensor(np.array([[x]])), np.array([[t]])).values - expected), 1e-15)
    x, t = -1.3, 0.0
    p = 1 / (1 + np.exp(-x))
    expected = 0.75 * p ** 2 * -np.log(1 - p)
    test.lt(abs(sigmoid_focal_loss(Tensor(np.array([[x]])), np.array([[t]])).values - expected), 1e-15)


@test
def loss_gradients_match_differences():
    rng = np.random.default_rng(3)
    store = ParamStore()
    logits = store.add('logits', rng.normal(size=(4, 3)))
    raw = store.add('raw', rng.normal(size=(4, 4)))
    gt = np.concatenate([rng.uniform(0.2, 0.8, (2, 2)), rng.uniform(0.1, 0.3, (2, 2))], 1)
    training = training_config()
    _, matches = set_loss(logits, raw.sigmoid(), [1, 2], gt, training)
    report = grad_check(lambda: detection_loss(logits, raw.sigmoid(), [1, 2], gt, matches, training).total, store)
    test.truth(report.ok)
