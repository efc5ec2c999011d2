""" Box conversions and generalized IoU.

    Boxes are (cx, cy, w, h), normalized to the image, unless a function says
    otherwise. Exported detections and labels use pixel (x, y, w, h) with the
    upper-left corner.
"""

import numpy as np

from ..tensorcore import Tensor, maximum, minimum, grad_check, ParamStore
from ..tensorcore.tensor import as_tensor

import selftest
test = selftest.get_tester(__name__)


class BoxError(ValueError):
    pass


def check_sizes(boxes):
    boxes = np.asarray(boxes, dtype=np.float64)
    if (boxes[..., 2:] < 0).any():
        bad = boxes[(boxes[..., 2:] < 0).any(-1)][0]
        raise BoxError(f"negative box size: w={bad[2]}, h={bad[3]}")
    return boxes


def to_corners(boxes):
    cx, cy, w, h = np.moveaxis(np.asarray(boxes, dtype=np.float64), -1, 0)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def to_pixels(box, width, height):
    """ Normalized (cx, cy, w, h) to pixel (x, y, w, h) with upper-left corner. """
    cx, cy, w, h = box
    return ((cx - w / 2) * width, (cy - h / 2) * height, w * width, h * height)


def from_pixels(box, width, height):
    x, y, w, h = box
    return ((x + w / 2) / width, (y + h / 2) / height, w / width, h / height)


def _giou_from_corners(a, b):
    ax0, ay0, ax1, ay1 = np.moveaxis(a, -1, 0)
    bx0, by0, bx1, by1 = np.moveaxis(b, -1, 0)
    inter = (np.clip(np.minimum(ax1, bx1) - np.maximum(ax0, bx0), 0, None)
           * np.clip(np.minimum(ay1, by1) - np.maximum(ay0, by0), 0, None))
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    enclosure = (np.maximum(ax1, bx1) - np.minimum(ax0, bx0)) * (np.maximum(ay1, by1) - np.minimum(ay0, by0))
    with np.errstate(divide='ignore', invalid='ignore'):
        iou = np.where(union > 0, inter / union, 0.0)
        return np.where(enclosure > 0, iou - (enclosure - union) / enclosure, iou)


def giou(a, b):
    """ Elementwise GIoU of two broadcastable arrays of boxes; zero-area pairs have IoU 0. """
    g = _giou_from_corners(to_corners(check_sizes(a)), to_corners(check_sizes(b)))
    return g if g.ndim else float(g)


def pairwise_giou(a, b):
    """ [N, M] GIoU of boxes a [N, 4] against b [M, 4]. """
    a, b = check_sizes(a), check_sizes(b)
    return giou(a[:, None, :], b[None, :, :])


def iou_xywh(a, b):
    """ [N, M] IoU of pixel boxes with upper-left corners. """
    a, b = np.asarray(a, dtype=np.float64).reshape(-1, 4), np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax0, ay0, aw, ah = (a[:, k, None] for k in range(4))
    bx0, by0, bw, bh = (b[None, :, k] for k in range(4))
    inter = (np.clip(np.minimum(ax0 + aw, bx0 + bw) - np.maximum(ax0, bx0), 0, None)
           * np.clip(np.minimum(ay0 + ah, by0 + bh) - np.maximum(ay0, by0), 0, None))
    union = aw * ah + bw * bh - inter
    with np.errstate(divide='ignore', invalid='ignore'):
        return np.where(union > 0, inter / union, 0.0)


def giou_tensor(a, b):
    """ Differentiable rowwise GIoU of Tensors [N, 4]; boxes must have positive area. """
    a, b = as_tensor(a), as_tensor(b)
    def corners(t):
        half = t[:, 2:] * 0.5
        return t[:, :2] - half, t[:, :2] + half
    (a0, a1), (b0, b1) = corners(a), corners(b)
    overlap = maximum(minimum(a1, b1) - maximum(a0, b0), 0.0)
    inter = overlap[:, 0] * overlap[:, 1]
    union = a[:, 2] * a[:, 3] + b[:, 2] * b[:, 3] - inter
    span = maximum(a1, b1) - minimum(a0, b0)
    enclosure = span[:, 0] * span[:, 1]
    return inter / union - (enclosure - union) / enclosure


@test
def giou_hand_values():
    unit = [0.5, 0.5, 1.0, 1.0]
    test.eq(1.0, giou(unit, unit))
    test.eq(-0.5, giou(unit, [1.5, 1.5, 1.0, 1.0]))
    inner = [0.5, 0.5, 0.5, 0.25]
    test.eq(0.125, giou(unit, inner))
    test.eq(0.0, giou([0.2, 0.2, 0.0, 0.0], [0.2, 0.2, 0.0, 0.0]))
    with test.raises(BoxError, "negative box size: w=-1.0, h=1.0"):
        giou(unit, [0.0, 0.0, -1.0, 1.0])


@test
def giou_range_and_symmetry():
    rng = np.random.default_rng(1)
    a = np.concatenate([rng.uniform(0, 1, (500, 2)), rng.uniform(0.01, 0.5, (500, 2))], 1)
    b = np.concatenate([rng.uniform(0, 1, (500, 2)), rng.uniform(0.01, 0.5, (500, 2))], 1)
    g = giou(a, b)
    test.truth(((g > -1) & (g <= 1)).all())
    test.lt(np.abs(g - giou(b, a)).max(), 1e-15)
    test.eq((500, 500), pairwise_giou(a, b).shape)
    test.lt(np.abs(np.diag(pairwise_giou(a, b)) - g).max(), 1e-15)
    test.lt(np.abs(giou_tensor(Tensor(a), b).values - g).max(), 1e-12)


@test
def pixel_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(100):
        w, h = rng.uniform(0.01, 0.5, 2)
        box = (rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h)
        back = from_pixels(to_pixels(box, 128, 96), 128, 96)
        test.lt(max(abs(p - q) for p, q in zip(box, back)), 1e-9)
    test.eq((54.0, 42.0, 20.0, 12.0), to_pixels((0.5, 0.5, 20 / 128, 12 / 96), 128, 96))


@test
def iou_of_pixel_boxes():
    test.eq([[1.0, 0.0]], iou_xywh([0, 0, 2, 2], [[0, 0, 2, 2], [2, 0, 2, 2]]).tolist())
    test.eq([[1 / 7]], iou_xywh([0, 0, 2, 2], [1, 1, 2, 2]).tolist())


@test
def giou_tensor_gradients():
    s = ParamStore()
    rng = np.random.default_rng(3)
    a = s.add('a', np.concatenate([rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.4, (6, 2))], 1))
    b = np.concatenate([rng.uniform(0.3, 0.7, (6, 2)), rng.uniform(0.1, 0.4, (6, 2))], 1)
    test.truth(grad_check(lambda: giou_tensor(a, b).sum(), s).ok)
