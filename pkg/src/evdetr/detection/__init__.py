""" Object queries, heads, set matching, losses, training and streaming inference. """

from .boxes import BoxError, giou, pairwise_giou, iou_xywh, to_pixels, from_pixels
from .matching import MatchResult, hungarian, match
from .losses import LossBreakdown, set_loss, detection_loss
from .model import Detection, StreamState, init_model, predict_heads, forward, to_detections, micro_config
from .train import NumericalAbort, Trainer, latest_checkpoint, gradcheck_audit
from .infer import QueryResult, run_stream, infer_at, write_detections
