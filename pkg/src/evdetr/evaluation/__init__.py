""" COCO-style metrics, streaming evaluation and ablation tables. """

from .metrics import Scored, Truth, MetricsReport, ap_per_class, compute_metrics
from .evaluate import evaluate, frame_keep, frame_rate_sweep, model_detector, oracle_detector
from .ablation import AXES, run_ablation, ordering_checks
