"""Weakly supervised spatio-temporal anomaly detection: tube proposals, a two-branch
MIL scorer with self-attention, alternating mutually guided training, and
top-tube localization metrics."""
from .geometry import Box, ScoredBox, iou, union_box
from .tubes import LinkParams, Tube, build_multivariate_tubes, build_unary_tubes, linking_score
from .relation import BranchNet
from .trainer import TrainConfig, train

__version__ = "0.1.0"
