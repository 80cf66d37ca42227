"""Federated self-supervised monocular depth estimation at desk scale."""
from .errors import (
    AggregationError,
    ConfigError,
    EmptyValidityError,
    EvaluationError,
    IngestionError,
    InvalidArgument,
    NonFiniteLossError,
)
from .federation import RoundConfig, fedavg, local_update, run_centralized, run_federation, select_participants
from .geometry import Intrinsics, PoseSE3, reproject_point, warp_frame
from .losses import LossWeights
from .metrics import comm_lower_bound, comm_upper_bound, depth_errors, median_scale_align
from .models import ArchConfig, DepthNet, ParameterSet, PoseNet, sigmoid_to_depth

__version__ = "0.1.0"
