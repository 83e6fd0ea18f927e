"""Pose-transfer virtual try-on at desk scale."""

from .pose import Pose, SigmaTable, encode_heatmaps, load_pose, oks, select_model_image
from .warp import TPSTransform, apply_tps, fit_tps, gaussian_feather_composite

__version__ = "0.1.0"
