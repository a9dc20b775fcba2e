"""Joint optical-flow and depth forecasting with recurrent multimodal networks."""

from .data import (
    CameraIntrinsics,
    DepthMap,
    FlowField,
    InputWindow,
    InstanceMask,
    NormalizationParams,
    SceneObject,
    SceneParams,
    SceneSpec,
    SyntheticSequence,
    build_window,
    denormalize_depth,
    denormalize_flow,
    disparity_to_depth,
    normalize_depth,
    normalize_flow,
    read_raster,
    synth_scene,
    write_raster,
)
from .losses import LossWeights, berhu, depth_loss, flow_loss, total_loss
from .model import FlodCast, ModelConfig, PredictionBlock
from .rollout import CopyLast, RolloutResult, autoregress, predict_at

__version__ = "0.1.0"
