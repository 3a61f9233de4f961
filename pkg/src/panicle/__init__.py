"""Panicle counting and instance segmentation from aerial field imagery.

Counting is density-map regression with a small convolutional network;
instances come from superpixel detection plus density-aware greedy
clustering; season-long count series are cleaned up with isotonic
regression against thermal time.
"""

from .errors import (
    AnnotationError,
    DataGapError,
    DegenerateInputError,
    FormatError,
    PanicleError,
    ParameterError,
    ShapeError,
    TrainingError,
)
from .grid import PixelCoord, RasterGrid, read_pdm1, sum_pool, write_pdm1
from .density import (
    AnnotationSet,
    DensityTarget,
    build_detection_target,
    build_dot_density,
    build_region_density,
)
from .slic import LEVEL_SIZES, SuperpixelMap, adjacency, slic_segment
from .thermal import ThermalTime, WeatherSeries, compute_gdd, thermal_channel
from .net import (
    ModelState,
    NetConfig,
    ccnn_config,
    forward,
    init_model,
    load_checkpoint,
    loss_and_gradients,
    predict_count,
    predict_density,
    save_checkpoint,
    train,
    tuned_config,
)
from .augment import augment_dataset, tta_count
from .isotonic import CountSeries, pava
from .instseg import (
    ClusterAssignment,
    FitnessParams,
    PanicleSuperpixels,
    cluster_fitness,
    connected_components_segmentation,
    detect_superpixels,
    segment_instances,
)
from .evaluate import (
    MatchResult,
    average_precision,
    hungarian_match,
    instance_iou,
    mae,
    pr_curve_and_map,
    r_squared,
)
from .estimator import DensityRegressor, IsotonicCounts

__version__ = "0.1.0"

__all__ = [
    "AnnotationError",
    "AnnotationSet",
    "ClusterAssignment",
    "CountSeries",
    "DataGapError",
    "DegenerateInputError",
    "DensityRegressor",
    "DensityTarget",
    "FitnessParams",
    "FormatError",
    "IsotonicCounts",
    "LEVEL_SIZES",
    "MatchResult",
    "ModelState",
    "NetConfig",
    "PanicleError",
    "PanicleSuperpixels",
    "ParameterError",
    "PixelCoord",
    "RasterGrid",
    "ShapeError",
    "SuperpixelMap",
    "ThermalTime",
    "TrainingError",
    "WeatherSeries",
    "adjacency",
    "augment_dataset",
    "average_precision",
    "build_detection_target",
    "build_dot_density",
    "build_region_density",
    "ccnn_config",
    "cluster_fitness",
    "compute_gdd",
    "connected_components_segmentation",
    "detect_superpixels",
    "forward",
    "hungarian_match",
    "init_model",
    "instance_iou",
    "load_checkpoint",
    "loss_and_gradients",
    "mae",
    "pava",
    "pr_curve_and_map",
    "predict_count",
    "predict_density",
    "r_squared",
    "read_pdm1",
    "save_checkpoint",
    "segment_instances",
    "slic_segment",
    "sum_pool",
    "thermal_channel",
    "train",
    "tta_count",
    "tuned_config",
    "write_pdm1",
]
