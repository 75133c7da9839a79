"""Point cloud semantic segmentation on fused 2D grid views.

A numpy-backed stack: a small reverse-mode autodiff engine, differentiable
point/grid transfer operators over top-down and spherical views, a cascaded
fusion network, its losses and metrics, and a deterministic CPU training
harness with synthetic scenes for desk-scale experiments.
"""

from .autodiff import (
    BatchNormState,
    Tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
    reset_graph,
    set_default_dtype,
)
from .config import RunConfig
from .losses import ClassWeights, consistency_loss, lovasz_softmax_loss, total_loss, wce_loss
from .metrics import ConfusionMatrix, IouResult, miou, report
from .network import (
    FcnConfig,
    ModelConfig,
    ModelParams,
    desk_config,
    full_scale_config,
    init_params,
    load_checkpoint,
    model_forward,
    save_checkpoint,
)
from .pointcloud import (
    IGNORE_LABEL,
    AugmentationSpec,
    PointCloud,
    augment,
    load_label_map,
    load_labels,
    load_scan,
    tta_variants,
    write_scan,
)
from .projection import (
    GridSpec,
    ProjectionIndex,
    ScatterRecord,
    coverage_stats,
    g2p_bilinear,
    p2g_scatter_max,
    point_input_features,
    project,
    project_bev,
    project_rv,
)
from .train import TrainResult, evaluate, predict_probs, train

__version__ = "0.1.0"
