"""Gradient-guided dual-branch multimodal deformable image registration.

A moving volume is aligned to a fixed volume of a different modality by two
jointly trained deformation estimators, one on the images and one on their
gradient intensity maps, whose fields are combined by average or learnable
gated fusion and applied with a differentiable trilinear warp.
"""

from .autodiff import FdReport, Tape, Tensor, backward, finite_difference_check
from .fusion import GatedFusionParams, average_fuse, gated_fuse, init_gated_fusion
from .gradmap import gradient_map, normalized_gradient_map
from .losses import (
    ALTERNATE_WEIGHTS,
    DEFAULT_WEIGHTS,
    LossReport,
    LossWeights,
    MindFeatures,
    MindParams,
    mind_features,
    mind_loss,
    smoothness_loss,
    total_loss,
)
from .metrics import EvalReport, asd, dice, field_rmse, squared_edt, surface_voxels
from .net import THIN_CONFIG, Network, UNetConfig, build_unet, dual_branch_forward, predict_field
from .phantom import PhantomCase, PhantomConfig, generate_phantom_pair, random_smooth_field
from .train import (
    AdamState,
    TrainConfig,
    TrainedModel,
    adam_step,
    init_adam,
    instance_optimize,
    load_checkpoint,
    register_pair,
    save_checkpoint,
    train_dual_branch,
    train_mono_branch,
)
from .volume import (
    DataSizeMismatchError,
    LabelMask,
    MalformedHeaderError,
    UnsupportedNiftiFeatureError,
    UnsupportedScalarTypeError,
    Volume,
    VolumeIOError,
    crop_pad,
    load_volume,
    normalize_intensity,
    save_volume,
)
from .warp import (
    DeformationField,
    identity_field,
    load_field,
    sample_trilinear,
    save_field,
    warp_nearest,
    warp_trilinear,
)

__version__ = "0.1.0"
