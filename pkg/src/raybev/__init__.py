"""Ray-centric point Gaussian encoder for radar BEV maps."""

from .encoder import (
    CameraProjection,
    EncoderConfig,
    FrameInputs,
    MlpSpec,
    RadarPoint,
    encode,
    encode_full,
    init_params,
    load_points,
    pinhole_projection,
    save_points,
    semantic_inject,
)
from .errors import (
    ConfigError,
    FeatureLengthMismatch,
    FormatError,
    PlacementFailure,
    RayBevError,
    ShapeMismatch,
    SingularAugmentation,
    WidthMismatch,
    ZeroQuaternion,
    ZeroRange,
)
from .gaussians import (
    ActivationLimits,
    Bev2DGaussian,
    EgoGaussian,
    GaussianRay,
    RawAttributes,
    activate,
    marginalize_bev,
    ray_covariance,
    to_ego,
)
from .geometry import (
    Quaternion,
    RayFrame,
    bev_aug_matrix,
    cartesian_from_spherical,
    quat_to_rotation,
    ray_frame_from_point,
    ray_frames,
    spherical_from_cartesian,
)
from .grad import (
    AdamState,
    TrainConfig,
    TrainingScene,
    adam_init,
    adam_step,
    batch_loss,
    evaluate,
    finite_difference_check,
    loss_and_grad,
    reconstruction_loss,
    train,
)
from .params import ParameterSet, load_checkpoint, save_checkpoint
from .rasterizer import (
    BevGridSpec,
    FeatureMap,
    footprint,
    load_feature_map,
    pillar_scatter,
    save_feature_map,
    splat,
    splat_arrays,
    splat_reference,
)
from .synthlab import (
    AblationReport,
    Box,
    BoxClass,
    ImageSpec,
    SceneSpec,
    SimConfig,
    default_experiments,
    make_feature_image,
    make_scene,
    render_target,
    run_ablation,
    sample_scene,
    simulate_radar,
)

__version__ = "0.1.0"
