"""DRUM: raydrop-aware diffusion posterior sampling for LiDAR Sim2Real
translation, with analytic verification oracles and a toy-scene pipeline."""

from .errors import (
    DegenerateTimeError,
    DrumError,
    InsufficientDataError,
    InvalidArgumentError,
    NumericFailureError,
    ScheduleInconsistencyError,
    TrainingDivergenceError,
)
from .guidance import (
    GuidanceConfig,
    ReflectanceZeroingOperator,
    guided_eps,
    masked_conditional_eps,
    pigdm_gradient,
    progressive_mask,
    r_schedule,
)
from .lidar import (
    DROP_SENTINEL,
    PointCloud,
    RangeImage,
    SensorIntrinsics,
    TOY_INTRINSICS,
    denormalize,
    normalize,
    project,
    unproject,
)
from .metrics import (
    GaussianStats,
    builtin_features,
    feature_matrix,
    fit_gaussian,
    frechet_distance,
    raydrop_ratio,
)
from .models.base import ScoreModel
from .models.gaussian import GaussianPrior
from .models.network import NeuralDenoiser, load_checkpoint, save_checkpoint
from .models.train import TrainConfig, train_denoiser
from .sampler import (
    SamplerConfig,
    TensorTranslation,
    TranslationResult,
    drum_translate,
    finalize_normalized,
    finalize_sample,
    harmonized_step,
    initialize_from_sim,
    pigdm_translate,
    sdedit_translate,
    translate_tensor,
)
from .schedule import (
    CosineSchedule,
    DEFAULT_SCHEDULE,
    StateSample,
    T_HIGH,
    T_LOW,
    TWEEDIE_CLIP,
    alpha_sigma,
    ddim_step,
    eps_to_score,
    forward_noise,
    renoise,
    score_to_eps,
    time_grid,
    tweedie,
)
from .toy import ToySceneConfig, gen_toy_scene

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
