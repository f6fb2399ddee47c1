"""Texture feature discovery, contrastive labeling, and diffusion-based editing."""

from .bridge import BridgeRemoteDenoiser, BridgeServer
from .cluster import KMeansResult, LabelAgreement, evaluate_labels, kmeans
from .contrastive import (
    Embedder,
    EmbedderConfig,
    TrainingReport,
    infonce_loss_and_grads,
    infonce_pair_loss,
    label_pixels,
    train_embedder,
)
from .diffusion import (
    Denoiser,
    EchoDenoiser,
    ExemplarPatchDenoiser,
    GaussianAnalyticDenoiser,
    GuidanceConfig,
    SigmaSchedule,
    build_schedule,
    cfg,
    sample_euler,
    sample_heun,
)
from .editing import (
    EditRequest,
    Trajectory,
    TrajectoryStore,
    invert,
    localized_edit,
    mix,
    reconstruct,
    record_generation,
    regenerate_with_edit,
    transfer_feature,
)
from .errors import (
    BridgeTransportError,
    ClusterError,
    DegenerateHistogramError,
    GridFormatError,
    LabelMatchError,
    NoExemplarSupportError,
    PlanError,
    ProjectError,
    RegionMiningError,
    SamplerError,
    TextureKitError,
    TrainingDivergedError,
    TrajectoryMissingError,
)
from .filters import FilterBank
from .grid import (
    Grid,
    LabelMap,
    Rng,
    lanczos_lowpass,
    lanczos_taps,
    read_grid,
    read_labels,
    resample,
    resample_labels,
    write_grid,
    write_labels,
)
from .project import (
    Job,
    JobManager,
    PipelineConfig,
    Project,
    apply_config_overrides,
    parse_config_text,
    render_config_text,
    run_stage,
)
from .regions import (
    Region,
    RegionPairSet,
    connected_components,
    erode_2x2,
    mine_pairs,
    region_descriptor,
)
from .scoring import (
    PatchDissimilarityScorer,
    ScorerConfig,
    binarize,
    combined_thresholds,
    otsu_threshold,
    score_patch_dissimilarity,
    skewed_threshold,
)
from .service import Studio, create_app
from .synthesis import (
    NoiseField,
    SynthStats,
    WindowPlan,
    multidiffusion_sample,
    plan_windows,
    seam_report,
    tileable_synthesize,
    uniformize,
)

__version__ = "0.1.0"
