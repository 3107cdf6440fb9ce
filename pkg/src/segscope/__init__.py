"""segscope: evaluation and calibration toolkit for 3D lesion segmentation
models treated as black boxes over probability volumes."""

__version__ = "0.1.0"

from .volume import (
    BinaryMask,
    GridMismatchError,
    GridVolume,
    ProbabilityMap,
    coord_channels,
    gaussian_smooth,
    geometric_mean,
    normalize_intensity,
    pad_to_grid,
)
from .nifti import NiftiError, read_volume, write_volume
from .metrics import (
    MetricParams,
    MetricRow,
    binarize,
    combined_loss,
    dice_score,
    early_stop,
    focal_loss,
    fp_voxel_count,
    hd95,
    soft_dice_loss,
    thresholded_average_loss,
)
from .corruption import (
    NoiseSchedule,
    NoiseSpec,
    apply_bias_field,
    apply_combined,
    apply_gibbs,
    apply_rician,
    apply_spike,
    derive_seed,
    schedule,
)
from .stats import (
    CorrectionResult,
    TestResult,
    ZeroVarianceError,
    bh_fdr,
    bootstrap_means,
    descriptive,
    holm_fwer,
    kruskal_wallis,
    paired_t,
    spearman,
)
from .folds import (
    ArchetypeAtlas,
    FoldPlan,
    StudyRecord,
    aggregate_cv,
    assign_controls,
    assign_phenotype,
    balance_folds,
    fold_summary,
)
from .anatomy import (
    DensityStack,
    GlmSpec,
    TMap,
    clusters,
    density_stack,
    fit_voxelwise_glm,
    overlap_map,
    permutation_fwe,
)
from .morphology import (
    AlignmentTransform,
    EmbeddingModel,
    EmbeddingParams,
    apply_alignment,
    compare_models,
    compute_alignment,
    embed_new,
    embedding_distances,
    fit_embedding,
    mask_to_vector,
)
from .harness import (
    BuiltinSegmenter,
    ExternalSegmenter,
    PredictionDirectory,
    SegmenterError,
    cv_evaluate,
    fp_report,
    noise_sweep,
    run_segmenter,
)
from .synth import PhantomSpec, make_archetype_atlas, make_dataset, make_phantom
