"""CLIP-ViT representation decomposition: python surface over the C++ core."""

from clipdecomp._core import (  # noqa: F401
    AblationMode,
    AblationSpec,
    BoolMask,
    ClassBank,
    DecomposedRepresentation,
    FormatError,
    GroupStat,
    HeadBasis,
    Heatmap,
    LedgerIndexError,
    MeanBank,
    RetrievalResult,
    SegmentationMetrics,
    ShapeError,
    TextEmbeddingBank,
    ViTConfig,
    ViTModel,
    WorstGroupResult,
    __version__,
    apply_ablation,
    apply_ablation_ledger,
    average_precision,
    bias_normalize,
    binarize,
    build_mean_bank,
    decompose_image,
    explained_variance,
    fnv1a64_file,
    head_contribution,
    joint_heatmap,
    load_archive,
    load_decomposition,
    load_head_basis,
    load_mean_bank,
    load_model,
    load_text_bank,
    project_contribution,
    project_rows_to_span,
    read_ppm,
    reconstruct,
    reference_forward,
    retrieve_by_head,
    save_archive,
    save_decomposition,
    save_head_basis,
    save_mean_bank,
    save_text_bank,
    seg_metrics,
    textspan,
    token_contribution,
    token_heatmap,
    truncate_basis,
    upsample_bilinear,
    upsample_nearest,
    worst_group_accuracy,
    write_pgm,
    zero_shot_classify,
)
