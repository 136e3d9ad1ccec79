//! Stage C to F curation: artifact filtering, aesthetic rank-select,
//! stratified style regeneration, TIPS gating and review decisions.

pub mod artifact;
pub mod decisions;
pub mod pipeline;
pub mod select;
pub mod style;

pub use artifact::{
    artifact_heuristics, artifact_report, layer_embeddings, ArtifactClassifier, ArtifactReport,
    ArtifactThresholds, DuplicatePair, OverlapViolation,
};
pub use decisions::{apply_review_decisions, drop_layers, rebuilt_id, LayerRejectPolicy, ReviewOutcome};
pub use pipeline::{
    colorfulness, export_merged, mock_layouts, read_layouts, run_pipeline, write_layouts,
    LayoutRecord, PipelineConfig, PipelineRun, RunOptions, ScalePlan, StageReport, StageToggles,
    PRODUCTION_SCALE,
};
pub use select::{
    aesthetic_rank_select, keep_count, stratified_style_sample, StyleAssignment, StyleSample,
    AESTHETIC_KEY,
};
pub use style::{
    embed_layers, regenerate_with_style, restyle_captions, same_geometry, tips_gate,
    tips_gate_with, FilterDecision, LayerEmbeddings, RegenConfig,
};
