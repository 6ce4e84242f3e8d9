//! Distinctiveness, interpolation similarity, intelligibility and
//! disentanglement measurements over trained profile models.
//!
//! Tables are normalized by the lookup baseline, whose row is therefore
//! exactly one.

mod linear;
mod metrics;
mod report;

pub use linear::{argmax, r_squared, LinearClassifier, LinearMap};
pub use metrics::{
    calibrate_thresholds, disentanglement_from_latents, disentanglement_probe, eval_distinctiveness,
    eval_intelligibility_proxy, eval_similarity_curve, interpolation_pairs, median, normalize_rows, ContentProbe,
    Disentanglement, EvalConfig, FarRow, ProbeConfig, SimilarityCurve, Threshold, TrainedSystem,
};
pub use report::{
    eval_seeds, evaluate, far_table_csv, intelligibility_table_csv, median_curves, read_raw_scores, read_report,
    similarity_curve_csv, similarity_svg, write_report, EvalInputs, EvalReport, MetricTable, RawScores, SystemSummary,
};
