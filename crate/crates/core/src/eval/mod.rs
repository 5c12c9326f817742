//! Verification, open-set identification, relative gains and templates.

mod metrics;
mod report;

pub use metrics::{
    aggregate, auc_tpir, best_threshold, cosine, cross_res_gain, dot, format_gain, roc_auc, same_res_gain, tar_at_far,
    tpir_at_fpir, verification_accuracy, verification_accuracy_embeddings, verification_accuracy_folds, IdentificationScores,
    Probe, ScoredPair, Template, DEFAULT_FOLDS,
};
pub use report::{MetricReport, REPORT_HEADER};
