//! Semantic accuracy, rank-1 identification with repeats, the realism proxy,
//! and side-by-side method comparison.

mod compare;
mod metrics;
mod realism;

pub use compare::{
    compare_methods, load_eval_data, method_label, render_table, Comparison, EvalConfig, EvalData, EvalReport,
    RepeatProtocol,
};
pub use metrics::{
    bootstrap_identification, embed, rank1_accuracy, rank1_hits, semantic_accuracy, semantic_distances, Gallery,
    RepeatedAccuracy,
};
pub use realism::{realism_proxy, ReferenceDiscriminator, ReferenceTraining};
