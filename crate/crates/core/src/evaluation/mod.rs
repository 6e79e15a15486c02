//! Metrics and structural checks: accuracy matrices, backward transfer,
//! winner-mask overlap, FLOPs accounting, pruning, and audits.

pub(crate) mod audit;
pub(crate) mod flops;
pub(crate) mod gradcheck;
pub(crate) mod metrics;
pub(crate) mod overlap;
pub(crate) mod prune;
pub(crate) mod report;

pub use audit::{
    audit_block_activations, sparsity_audit, AuditReport, LayerActivationAudit, RetentionAudit,
};
pub use flops::{flops_breakdown, flops_estimate, FlopsMode, COUNTING_MODEL};
pub use gradcheck::{
    check_conv_instances, check_dense_instances, check_model_instance, GradCheckSummary,
};
pub use metrics::{bti, dataset_accuracy, AccuracyMatrix};
pub use overlap::{consecutive_task_overlaps, winner_overlap, winner_overlap_per_layer};
pub use prune::PrunedModel;
pub use report::{metrics_report, MetricsReport, OverlapRow};
