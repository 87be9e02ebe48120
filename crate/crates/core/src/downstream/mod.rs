//! Fine-tuning on labelled slices and evaluation.

mod finetune;
mod metrics;
mod reduce;
mod sweep;

pub use finetune::{
    attach_head, finetune, finetune_run, select_best_pretrain_epoch, Classifier, EpochLog,
    FinetuneConfig, FinetuneReport, Phase, RunOutcome, Splits, StepEvent, ENCODER_PREFIX,
};
pub use metrics::{
    accuracy, auc_binary, f1_binary, macro_f1, mean_std, metrics, Metrics, RunMetrics,
};
pub use reduce::{class_quotas, reduction_plan, stratified_split, stratified_subsample};
pub use sweep::{
    finetune_fraction, finetune_sweep, sweep, write_sweep_csv, ReductionPlan, SweepRow,
};
