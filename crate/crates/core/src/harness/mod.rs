//! Folds, metrics, few-shot sweeps, the ablation grid, embedding PCA and
//! report files.

mod ablation;
mod experiment;
mod folds;
mod metrics;
mod pca;
mod report;

pub use ablation::{ablation_matrix, cehr_spec, pretrain_variant, Ablation, AblationBudget};
pub use experiment::{
    format_pct, mean_std, run_experiment, task_sequences, ExperimentData, FoldResult, MetricReport, ModelSpec,
    RunOptions, Task,
};
pub use folds::{few_shot_plan, make_folds, FoldPlan, Split, FEW_SHOT_FRACTIONS, N_FOLDS, TEST_FRACTION, VAL_FRACTION};
pub use metrics::{pr_auc, roc_auc};
pub use pca::{pca_2d, PCA_TOL};
pub use report::{
    att_pca, att_pca_csv, lengths_csv, mean_auc_by_model, metrics_csv, report_md, sequence_length_report,
    sequence_lengths, LengthRow,
};
