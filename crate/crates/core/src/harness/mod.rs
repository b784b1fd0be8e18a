//! Desk-scale experiments: tasks, threshold training with a FLOPs ledger,
//! method comparison, rank ablation and attention export.

mod experiments;
mod ledger;
mod report;
mod tasks;

pub use experiments::{
    ablate_ranks, compare_methods, train_to_threshold, AblationReport, Aggregate, CompareReport, Experiment, MethodRun,
    RankRow, RunResult, RunSummary, SeedBaseline, SeedSummary, TrainBudget, ABLATION_FORMAT, COMPARE_FORMAT,
    DEFAULT_RANKS,
};
pub use ledger::{flops_saving_ratio, flops_to_reach, CurvePoint, FlopsLedger};
pub use report::{
    export_attention_maps, write_ablation_csv, write_curve, write_curves, write_json, write_loss_trace, CURVE_HEADER,
};
pub use tasks::{Task, TaskKind, TaskSpec, CORPUS};

#[cfg(test)]
mod tests;
