//! Experiment runner: data generation, encoder pretraining, the per-cell
//! train/evaluate loop, ablation sweeps and report rendering.

pub mod ablation;
pub mod config;
pub mod plot;
pub mod report;
pub mod run;

pub use ablation::{run_ablation_prepared, AblationKind, SweepRow, SweepTable, SweepValue};
pub use config::{ExperimentConfig, Method, PretextConfig};
pub use report::{report, ReportOutput};
pub use run::{
    cell_data, cell_keys, check_disjoint, downstream_datasets, evaluate_model, prepare, pretext_dataset, run_cell,
    run_cells, run_experiment, train_model, CellData, CellKey, CellOutcome, CellResult, CellRun, Prepared,
    SplitCaches, Timing, TrainedModel,
};

use crate::error::Result;

/// Prepares the base config and runs one sweep into `base.out_dir`.
pub fn run_ablation(kind: AblationKind, base: &ExperimentConfig) -> Result<SweepTable> {
    let out = run::output_dir(base)?;
    let prepared = prepare(base)?;
    run_ablation_prepared(kind, base, &prepared, Some(&out))
}
