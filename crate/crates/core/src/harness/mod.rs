//! Experiment runner: data, base training, CUPID training, estimation,
//! scoring and report assembly.

mod config;
pub mod io;
mod pipeline;
mod report;

pub use config::{Ablations, DataConfig, ExperimentConfig, ModelConfig, Task};
pub use pipeline::{
    ablate, derive_seed, estimate_sets, generate_data, params_hash, plot_grid, prepare_data, run, run_detailed,
    run_seed, run_seeds, score_sets, sweep_placement, toy_counts, train_base, train_cupid, ArmOutcome, EvalSet,
    GridRow, RawData, SeedOutcome, SeedResults, SetRecords, TaskData, TrainedCupid, Variant, AUSE_STEPS, GRID_POINTS, GRID_START,
    GRID_STEP, UCE_BINS,
};
pub use report::{summarize, ExperimentReport, MetricRow, Provenance, ScoreType, SeedFailure, SummaryRow};
