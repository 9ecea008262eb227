// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment harness: pretraining, dataset generation, the dataset-combination
//! matrix (primary and cross-family input-models) and result files.

mod config;
mod data;
mod experiment;
mod matrix;
mod pretrain;
mod report;

pub use config::{DatasetSizes, PretrainConfig, RunConfig};
pub use data::{build_qa_sets, capture_all, data_dir, prepare_seed_data, write_qa_sets, QaSets, SeedData};
pub use experiment::{generate_data, run_cross_family, run_primary, seed_data_for};
pub use matrix::{run_cell, run_matrix, CellContext, Combo, MatrixSpec};
pub use pretrain::{corpora, heldout_loss, load_role, pretrain_lm, pretrain_models, pretrain_role, PretrainReport, Role};
pub use report::{
    aggregate, plot_path, plot_table, read_report, results_path, write_report, CellRecord, CellStatus, CellSummary,
    EvalReport,
};
