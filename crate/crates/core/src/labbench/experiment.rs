// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use super::config::RunConfig;
use super::data::{build_qa_sets, data_dir, prepare_seed_data, write_qa_sets, SeedData};
use super::matrix::{run_matrix, MatrixSpec};
use super::pretrain::{load_role, Role};
use super::report::{write_report, EvalReport};
use crate::behaviors::{make_toy_vocab, ToyVocab};
use crate::error::{Error, Result};
use crate::nanoformer::Model;

/// QA sets for `seed` with bundles from `input`, cached under `out_dir/data`.
pub fn seed_data_for(cfg: &RunConfig, vocab: &ToyVocab, input: &Model, role: Role, seed: u64) -> Result<SeedData> {
    let sets = build_qa_sets(cfg, vocab, seed)?;
    let dir = data_dir(cfg, role.name(), seed);
    prepare_seed_data(cfg, vocab, input, &sets, Some(&dir))
}

/// Writes the QA sets of every seed as JSON lines, plus bundle caches for
/// every input-model whose checkpoint exists. Returns the files written.
pub fn generate_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let vocab = make_toy_vocab(&cfg.vocab)?;
    let mut written = Vec::new();
    for &seed in &cfg.seeds {
        let sets = build_qa_sets(cfg, &vocab, seed)?;
        written.extend(write_qa_sets(&cfg.out_dir.join("data").join("qa").join(format!("seed{seed}")), &sets)?);
        for role in [Role::Input, Role::InputB] {
            if role.checkpoint_path(cfg).exists() {
                let input = load_role(cfg, role)?;
                let dir = data_dir(cfg, role.name(), seed);
                prepare_seed_data(cfg, &vocab, &input, &sets, Some(&dir))?;
                written.push(dir);
            }
        }
    }
    Ok(written)
}

fn run_with(cfg: &RunConfig, spec: &MatrixSpec, role: Role, label: &str, out: &str) -> Result<EvalReport> {
    cfg.validate()?;
    let vocab = make_toy_vocab(&cfg.vocab)?;
    let input = load_role(cfg, role)?;
    let meta = load_role(cfg, Role::Meta)?;
    let digest = input.param_digest();
    let seeds = cfg
        .seeds
        .iter()
        .map(|&s| seed_data_for(cfg, &vocab, &input, role, s))
        .collect::<Result<Vec<_>>>()?;
    let report = run_matrix(spec, cfg, &vocab, &meta, &seeds, label)?;
    if input.param_digest() != digest {
        return Err(Error::Contract("input-model parameters changed during the run".into()));
    }
    write_report(&report, &cfg.out_dir.join(out))?;
    Ok(report)
}

/// The dataset-combination matrix with the primary input-model; results go to `out_dir/matrix`.
pub fn run_primary(cfg: &RunConfig, spec: &MatrixSpec) -> Result<EvalReport> {
    run_with(cfg, spec, Role::Input, "primary", "matrix")
}

/// The same matrix with input-model B; results go to `out_dir/cross_family`.
pub fn run_cross_family(cfg: &RunConfig, spec: &MatrixSpec) -> Result<EvalReport> {
    if cfg.input_b.d_model == cfg.input.d_model && cfg.input_b.n_layers == cfg.input.n_layers {
        return Err(Error::Config(
            "the cross-family input-model must differ in width or depth".into(),
        ));
    }
    run_with(cfg, spec, Role::InputB, "cross-family", "cross_family")
}
