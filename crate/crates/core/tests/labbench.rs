// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use metalab::behaviors::DatasetTag;
use metalab::labbench::*;
use metalab::nanoformer::{load_checkpoint, ModelConfig};
use metalab::Error;
use proptest::prelude::*;

fn small(n_layers: usize, d_model: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        n_layers,
        d_model,
        n_heads: 2,
        d_ff: 2 * d_model,
        seed,
        ..ModelConfig::default()
    }
}

fn tiny_config(out: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        out_dir: out.to_path_buf(),
        seeds: vec![0, 1],
        tap_stride: 1,
        input: small(2, 16, 0),
        meta: small(2, 16, 1),
        input_b: small(3, 24, 2),
        ..RunConfig::default()
    };
    cfg.pretrain.max_steps = 6;
    cfg.pretrain.eval_every = 3;
    cfg.pretrain.corpus_size = 64;
    cfg.pretrain.heldout_size = 8;
    cfg.datasets.per_dataset = 24;
    cfg.datasets.lie_eval = 12;
    cfg.meta_train.steps = 3;
    cfg.meta_train.batch_size = 4;
    cfg
}

fn record(combo: &str, seed: u64, strict: f64, forced: f64) -> CellRecord {
    CellRecord {
        combo: combo.into(),
        seed,
        status: CellStatus::Ok,
        strict: Some(strict),
        forced: Some(forced),
        answer_rate: Some(1.0),
        heldout_forced: None,
        steps: 10,
        final_loss: Some(0.5),
        wall_clock_s: 0.1,
        error: None,
    }
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let path = dir.path().join("run.toml");
    cfg.save(&path).unwrap();
    assert_eq!(RunConfig::load(&path).unwrap(), cfg);
}

#[test]
fn partial_config_keeps_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    std::fs::write(&path, "seeds = [3]\n[meta_train]\nsteps = 7\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.seeds, vec![3]);
    assert_eq!(cfg.meta_train.steps, 7);
    assert_eq!(cfg.meta_train.batch_size, RunConfig::default().meta_train.batch_size);
    assert_eq!(cfg.input, RunConfig::default().input);
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = RunConfig::default();
    cfg.seeds.clear();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = RunConfig::default();
    cfg.meta.context_len = 16;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = RunConfig::default();
    cfg.datasets.eval_fraction = 1.0;
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn default_taps_are_layers_zero_and_four() {
    let cfg = RunConfig::default();
    assert_eq!(cfg.taps_for(&cfg.input).layers, vec![0, 4]);
}

#[test]
fn full_matrix_has_sixteen_cells() {
    let spec = MatrixSpec::full();
    assert_eq!(spec.combos.len(), 16);
    assert!(spec.combos[0].is_empty());
    let labels: std::collections::BTreeSet<String> = spec.combos.iter().map(Combo::label).collect();
    assert_eq!(labels.len(), 16);
    assert!(labels.contains("S") && labels.contains("S+M") && labels.contains("S+E+L+M"));
}

#[test]
fn combo_labels_parse_back() {
    for c in MatrixSpec::full().combos {
        assert_eq!(c.label().parse::<Combo>().unwrap(), c);
    }
    assert_eq!("M,S".parse::<Combo>().unwrap().label(), "S+M");
    assert!("S+LIE".parse::<Combo>().is_err());
}

#[test]
fn aggregate_means_are_arithmetic_means() {
    let records = vec![
        record("none", 0, 0.25, 0.5),
        record("S", 0, 0.5, 0.75),
        record("none", 1, 0.0, 0.375),
        record("S", 1, 1.0, 0.25),
        CellRecord::failed("S".into(), 2, "boom".into(), 0.0),
    ];
    let report = EvalReport::new("t", records);
    let none = report.summary("none").unwrap();
    assert_eq!((none.mean_strict, none.mean_forced, none.seed_count), (Some(0.125), Some(0.4375), 2));
    let s = report.summary("S").unwrap();
    assert_eq!((s.mean_strict, s.mean_forced, s.seed_count, s.failed), (Some(0.75), Some(0.5), 2, 1));
    assert_eq!(report.failed_cells(), 1);
}

#[test]
fn report_round_trips_and_marks_failures() {
    let dir = tempfile::tempdir().unwrap();
    let mut records = Vec::new();
    for (i, c) in MatrixSpec::full().combos.iter().enumerate() {
        for seed in 0..2 {
            if c.label() == "E+L" {
                records.push(CellRecord::failed(c.label(), seed, "diverged".into(), 1.0));
            } else {
                records.push(record(&c.label(), seed, i as f64 / 16.0, 0.5));
            }
        }
    }
    let report = EvalReport::new("primary", records);
    write_report(&report, dir.path()).unwrap();
    assert_eq!(read_report(dir.path()).unwrap(), report);

    let plot = std::fs::read_to_string(plot_path(dir.path())).unwrap();
    let lines: Vec<&str> = plot.lines().collect();
    assert_eq!(lines[0], "combo,mean_strict,mean_forced,seed_count");
    assert_eq!(lines.len(), 17);
    assert!(lines.contains(&"E+L,failed,failed,0"));
    let results = std::fs::read_to_string(results_path(dir.path())).unwrap();
    assert_eq!(results.matches("\"status\":\"failed\"").count(), 2);
}

#[test]
fn read_report_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(results_path(dir.path()), "{not json}\n").unwrap();
    assert!(matches!(read_report(dir.path()), Err(Error::Format(_))));
    std::fs::write(results_path(dir.path()), "").unwrap();
    assert!(matches!(read_report(dir.path()), Err(Error::Format(_))));
}

#[test]
fn unwritable_report_dir_is_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("occupied");
    std::fs::write(&file, "x").unwrap();
    let report = EvalReport::new("t", vec![record("none", 0, 0.0, 0.5)]);
    assert!(matches!(write_report(&report, &file.join("sub")), Err(Error::Io { .. })));
}

#[test]
fn missing_checkpoint_is_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    assert!(matches!(run_primary(&cfg, &MatrixSpec::full()), Err(Error::Config(_))));
}

#[test]
fn cross_family_needs_a_different_shape() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    cfg.input_b = ModelConfig { seed: 9, ..cfg.input.clone() };
    assert!(matches!(run_cross_family(&cfg, &MatrixSpec::full()), Err(Error::Config(_))));
}

#[test]
fn pretraining_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        pretrain_models(&tiny_config(dir.path()), &[Role::Meta]).unwrap();
    }
    let read = |d: &Path| std::fs::read(Role::Meta.checkpoint_path(&tiny_config(d))).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    let (model, opt) = load_checkpoint(&Role::Meta.checkpoint_path(&tiny_config(a.path()))).unwrap();
    assert_eq!(model.config(), &tiny_config(a.path()).meta);
    assert!(opt.is_some());
}

#[test]
fn stopping_rule_stops_on_plateau() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(dir.path());
    // A zero learning rate can never improve the held-out loss.
    cfg.pretrain.optim.lr = 0.0;
    cfg.pretrain.max_steps = 100;
    cfg.pretrain.eval_every = 2;
    cfg.pretrain.patience = 2;
    let (_, report) = pretrain_role(&cfg, Role::Input).unwrap();
    assert!(report.stopped_early);
    assert_eq!(report.steps, 4);
    assert_eq!(report.heldout.len(), 3);
}

#[test]
fn qa_sets_are_seeded() {
    let cfg = tiny_config(Path::new("unused"));
    let vocab = metalab::behaviors::make_toy_vocab(&cfg.vocab).unwrap();
    let a = build_qa_sets(&cfg, &vocab, 0).unwrap();
    assert_eq!(a, build_qa_sets(&cfg, &vocab, 0).unwrap());
    assert_ne!(a, build_qa_sets(&cfg, &vocab, 1).unwrap());
    assert_eq!(a.train.len(), 4);
    assert_eq!(a.lie.len(), 12);
    for tag in DatasetTag::TRAINABLE {
        assert_eq!(a.train[&tag].len() + a.heldout[&tag].len(), 24);
    }
}

/// Pretrains all three tiny models once and runs both matrices end to end.
#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    pretrain_models(&cfg, &[Role::Input, Role::Meta, Role::InputB]).unwrap();
    let written = generate_data(&cfg).unwrap();
    assert!(written.iter().any(|p| p.ends_with("LIE_eval.jsonl")));
    assert!(dir.path().join("data/input/seed1/LIE_eval.mmab").exists());

    let spec = MatrixSpec::subsets_of(&[DatasetTag::S, DatasetTag::M]).unwrap();
    let report = run_primary(&cfg, &spec).unwrap();
    assert_eq!(report.records.len(), 8);
    assert_eq!(report.failed_cells(), 0);
    for r in &report.records {
        let expected = if r.combo == "none" { 0 } else { 3 };
        assert_eq!(r.steps, expected, "{}", r.combo);
        for v in [r.strict, r.forced, r.answer_rate].into_iter().flatten() {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert_eq!(read_report(&dir.path().join("matrix")).unwrap(), report);

    // Cached bundles give the same numbers as a fresh capture.
    let again = run_primary(&cfg, &spec).unwrap();
    let numbers = |r: &EvalReport| r.records.iter().map(|c| (c.combo.clone(), c.seed, c.strict, c.forced)).collect::<Vec<_>>();
    assert_eq!(numbers(&again), numbers(&report));

    // Cells are isolated: parallel workers and reordered combos change nothing.
    let mut par = cfg.clone();
    par.workers = 3;
    let mut reversed = spec.clone();
    reversed.combos.reverse();
    let mut shuffled = numbers(&run_primary(&par, &reversed).unwrap());
    shuffled.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut base = numbers(&report);
    base.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    assert_eq!(shuffled, base);

    let cross = run_cross_family(&cfg, &spec).unwrap();
    assert_eq!(cross.records.len(), 8);
    assert_eq!(cross.failed_cells(), 0);
    assert!(cross.summary("none").is_some());
    assert!(dir.path().join("cross_family/plot.csv").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn summary_is_a_pure_function_of_records(values in prop::collection::vec((0u8..4, 0u64..3, 0.0f64..1.0, 0.0f64..1.0), 1..24)) {
        let combos = ["none", "S", "E", "S+E"];
        let records: Vec<CellRecord> = values.iter().map(|&(c, s, a, b)| record(combos[c as usize], s, a, b)).collect();
        let report = EvalReport::new("p", records.clone());
        for summary in &report.summaries {
            let ok: Vec<&CellRecord> = records.iter().filter(|r| r.combo == summary.combo).collect();
            let mean = ok.iter().map(|r| r.strict.unwrap()).sum::<f64>() / ok.len() as f64;
            prop_assert_eq!(summary.seed_count, ok.len());
            prop_assert!((summary.mean_strict.unwrap() - mean).abs() < 1e-12);
        }
        let mut reversed = records;
        reversed.reverse();
        let mut a = EvalReport::new("p", reversed).summaries;
        let mut b = report.summaries;
        a.sort_by(|x, y| x.combo.cmp(&y.combo));
        b.sort_by(|x, y| x.combo.cmp(&y.combo));
        for (x, y) in a.iter().zip(&b) {
            prop_assert_eq!(&x.combo, &y.combo);
            prop_assert!((x.mean_strict.unwrap() - y.mean_strict.unwrap()).abs() < 1e-12);
        }
    }
}
