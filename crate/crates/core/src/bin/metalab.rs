// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use metalab::behaviors::DatasetTag;
use metalab::introspect::ScoringMode;
use metalab::labbench::{
    generate_data, pretrain_models, read_report, run_cross_family, run_primary, EvalReport, MatrixSpec, Role,
    RunConfig,
};

#[derive(Parser)]
#[command(name = "metalab", version, about = "Meta-model lie-detection matrix on toy transformers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run config; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated run seeds.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Datasets whose subsets form the matrix.
    #[arg(long, value_delimiter = ',', default_value = "S,E,L,M")]
    datasets: Vec<DatasetTag>,
    #[arg(long, default_value = "both")]
    scoring: ScoringMode,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the input-, meta- and cross-family input-models.
    Pretrain {
        /// Subset of `input,meta,input_b`.
        #[arg(long, value_delimiter = ',', default_value = "input,meta,input_b")]
        models: Vec<String>,
    },
    /// Write QA sets (JSON lines) and activation caches for pretrained input-models.
    GenData,
    /// Run the dataset-combination matrix with the primary input-model.
    Matrix(MatrixArgs),
    /// Run the matrix with input-model B.
    CrossFamily(MatrixArgs),
    /// Print a results table from a previous run.
    Report {
        /// Directory holding results.jsonl (default: `<out>/matrix`).
        #[arg(long)]
        dir: Option<PathBuf>,
        #[arg(long, default_value = "both")]
        scoring: ScoringMode,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seeds) = &common.seed {
        cfg.seeds = seeds.clone();
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(w) = common.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_role(name: &str) -> Result<Role> {
    match name {
        "input" => Ok(Role::Input),
        "meta" => Ok(Role::Meta),
        "input_b" => Ok(Role::InputB),
        other => anyhow::bail!("unknown model `{other}` (expected input, meta or input_b)"),
    }
}

fn print_report(report: &EvalReport, scoring: ScoringMode) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "failed".to_string(), |x| format!("{x:.3}"));
    println!("{} ({} cells, {} failed)", report.label, report.records.len(), report.failed_cells());
    let (strict, forced) = match scoring {
        ScoringMode::Strict => (true, false),
        ScoringMode::Forced => (false, true),
        ScoringMode::Both => (true, true),
    };
    let mut header = format!("{:<10}", "combo");
    if strict {
        header.push_str(&format!("{:>8}", "strict"));
    }
    if forced {
        header.push_str(&format!("{:>8}", "forced"));
    }
    header.push_str(&format!("{:>7}", "seeds"));
    println!("{header}");
    for s in &report.summaries {
        let mut line = format!("{:<10}", s.combo);
        if strict {
            line.push_str(&format!("{:>8}", fmt(s.mean_strict)));
        }
        if forced {
            line.push_str(&format!("{:>8}", fmt(s.mean_forced)));
        }
        line.push_str(&format!("{:>7}", s.seed_count));
        println!("{line}");
    }
    for r in report.records.iter().filter(|r| r.error.is_some()) {
        println!("failed {} seed {}: {}", r.combo, r.seed, r.error.as_deref().unwrap_or(""));
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Pretrain { models } => {
            let roles = models.iter().map(|m| parse_role(m)).collect::<Result<Vec<_>>>()?;
            std::fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
            cfg.save(&cfg.out_dir.join("config.toml"))?;
            for (_, report) in pretrain_models(&cfg, &roles)? {
                println!(
                    "{}: {} steps{}, held-out loss {:.4}",
                    report.role.name(),
                    report.steps,
                    if report.stopped_early { " (plateau)" } else { "" },
                    report.final_heldout()
                );
            }
        }
        Command::GenData => {
            let written = generate_data(&cfg)?;
            println!("wrote {} paths under {}", written.len(), cfg.out_dir.display());
        }
        Command::Matrix(args) => {
            let spec = MatrixSpec::subsets_of(&args.datasets)?;
            print_report(&run_primary(&cfg, &spec)?, args.scoring);
        }
        Command::CrossFamily(args) => {
            let spec = MatrixSpec::subsets_of(&args.datasets)?;
            print_report(&run_cross_family(&cfg, &spec)?, args.scoring);
        }
        Command::Report { dir, scoring } => {
            let dir = dir.unwrap_or_else(|| cfg.out_dir.join("matrix"));
            print_report(&read_report(&dir)?, scoring);
        }
    }
    Ok(())
}
