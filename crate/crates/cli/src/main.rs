//! `loce`: generate synthetic long-tailed worlds, run two-stage experiments
//! with ablations, and render equilibrium reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use loce::experiment::{run_experiment, ExperimentConfig, ExperimentRun, Variant};
use loce::metrics::MetricsReport;
use loce::report;
use loce::synthetic_world::{Group, World};

#[derive(Parser)]
#[command(name = "loce", version, about = "Score-guided classification equilibrium on synthetic long-tailed data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured world and write dataset.csv and dataset.json.
    Generate(Common),
    /// Train stage 1 once, then every stage-2 variant; write reports,
    /// histories and checkpoints.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants to run instead of the config grid:
        /// ce, ebl, mfs, loce, prior, or `all`.
        #[arg(long, value_delimiter = ',')]
        ablate: Option<Vec<String>>,
    },
    /// Render per-class curves, group tables and a comparison CSV from
    /// report files or run directories.
    Report {
        /// Report JSON files, or directories holding report_*.json.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Label of the run to compare against (default: `ce`, else the first).
        #[arg(long)]
        baseline: Option<String>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config in TOML; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(loce::Error),
}

impl From<loce::Error> for Failure {
    fn from(e: loce::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // --help and --version also arrive here.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate(common) => generate(common),
        Command::Train { common, ablate } => train(common, ablate),
        Command::Report { inputs, out, baseline } => render(inputs, out, baseline),
    }
}

fn load_config(common: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    cfg.output_dir = out.clone();
    Ok((cfg, out))
}

fn generate(common: Common) -> Result<(), Failure> {
    let (cfg, out) = load_config(&common)?;
    let world = World::generate(&cfg.world)?;
    world.export(&out, Some(&cfg.digest()))?;
    println!(
        "wrote {} ({} train, {} val instances, seed {})",
        out.join("dataset.csv").display(),
        world.train().len(),
        world.val().len(),
        cfg.seed
    );
    let t = world.thresholds();
    println!("{:<9} {:>7} {:>9}  train count range", "group", "classes", "instances");
    for g in Group::ALL {
        let counts: Vec<usize> = (0..world.num_classes())
            .filter(|&c| world.group_of(c) == g)
            .map(|c| world.train_counts()[c])
            .collect();
        let range = match (counts.iter().min(), counts.iter().max()) {
            (Some(lo), Some(hi)) => format!("{lo}..={hi}"),
            _ => "-".to_string(),
        };
        println!(
            "{:<9} {:>7} {:>9}  {range}",
            g.as_str(),
            counts.len(),
            counts.iter().sum::<usize>()
        );
    }
    println!("thresholds: rare <= {}, common <= {}", t.rare_max, t.common_max);
    Ok(())
}

fn train(common: Common, ablate: Option<Vec<String>>) -> Result<(), Failure> {
    let (mut cfg, out) = load_config(&common)?;
    if let Some(names) = ablate {
        let names: Vec<String> = if names.iter().any(|n| n == "all") {
            Variant::PRESETS.iter().map(|s| s.to_string()).collect()
        } else {
            names
        };
        if let Some(bad) = names.iter().find(|n| Variant::preset(n).is_none()) {
            return Err(Failure::Usage(format!(
                "--ablate: unknown variant `{bad}`; expected one of {}, or all",
                Variant::PRESETS.join(", ")
            )));
        }
        cfg = cfg
            .with_presets(&names)
            .map_err(|e| Failure::Usage(format!("--ablate: {e}")))?;
    }
    println!("config {} seed {}", cfg.digest(), cfg.seed);
    let run = run_experiment(&cfg, |line| println!("{line}"))?;
    let written = run.write_artifacts(&out)?;
    print_table(&run);
    println!("wrote {} files to {}", written.len(), out.display());
    Ok(())
}

fn print_table(run: &ExperimentRun) {
    let cell = |r: &MetricsReport, g: Group| {
        r.group(g)
            .map(|row| format!("{:.4}", row.accuracy))
            .unwrap_or_else(|| "-".to_string())
    };
    println!(
        "\n{:<10} {:>8} {:>8} {:>8} {:>9} {:>10}",
        "variant", "rare", "common", "frequent", "balanced", "dispersion"
    );
    let rows = std::iter::once(&run.stage1_report).chain(run.variants.iter().map(|v| &v.report));
    for r in rows {
        println!(
            "{:<10} {:>8} {:>8} {:>8} {:>9.4} {:>10.4}",
            r.provenance.variant,
            cell(r, Group::Rare),
            cell(r, Group::Common),
            cell(r, Group::Frequent),
            r.balanced_accuracy,
            r.score_dispersion
        );
    }
}

fn render(inputs: Vec<PathBuf>, out: PathBuf, baseline: Option<String>) -> Result<(), Failure> {
    let paths = report::collect_report_paths(&inputs)?;
    let reports = paths
        .iter()
        .map(|p| report::load_report(p))
        .collect::<Result<Vec<_>, _>>()?;
    let named = report::label_reports(reports);
    let written = report::render(&named, baseline.as_deref(), &out)?;
    for p in &written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
