//! `cardiofed` command line: federated runs, modality ablations, fairness
//! sweeps and report inspection.
//!
//! Artifacts go to `<output root>/<config hash prefix>/`, where the root comes
//! from `--output-root`, then `CARDIOFED_OUTPUT_ROOT`, then `runs`.

use anyhow::{bail, Context, Result};
use cardiofed::experiment::{self, parse_modalities, ExperimentConfig};
use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cardiofed", version, about = "Federated multimodal cardiovascular-risk simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `[section]` headers and `key = value` lines.
    config: PathBuf,
    /// Override a config key, e.g. `--set federation.rounds=3`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Artifact root directory.
    #[arg(long, env = experiment::OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate under the configured protocol.
    Run(ConfigArgs),
    /// Compare the full model against models with modalities removed.
    Ablate {
        #[command(flatten)]
        args: ConfigArgs,
        /// Comma-separated modalities to drop one at a time.
        #[arg(long, value_name = "MODALITY,...")]
        drop: String,
    },
    /// Retrain under increasing reference-group prevalence and track fairness gaps.
    SweepFairness(ConfigArgs),
    /// Print the metrics of a finished run directory.
    Report { dir: PathBuf },
}

fn load(args: &ConfigArgs) -> Result<(ExperimentConfig, PathBuf)> {
    let text = std::fs::read_to_string(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut cfg = ExperimentConfig::parse(&text).with_context(|| format!("invalid config {}", args.config.display()))?;
    for o in &args.overrides {
        cfg.apply_override(o).with_context(|| format!("invalid override `{o}`"))?;
    }
    cfg.validate().context("invalid config")?;
    let dir = experiment::output_dir(&cfg, &experiment::output_root(args.output_root.as_deref()));
    Ok((cfg, dir))
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let (cfg, dir) = load(&args)?;
            let out = experiment::run_experiment(&cfg).context("training failed")?;
            experiment::write_run_artifacts(&dir, &cfg, &out)?;
            print!("{}", out.report.pooled.to_kv());
            println!("artifacts = {}", dir.display());
        }
        Command::Ablate { args, drop } => {
            let (cfg, dir) = load(&args)?;
            let drops = parse_modalities(&drop)?;
            if drops.is_empty() {
                bail!("--drop needs at least one modality");
            }
            let table = experiment::run_ablation(&cfg, &drops)?;
            let tsv = table.to_tsv();
            write(&dir, "config.txt", &cfg.to_text())?;
            write(&dir, "ablation.tsv", &tsv)?;
            write(&dir, "ablation.json", &table.to_json()?)?;
            print!("{tsv}");
            println!("artifacts = {}", dir.display());
        }
        Command::SweepFairness(args) => {
            let (cfg, dir) = load(&args)?;
            let sweep = experiment::run_fairness_sweep(&cfg)?;
            let tsv = sweep.to_tsv();
            write(&dir, "config.txt", &cfg.to_text())?;
            write(&dir, "fairness_sweep.tsv", &tsv)?;
            write(&dir, "fairness_sweep.json", &sweep.to_json()?)?;
            print!("{tsv}");
            println!("artifacts = {}", dir.display());
        }
        Command::Report { dir } => {
            let report = experiment::read_report(&dir).with_context(|| format!("reading report in {}", dir.display()))?;
            println!("protocol = {}", report.protocol);
            println!("config_hash = {}", report.config_hash);
            print!("{}", report.pooled.to_kv());
            for f in &report.folds {
                println!("{}.n_test = {}", f.name, f.n_test);
                println!("{}.roc_auc = {}", f.name, f.metrics.roc_auc.map_or("null".into(), |v| v.to_string()));
            }
            if let Some(s) = &report.shift {
                println!("shift.auc_drop = {}", s.auc_drop.map_or("null".into(), |v| v.to_string()));
            }
            if let Some(eps) = report.epsilon {
                println!("epsilon = {eps}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
