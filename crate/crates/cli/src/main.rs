use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use evollm::codec::DiscretizationSpec;
use evollm::harness::{
    ablation_grid, aggregate_dir, apply_overrides, dataset_stats, export_finetune_dataset, parse_assignment,
    read_dataset, report, run_experiment, validate_prompt, Axis,
};
use evollm::{ExperimentConfig, FinetuneConfig};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "evollm", version, about = "Language-model-driven evolution strategies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config over all its seeds.
    Run {
        config: PathBuf,
        /// Override a config value, e.g. `--set budget.max_generations=50`.
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
    },
    /// Run the cartesian product of one or more axes.
    Ablate {
        config: PathBuf,
        #[arg(long = "axis", value_name = "PATH=V1,V2", required = true)]
        axes: Vec<String>,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        sets: Vec<String>,
    },
    /// Write summary.csv for every run directory below `dir`.
    Aggregate { dir: PathBuf },
    /// Curves, plots and a hashed manifest.
    Report {
        dir: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        plots: bool,
    },
    /// Generate a fine-tuning dataset from hill-climbing runs.
    ExportFinetune { config: PathBuf },
    /// Check that a prompt file parses and re-renders unchanged.
    ValidatePrompt { file: PathBuf },
    /// Summarize an exported dataset.
    DatasetStats {
        file: PathBuf,
        /// Fine-tune config whose codec should be used.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load(config: &PathBuf, sets: &[String]) -> Result<ExperimentConfig> {
    let base = ExperimentConfig::from_file(config).with_context(|| format!("loading {}", config.display()))?;
    let sets = sets.iter().map(|s| parse_assignment(s)).collect::<evollm::Result<Vec<_>>>()?;
    Ok(apply_overrides(&base, &sets)?)
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();

    match Cli::parse().command {
        Command::Run { config, sets } => {
            let config = load(&config, &sets)?;
            for log in run_experiment(&config)? {
                println!("{}", log.display());
            }
        }
        Command::Ablate { config, axes, sets } => {
            let base = load(&config, &sets)?;
            let axes = axes.iter().map(|a| Axis::parse(a)).collect::<evollm::Result<Vec<_>>>()?;
            let grid = ablation_grid(&base, &axes)?;
            // all cells are checked before anything runs
            for cell in &grid {
                cell.validate()?;
            }
            for cell in &grid {
                run_experiment(cell).with_context(|| format!("cell {}", cell.label()))?;
                println!("{}", cell.run_dir().display());
            }
        }
        Command::Aggregate { dir } => println!("{}", aggregate_dir(&dir)?.display()),
        Command::Report { dir, out, plots } => {
            let out = out.unwrap_or_else(|| dir.join("report"));
            let manifest = report(&dir, &out, plots)?;
            println!("{} files written to {}", manifest.files.len(), out.display());
        }
        Command::ExportFinetune { config } => {
            let config = FinetuneConfig::from_file(&config)?;
            let summary = export_finetune_dataset(&config)?;
            println!("{} records -> {}", summary.records, summary.dataset.display());
        }
        Command::ValidatePrompt { file } => {
            let text = std::fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let parsed = validate_prompt(&text)?;
            println!("ok: {} rows, width {}", parsed.rows.len(), parsed.width());
        }
        Command::DatasetStats { file, config } => {
            let spec = match config {
                Some(path) => FinetuneConfig::from_file(&path)?.codec,
                None => DiscretizationSpec::default(),
            };
            let stats = dataset_stats(&read_dataset(&file)?, &spec);
            println!("{}", serde_json::to_string_pretty(&stats)?);
            if stats.invalid > 0 {
                bail!("{} invalid records", stats.invalid);
            }
        }
    }
    Ok(())
}
