use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use semidg::data::{default_domains, load_dataset, save_dataset};
use semidg::experiment::{results_root, run_suite_with, write_report, ExperimentConfig, RESULTS_ENV};
use semidg::{evaluate, train, train_erm_baseline, Checkpoint, Dataset, ImageSize, TrainConfig, TrainOutput};

#[derive(Parser)]
#[command(name = "semidg", version, about = "Episodic training and evaluation of multi-domain segmentation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    GenData {
        /// Experiment TOML supplying domains, image size and data seed (defaults otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Labeled fraction applied to every domain.
        #[arg(long, default_value_t = 0.1)]
        label_fraction: f64,
    },
    /// Meta-train the disentangled model with one held-out domain.
    Train(TrainArgs),
    /// Train the supervised baseline under the same budget.
    TrainBaseline(TrainArgs),
    /// Evaluate a checkpoint on one domain.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        target_domain: usize,
        /// Write the report JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a leave-one-domain-out sweep (skips runs already in the results CSV).
    Suite {
        #[arg(long)]
        config: PathBuf,
        /// Results directory [default: $SEMIDG_RESULTS or ./results].
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Build tables and plots from a results directory.
    Report {
        #[arg(long)]
        results: Option<PathBuf>,
        /// Output directory [default: <results>/report].
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Training TOML (TrainConfig schema).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; overrides `dataset` in the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    target_domain: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, conflicts_with = "first_order")]
    second_order: bool,
    #[arg(long)]
    first_order: bool,
    #[arg(long)]
    iterations: Option<usize>,
    /// Output directory for the checkpoint, history and report.
    #[arg(long)]
    out: PathBuf,
}

impl TrainArgs {
    fn config(&self) -> Result<TrainConfig> {
        let mut c = match &self.config {
            Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => TrainConfig::default(),
        };
        if let Some(d) = &self.dataset {
            c.dataset = Some(d.clone());
        }
        if let Some(t) = self.target_domain {
            c.target_domain = Some(t);
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(n) = self.iterations {
            c.iterations = n;
        }
        if self.second_order {
            c.second_order = true;
        }
        if self.first_order {
            c.second_order = false;
        }
        c.validate()?;
        Ok(c)
    }
}

fn dataset_for(config: &TrainConfig) -> Result<Dataset> {
    match &config.dataset {
        Some(dir) => Ok(load_dataset(dir)?),
        None => {
            let size = config.model.image_size;
            eprintln!("no dataset given; generating the default four-domain set at {}x{}", size.height, size.width);
            Ok(Dataset::generate(default_domains(40, 0.1), size, 0)?)
        }
    }
}

fn run_training(args: &TrainArgs, baseline: bool) -> Result<()> {
    let config = args.config()?;
    let dataset = dataset_for(&config)?;
    let TrainOutput { checkpoint, history } =
        if baseline { train_erm_baseline(&config, &dataset)? } else { train(&config, &dataset)? };
    std::fs::create_dir_all(&args.out)?;
    checkpoint.save(&args.out.join("model.ckpt"))?;
    history.write_jsonl(&args.out.join("history.jsonl"))?;
    std::fs::write(args.out.join("config.json"), serde_json::to_string_pretty(&config)?)?;
    eprintln!("{} steps, {} skipped", history.steps.len(), history.skipped_steps);
    if let Some(t) = config.target_domain {
        let report = evaluate(&checkpoint, &dataset, t)?;
        std::fs::write(args.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
        println!("held-out domain {t}: dice {:.2}  hausdorff {:.2}  dc {:.4}", report.mean_dice(), report.mean_hausdorff(), report.dc);
    }
    Ok(())
}

fn default_results() -> PathBuf {
    results_root(Path::new("results"))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { config, out, label_fraction } => {
            let (domains, size, seed) = match config {
                Some(p) => {
                    let c = ExperimentConfig::load(&p)?;
                    (c.domains, ImageSize::square(c.image_size), c.data_seed)
                }
                None => (default_domains(40, label_fraction), ImageSize::square(64), 0),
            };
            let domains = domains.into_iter().map(|d| semidg::DomainSpec { labeled_fraction: label_fraction, ..d }).collect();
            let dataset = Dataset::generate(domains, size, seed)?;
            save_dataset(&dataset, &out)?;
            println!("wrote {} samples to {}", dataset.samples.len(), out.display());
        }
        Command::Train(args) => run_training(&args, false)?,
        Command::TrainBaseline(args) => run_training(&args, true)?,
        Command::Eval { checkpoint, dataset, target_domain, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let dataset = load_dataset(&dataset)?;
            let report = evaluate(&ckpt, &dataset, target_domain)?;
            let json = serde_json::to_string_pretty(&report)?;
            if let Some(p) = out {
                std::fs::write(p, &json)?;
            }
            // Report a closed pipe as an error instead of panicking.
            writeln!(std::io::stdout().lock(), "{json}")?;
        }
        Command::Suite { config, results } => {
            let config = ExperimentConfig::load(&config)?;
            let dir = results.unwrap_or_else(default_results);
            let total = config.jobs().len();
            let summary = run_suite_with(&config, &dir, |key, res| match res {
                Ok(row) => eprintln!("done {} dice {:.2} dc {:.4}", row.run_id, row.mean_dice, row.dc),
                Err(e) => eprintln!("FAILED {}: {e}", key.run_id()),
            })?;
            println!(
                "{total} runs: {} completed, {} already present, {} failed (results in {})",
                summary.completed.len(),
                summary.skipped.len(),
                summary.failed.len(),
                dir.display()
            );
            for (id, e) in &summary.failed {
                println!("  {id}: {e}");
            }
            return Ok(summary.all_succeeded());
        }
        Command::Report { results, out } => {
            let dir = results.unwrap_or_else(default_results);
            if !dir.exists() {
                bail!("results directory {} does not exist (set --results or {RESULTS_ENV})", dir.display());
            }
            let out = out.unwrap_or_else(|| dir.join("report"));
            let report = write_report(&dir, &out)?;
            print!("{}", report.text);
            eprintln!("tables and plots written to {}", out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
