use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use obesity_lstm::interpret::{PopulationMode, Scalarization};
use obesity_lstm::pipeline::{self, RunConfig};
use obesity_lstm::Error;

#[derive(Parser, Debug)]
#[command(name = "obesity-lstm", version, about = "Interpretable LSTM pipeline for childhood obesity prediction")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output root used for default artifact paths.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// LMS table (sex,age_months,L,M,S) for BMI-for-age.
    #[arg(long, global = true)]
    bmi_chart: Option<PathBuf>,
    /// LMS table for weight-for-age.
    #[arg(long, global = true)]
    weight_chart: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic population (JSON lines) and its ground-truth sidecar.
    Generate {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        patients: Option<usize>,
    },
    /// Build the 48 sub-cohorts with their splits and index.
    Cohorts {
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train one base model per prediction offset.
    TrainBase {
        #[arg(long)]
        cohorts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fine-tune the base models on every sub-cohort.
    Finetune {
        #[arg(long)]
        cohorts: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        /// Maximum number of models trained concurrently.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Cross-validate the aggregation baselines.
    Baselines {
        #[arg(long)]
        cohorts: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score every model on its test split.
    Evaluate {
        #[arg(long)]
        cohorts: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention and feature-importance reports.
    Explain {
        #[arg(long)]
        cohorts: Option<PathBuf>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        /// Sum absolute embedding-attention products.
        #[arg(long)]
        absolute: bool,
    },
    /// Every stage in order.
    Run {
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    PredictedObese,
    AllTest,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        _ => 4,
    }
}

fn load_config(g: &Global) -> obesity_lstm::Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(d) = &g.out_dir {
        cfg.out_dir = d.clone();
    }
    if let Some(p) = &g.bmi_chart {
        cfg.charts.bmi = Some(p.clone());
    }
    if let Some(p) = &g.weight_chart {
        cfg.charts.weight = Some(p.clone());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> obesity_lstm::Result<()> {
    let mut cfg = load_config(&cli.global)?;
    match &cli.command {
        Command::Generate { patients: Some(n), .. } => cfg.gen.n_patients = *n,
        Command::Cohorts { threshold: Some(t), .. } => cfg.schema.threshold = *t,
        Command::Explain { mode, absolute, .. } => {
            if let Some(m) = mode {
                cfg.population_mode = match m {
                    Mode::PredictedObese => PopulationMode::PredictedObese,
                    Mode::AllTest => PopulationMode::AllTest,
                };
            }
            if *absolute {
                cfg.scalarization = Scalarization::Absolute;
            }
        }
        _ => {}
    }
    cfg.validate()?;
    let or = |p: &Option<PathBuf>, d: PathBuf| p.clone().unwrap_or(d);
    match cli.command {
        Command::Generate { out, .. } => {
            let (pop, truth) = pipeline::generate(&cfg, &or(&out, cfg.population_path()))?;
            println!("wrote {} and {}", pop.display(), truth.display());
        }
        Command::Cohorts { input, out, .. } => {
            let out = or(&out, cfg.cohort_dir());
            let index = pipeline::build_cohorts(&cfg, &or(&input, cfg.population_path()), &out)?;
            let samples: usize = index.cohorts.iter().map(|c| c.n_samples).sum();
            println!("wrote {} sub-cohorts ({samples} samples, {} features) to {}", index.cohorts.len(), index.n_features, out.display());
        }
        Command::TrainBase { cohorts, out } => {
            let names = pipeline::train_base(&cfg, &or(&cohorts, cfg.cohort_dir()), &or(&out, cfg.model_dir()))?;
            println!("trained {}", names.join(", "));
        }
        Command::Finetune { cohorts, models, jobs } => {
            let names = pipeline::finetune(&cfg, &or(&cohorts, cfg.cohort_dir()), &or(&models, cfg.model_dir()), jobs)?;
            println!("fine-tuned {} models", names.len());
        }
        Command::Baselines { cohorts, out } => {
            let rows = pipeline::run_baselines(&cfg, &or(&cohorts, cfg.cohort_dir()), &or(&out, cfg.report_dir()))?;
            println!("wrote {} baseline rows", rows.len());
        }
        Command::Evaluate { cohorts, models, out } => {
            let rows = pipeline::evaluate(&cfg, &or(&cohorts, cfg.cohort_dir()), &or(&models, cfg.model_dir()), &or(&out, cfg.report_dir()))?;
            println!("wrote {} metric rows", rows.len());
        }
        Command::Explain { cohorts, models, out, .. } => {
            let s = pipeline::explain(&cfg, &or(&cohorts, cfg.cohort_dir()), &or(&models, cfg.model_dir()), &or(&out, cfg.report_dir()))?;
            println!("wrote {} explanation reports", s.reports.len());
            if !s.skipped.is_empty() {
                eprintln!("no selected samples for: {}", s.skipped.join(", "));
            }
        }
        Command::Run { jobs } => {
            pipeline::generate(&cfg, &cfg.population_path())?;
            pipeline::build_cohorts(&cfg, &cfg.population_path(), &cfg.cohort_dir())?;
            pipeline::train_base(&cfg, &cfg.cohort_dir(), &cfg.model_dir())?;
            pipeline::finetune(&cfg, &cfg.cohort_dir(), &cfg.model_dir(), jobs)?;
            pipeline::run_baselines(&cfg, &cfg.cohort_dir(), &cfg.report_dir())?;
            pipeline::evaluate(&cfg, &cfg.cohort_dir(), &cfg.model_dir(), &cfg.report_dir())?;
            pipeline::explain(&cfg, &cfg.cohort_dir(), &cfg.model_dir(), &cfg.report_dir())?;
            println!("pipeline complete in {}", cfg.out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
