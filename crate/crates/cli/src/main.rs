//! `primed`: synthetic data, training, comparison and export from the
//! command line.
//!
//! Exit status is 0 on success, 1 for configuration or usage errors and 2
//! for failures while running.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use primed_core::data::MissingPolicy;
use primed_core::experiment::{self, ExperimentConfig};
use primed_core::metrics::DEFAULT_THRESHOLD;
use primed_core::synth::{self, SynthConfig};
use primed_core::Error;

#[derive(Parser)]
#[command(name = "primed", version, about = "Two-stage deconfounded fair prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset and its ground truth.
    Synth(SynthArgs),
    /// Train a single method and score its test split.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Overrides the config's method list.
        #[arg(short, long)]
        method: String,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Score a dataset with a saved predictor checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CVAE checkpoint, required for methods that use the latent.
        #[arg(long)]
        cvae: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, value_parser = parse_missing, default_value = "strict")]
        missing: MissingPolicy,
        /// Directory for scores.csv, metrics.csv and metrics.json.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Train every configured method on one split and tabulate results.
    Compare {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// DNN disparity sweep over gamma and seeds.
    Pilot {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
        /// Comma-separated; overrides `pilot.gammas`.
        #[arg(long, value_delimiter = ',')]
        gammas: Option<Vec<f64>>,
        /// Comma-separated; overrides `pilot.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Write posterior-mean latents for every record of a dataset.
    ExportLatent {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_missing, default_value = "strict")]
        missing: MissingPolicy,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Check a config file and print it with defaults filled in.
    Validate {
        #[arg(short, long)]
        config: PathBuf,
    },
}

#[derive(Args)]
struct SynthArgs {
    /// Optional TOML file with synth fields; flags override it.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    records: Option<usize>,
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    confounders: Option<usize>,
    #[arg(long)]
    attributes: Option<usize>,
    #[arg(long)]
    minority_prob: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset CSV path; ground truth goes next to it as `<stem>.truth.json`.
    #[arg(short, long)]
    out: PathBuf,
}

fn parse_missing(s: &str) -> Result<MissingPolicy, String> {
    match s {
        "strict" => Ok(MissingPolicy::Strict),
        "mean-impute" => Ok(MissingPolicy::MeanImpute),
        _ => Err(format!("unknown policy `{s}` (strict, mean-impute)")),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 1,
        _ => 2,
    }
}

fn load(path: &Path) -> anyhow::Result<ExperimentConfig> {
    Ok(ExperimentConfig::load(path)?)
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(args) => synth_cmd(args),
        Command::Train {
            config,
            method,
            out,
        } => {
            let mut cfg = load(&config)?;
            cfg.methods = vec![method];
            cfg.validate()?;
            let out = out.unwrap_or_else(|| cfg.output.clone());
            let summary = experiment::run_compare(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("table.txt"))?);
            println!("split {}", summary.split_hash);
            Ok(())
        }
        Command::Evaluate {
            checkpoint,
            cvae,
            data,
            threshold,
            missing,
            out,
        } => {
            let (_, meta) = primed_core::predictor::Classifier::load(&checkpoint)?;
            let context = meta
                .context
                .ok_or_else(|| Error::Checkpoint("predictor checkpoint has no data context".into()))?;
            let raw = primed_core::data::load_csv(&data, &context.roles, missing)?;
            let (scores, report, _) =
                experiment::evaluate(&checkpoint, cvae.as_deref(), &raw, threshold)?;
            std::fs::create_dir_all(&out).map_err(|e| anyhow::anyhow!("{}: {e}", out.display()))?;
            let ids: Vec<usize> = (0..raw.len()).collect();
            std::fs::write(out.join("scores.csv"), experiment::scores_csv(&ids, &scores, &raw)?)?;
            std::fs::write(out.join("metrics.csv"), report.to_csv()?)?;
            std::fs::write(out.join("metrics.json"), report.to_json()?)?;
            println!("AUROC {:.4} on {} records", report.auroc, report.n);
            for a in &report.attributes {
                match a.disparity {
                    Some(d) => println!("{} disparity {d:.4}", a.name),
                    None => println!("{} disparity undefined", a.name),
                }
            }
            Ok(())
        }
        Command::Compare { config, out } => {
            let cfg = load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output.clone());
            experiment::run_compare(&cfg, &out)?;
            print!("{}", std::fs::read_to_string(out.join("table.txt"))?);
            Ok(())
        }
        Command::Pilot {
            config,
            out,
            gammas,
            seeds,
        } => {
            let mut cfg = load(&config)?;
            if let Some(g) = gammas {
                cfg.pilot.gammas = g;
            }
            if let Some(s) = seeds {
                cfg.pilot.seeds = s;
            }
            let out = out.unwrap_or_else(|| cfg.output.clone());
            let table = experiment::run_pilot(&cfg, &out)?;
            println!("{:>8}  {:>10}  {:>8}", "gamma", "disparity", "AUROC");
            for m in &table.medians {
                println!("{:>8}  {:>10.4}  {:>8.4}", m.gamma, m.disparity, m.auroc);
            }
            Ok(())
        }
        Command::ExportLatent {
            checkpoint,
            data,
            missing,
            out,
        } => {
            let (_, meta) = primed_core::cvae::CvaeModel::load(&checkpoint)?;
            let context = meta
                .context
                .ok_or_else(|| Error::Checkpoint("cvae checkpoint has no data context".into()))?;
            let raw = primed_core::data::load_csv(&data, &context.roles, missing)?;
            let z = experiment::export_latent(&checkpoint, &raw, &out)?;
            println!("{} rows x {} latent dims -> {}", z.rows(), z.cols(), out.display());
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = load(&config)?;
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
    }
}

fn synth_cmd(args: SynthArgs) -> anyhow::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            toml::from_str::<SynthConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => SynthConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { cfg.$f = v; })* };
    }
    set!(records, features, confounders, attributes, minority_prob, gamma, eta, noise_sd, seed);
    cfg.validate()?;
    let (dataset, truth) = synth::generate(&cfg)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    synth::save_csv(&dataset, &args.out)?;
    let truth_path = args.out.with_extension("truth.json");
    std::fs::write(&truth_path, serde_json::to_string_pretty(&truth)?)?;
    let positives = dataset.labels().iter().filter(|&&y| y == 1).count();
    println!(
        "{} records, {} positive -> {}",
        dataset.len(),
        positives,
        args.out.display()
    );
    Ok(())
}
