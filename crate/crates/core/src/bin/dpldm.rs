//! Command line front end. Exit codes: 0 ok, 2 config, 3 data, 4 budget refusal.

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpldm::accountant::{calibrate_sigma, epsilon_at_delta, Conversion};
use dpldm::checkpoint::Checkpoint;
use dpldm::config::RunConfig;
use dpldm::data::{ingest, ingest_idx, synthetic_shapes, Domain};
use dpldm::dp::DpConfig;
use dpldm::pipeline::{run_stage, verify_ledger, EvalKind, Stage, StageOptions};
use dpldm::{Error, Result};
use serde_json::json;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "dpldm", version, about = "Differentially private latent diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Eval {
    Fid,
    Dpfid,
    Classifier,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Pretrained,
    Finetuned,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConversionArg {
    Classic,
    Improved,
}

impl From<ConversionArg> for Conversion {
    fn from(c: ConversionArg) -> Self {
        match c {
            ConversionArg::Classic => Conversion::Classic,
            ConversionArg::Improved => Conversion::Improved,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build dataset archives, from a config or from a single source.
    Ingest {
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Image directory or existing archive.
        #[arg(long, conflicts_with_all = ["idx", "synthetic"])]
        input: Option<PathBuf>,
        /// MNIST-format image file.
        #[arg(long)]
        idx: Option<PathBuf>,
        #[arg(long, requires = "idx")]
        idx_labels: Option<PathBuf>,
        /// Generate the shapes dataset of one domain.
        #[arg(long, value_parser = ["public", "private"])]
        synthetic: Option<String>,
        #[arg(long, default_value_t = 1024)]
        n: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the autoencoder on public images.
    TrainAe(ConfigArg),
    /// Train the diffusion model on public latents.
    PretrainDm(ConfigArg),
    /// DP-SGD fine-tuning on private latents.
    FinetuneDp {
        #[command(flatten)]
        config: ConfigArg,
        /// Continue from the partial checkpoint.
        #[arg(long)]
        resume: bool,
        /// Stop after this many steps and leave a resumable checkpoint.
        #[arg(long)]
        stop_after: Option<u64>,
    },
    /// Draw samples and decode them to images.
    Sample {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum)]
        source: Option<Source>,
        #[arg(long)]
        count: Option<usize>,
        /// Sample without class labels.
        #[arg(long)]
        unlabeled: bool,
    },
    /// Evaluate samples.
    Eval {
        #[arg(value_enum)]
        kind: Eval,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long, value_enum)]
        source: Option<Source>,
    },
    /// Privacy of a DP-SGD run, or re-verification of a checkpoint's ledger.
    Account {
        #[arg(long, required_unless_present = "checkpoint")]
        q: Option<f64>,
        #[arg(long, required_unless_present = "checkpoint")]
        sigma: Option<f64>,
        #[arg(long, required_unless_present = "checkpoint")]
        steps: Option<u64>,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        #[arg(long, value_enum, default_value = "improved")]
        conversion: ConversionArg,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Noise multiplier reaching a target epsilon.
    Calibrate {
        #[arg(long)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-5)]
        delta: f64,
        /// Sampling rate; or give --n, --batch and --epochs.
        #[arg(long, required_unless_present = "n")]
        q: Option<f64>,
        #[arg(long, required_unless_present = "n", requires = "q")]
        steps: Option<u64>,
        #[arg(long, requires_all = ["batch", "epochs"])]
        n: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        epochs: Option<u64>,
        #[arg(long, value_enum, default_value = "improved")]
        conversion: ConversionArg,
    },
}

fn stage(config: &ConfigArg, stage: Stage, opts: StageOptions, edit: impl FnOnce(&mut RunConfig)) -> Result<()> {
    let mut cfg = RunConfig::load(&config.config)?;
    edit(&mut cfg);
    let out = run_stage(&cfg, stage, &opts)?;
    println!("{}", json!({"stage": stage.name(), "summary": out.summary, "artifacts": out.artifacts}));
    Ok(())
}

fn source_name(s: Source) -> String {
    match s {
        Source::Pretrained => "pretrained".into(),
        Source::Finetuned => "finetuned".into(),
    }
}

fn run(cli: Cli) -> Result<()> {
    let none = StageOptions::default();
    match cli.command {
        Command::Ingest { config, input, idx, idx_labels, synthetic, n, size, seed, out } => {
            if let Some(c) = config {
                return stage(&ConfigArg { config: c }, Stage::Ingest, none, |_| {});
            }
            let ds = if let Some(p) = input {
                ingest(&p)?
            } else if let Some(p) = idx {
                ingest_idx(&p, idx_labels.as_deref())?
            } else if let Some(domain) = synthetic {
                let d = if domain == "public" { Domain::Public } else { Domain::Private };
                synthetic_shapes(n, size, d, seed)
            } else {
                return Err(Error::Config("ingest needs --config, --input, --idx or --synthetic".into()));
            };
            let out = out.ok_or_else(|| Error::Config("--out is required without --config".into()))?;
            ds.save(&out)?;
            println!("{}", json!({"archive": out, "n": ds.len(), "height": ds.height, "width": ds.width, "channels": ds.channels, "classes": ds.class_counts()}));
            Ok(())
        }
        Command::TrainAe(c) => stage(&c, Stage::TrainAe, none, |_| {}),
        Command::PretrainDm(c) => stage(&c, Stage::PretrainDm, none, |_| {}),
        Command::FinetuneDp { config, resume, stop_after } => {
            stage(&config, Stage::FinetuneDp, StageOptions { resume, stop_after }, |_| {})
        }
        Command::Sample { config, source, count, unlabeled } => stage(&config, Stage::Sample, none, |cfg| {
            if let Some(s) = source {
                cfg.sample.source = source_name(s);
            }
            if let Some(n) = count {
                cfg.sample.count = n;
            }
            if unlabeled {
                cfg.sample.labels = false;
            }
        }),
        Command::Eval { kind, config, source } => {
            let kind = match kind {
                Eval::Fid => EvalKind::Fid,
                Eval::Dpfid => EvalKind::DpFid,
                Eval::Classifier => EvalKind::Classifier,
            };
            stage(&config, Stage::Eval(kind), none, |cfg| {
                if let Some(s) = source {
                    cfg.sample.source = source_name(s);
                }
            })
        }
        Command::Account { q, sigma, steps, delta, conversion, checkpoint } => {
            if let Some(path) = checkpoint {
                let (eps, delta) = verify_ledger(&Checkpoint::load(&path)?)?;
                println!("{}", json!({"checkpoint": path, "epsilon": eps, "delta": delta, "verified": true}));
                return Ok(());
            }
            let (q, sigma, steps) = (q.unwrap(), sigma.unwrap(), steps.unwrap());
            let eps = epsilon_at_delta(q, sigma, steps, delta, conversion.into())?;
            println!("{}", json!({"q": q, "sigma": sigma, "steps": steps, "delta": delta, "epsilon": eps}));
            Ok(())
        }
        Command::Calibrate { epsilon, delta, q, steps, n, batch, epochs, conversion } => {
            let (q, steps) = match (n, batch, epochs) {
                (Some(n), Some(b), Some(e)) => (b as f64 / n as f64, DpConfig::steps_for_epochs(e, n, b)),
                _ => match (q, steps) {
                    (Some(q), Some(s)) => (q, s),
                    _ => return Err(Error::Config("calibrate needs --q and --steps, or --n, --batch and --epochs".into())),
                },
            };
            let sigma = calibrate_sigma(q, steps, delta, epsilon, conversion.into())?;
            let achieved = epsilon_at_delta(q, sigma, steps, delta, conversion.into())?;
            println!("{}", json!({"q": q, "steps": steps, "delta": delta, "target_epsilon": epsilon, "sigma": sigma, "epsilon": achieved}));
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
