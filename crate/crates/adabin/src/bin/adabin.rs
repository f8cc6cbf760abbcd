//! Thin command-line front end over the `adabin` library drivers.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use adabin::checkpoint::Checkpoint;
use adabin::config::RunConfig;
use adabin::run;

#[derive(Parser)]
#[command(name = "adabin", version, about = "Train, evaluate, and pack binary networks with adaptive binary sets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum AlphaGradArg {
    Consistent,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    /// Full schedule: 400 epochs, batch 256, whole training split.
    Paper,
    /// Short schedule for a workstation: 30 epochs on a 10k subset.
    Desk,
}

/// Options shared by every subcommand that builds a run configuration.
#[derive(Args)]
struct ConfigArgs {
    /// Path to a key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (falls back to the ADABIN_DATA environment variable).
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Random seed for initialization, data order, and augmentation.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for run artifacts.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Gradient rule for the activation scale alpha.
    #[arg(long, value_enum)]
    alpha_grad: Option<AlphaGradArg>,
    /// Preset schedule applied before other overrides.
    #[arg(long, value_enum)]
    profile: Option<ProfileArg>,
    /// Extra key=value overrides, repeatable (e.g. --set epochs=5).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> adabin::error::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(p) = self.profile {
            cfg.apply_profile(match p {
                ProfileArg::Paper => "paper",
                ProfileArg::Desk => "desk",
            })?;
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.to_string_lossy().into_owned();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.to_string_lossy().into_owned();
        }
        if let Some(a) = self.alpha_grad {
            cfg.set(
                "alpha_grad",
                match a {
                    AlphaGradArg::Consistent => "consistent",
                    AlphaGradArg::Paper => "paper",
                },
            )?;
        }
        cfg.apply_overrides(self.set.iter().map(String::as_str))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics plus checkpoints to the output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured test split.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint to evaluate.
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Print the layer-by-layer cost report with the canonical self-test.
    Bench {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also print the report as JSON lines.
        #[arg(long)]
        json: bool,
    },
    /// Pack a checkpoint into a bit-serialized inference bundle.
    Export {
        /// Checkpoint to pack.
        #[arg(long)]
        ckpt: PathBuf,
        /// Output bundle path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Report the quantizer state stored in a checkpoint.
    Inspect {
        /// Checkpoint to inspect.
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> adabin::error::Result<()> {
    match cli.command {
        Command::Train { cfg, resume } => {
            let cfg = cfg.build()?;
            let ck = match resume {
                Some(path) => Some(Checkpoint::load(path)?),
                None => None,
            };
            let outcome = run::train_from(&cfg, ck.as_ref())?;
            for m in &outcome.metrics {
                println!("{}", serde_json::to_string(m)?);
            }
            println!(
                "best test accuracy {:.2}% -> {}",
                outcome.best_acc * 100.0,
                outcome.out_dir.display()
            );
        }
        Command::Eval { cfg, ckpt } => {
            let cfg = cfg.build()?;
            let ck = Checkpoint::load(ckpt)?;
            let (_, mut model) = run::model_from_checkpoint(&ck)?;
            let (_, test) = run::load_dataset(&cfg)?;
            let rep = run::evaluate(&mut model, &test, cfg.batch_size)?;
            println!("top-1 accuracy: {:.2}%", rep.top1 * 100.0);
            for (class, (correct, total)) in rep.per_class.iter().enumerate() {
                println!(
                    "class {class}: {correct}/{total} ({:.2}%)",
                    100.0 * *correct as f32 / (*total).max(1) as f32
                );
            }
        }
        Command::Bench { cfg, json } => {
            let cfg = cfg.build()?;
            let (text, lines) = run::bench(&cfg)?;
            print!("{text}");
            if json {
                for line in lines {
                    println!("{line}");
                }
            }
        }
        Command::Export { ckpt, out } => {
            let size = run::export(&ckpt, &out)?;
            println!("wrote {} ({size} bytes)", out.display());
        }
        Command::Inspect { ckpt } => {
            let report = run::inspect(ckpt)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}
