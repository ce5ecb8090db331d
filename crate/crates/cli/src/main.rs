use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use vitsvm::data::synth;
use vitsvm::gradcheck::{self, GradcheckOptions};
use vitsvm::{cmd_eval, cmd_predict, cmd_train, render_report, RunConfig, VitConfig};

/// Train and evaluate a Vision Transformer classifier with a dense-softmax
/// or squared-hinge SVM head.
#[derive(Debug, Parser)]
#[command(name = "vitsvm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on every record of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// json, csv or text.
        #[arg(long, default_value = "json")]
        format: String,
    },
    /// Classify one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value = "tiny")]
        preset: String,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Perturb this parameter's analytic gradient (negative control).
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write the four-class synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        seed: u64,
        /// Edge length of the square images.
        #[arg(long, default_value_t = synth::DEFAULT_SYNTH_SIZE)]
        size: u32,
    },
}

/// Marks errors caused by invocation rather than by the run itself.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train { config, resume } => {
            let cfg = RunConfig::load(&config).map_err(|e| match e {
                vitsvm::Error::Io { .. } => anyhow::Error::new(UsageError(e.to_string())),
                e => e.into(),
            })?;
            let outcome = cmd_train(&cfg, resume.as_deref())?;
            if let Some(last) = outcome.history.last() {
                println!(
                    "trained {} epochs: val_loss {} val_acc {}",
                    last.epoch, last.val_loss, last.val_acc
                );
            }
            println!("checkpoint: {}", outcome.final_checkpoint.display());
            println!("log: {}", outcome.log_path.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            out,
            format,
        } => {
            let report = cmd_eval(&checkpoint, &manifest)?;
            let text = render_report(&report, &format)?;
            match out {
                Some(p) => std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => print!("{text}{}", if text.ends_with('\n') { "" } else { "\n" }),
            }
        }
        Command::Predict { checkpoint, image } => {
            let p = cmd_predict(&checkpoint, &image)?;
            println!("{}", serde_json::to_string(&p)?);
        }
        Command::Gradcheck { preset, seed, corrupt } => {
            if preset != "tiny" {
                return Err(UsageError(format!(
                    "gradcheck runs on the tiny preset only, got `{preset}`"
                ))
                .into());
            }
            let vit = VitConfig::preset(&preset)?;
            let opts = GradcheckOptions { seed, corrupt, ..Default::default() };
            let reports = gradcheck::gradcheck_all(&vit, &opts)?;
            for r in &reports {
                let status = if r.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{status} {}/{}: max relative error {:.3e} over {} entries (worst {})",
                    r.head,
                    r.mode.name(),
                    r.max_rel,
                    r.entries,
                    r.worst_param
                );
                for g in &r.groups {
                    println!("    {:<12} {:.3e}  {}", g.group, g.max_rel, g.worst_param);
                }
            }
            gradcheck::require_pass(&reports)?;
        }
        Command::Synth {
            out_dir,
            per_class,
            seed,
            size,
        } => {
            if per_class == 0 {
                bail!(UsageError("--per-class must be >= 1".into()));
            }
            let m = synth::generate(&out_dir, per_class, seed, size)?;
            println!("wrote {} images and {}", m.len(), out_dir.join("manifest.csv").display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let usage = err.downcast_ref::<UsageError>().is_some()
        || err.downcast_ref::<vitsvm::Error>().is_some_and(vitsvm::Error::is_usage);
    if usage {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
